"""Pruning-at-initialization masks: SNIP saliency and ERK random topology.

Both methods return binary keep-masks over the prunable weight tensors and
hit the global nonzero budget ceil((1 - S) * prunable) exactly. Classifier
heads and downsampling/shortcut convolutions are never pruned; callers pass
only prunable tensors (or name them in ``exclude`` to force all-ones masks).
"""

from __future__ import annotations

import math
from collections.abc import Collection, Iterable, Mapping
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError

PAI_METHODS = ("none", "snip", "erk")


@dataclass(frozen=True)
class PaiConfig:
    """Which PaI method to run, at what sparsity, on how many saliency batches."""

    method: str = "none"
    sparsity: float = 0.0
    saliency_batches: int = 1

    def __post_init__(self):
        if self.method not in PAI_METHODS:
            raise ConfigError(f"pai method must be one of {PAI_METHODS}, got {self.method!r}")
        if not 0.0 <= self.sparsity < 1.0:
            raise ConfigError(f"sparsity must be in [0, 1), got {self.sparsity}")
        if self.saliency_batches < 1:
            raise ConfigError("saliency_batches must be >= 1")


def keep_budget(total: int, sparsity: float) -> int:
    """ceil((1 - S) * total), computed exactly for decimal-literal sparsities."""
    if not 0.0 <= sparsity < 1.0:
        raise ConfigError(f"sparsity must be in [0, 1), got {sparsity}")
    frac = 1 - Fraction(str(sparsity))
    return math.ceil(total * frac)


def _split_prunable(
    tensors: Mapping[str, np.ndarray] | Mapping[str, tuple],
    exclude: Collection[str],
) -> tuple[list[str], list[str]]:
    excluded = [n for n in tensors if n in set(exclude)]
    prunable = [n for n in tensors if n not in set(exclude)]
    return prunable, excluded


def snip_masks(
    weights: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    sparsity: float,
    exclude: Collection[str] = (),
) -> dict[str, np.ndarray]:
    """Keep the globally top-(1-S) weights ranked by saliency |w * dL/dw|.

    Ties are broken by descending weight magnitude, then ascending flat
    index, so the mask is a deterministic function of weights and gradients.
    Excluded tensors come back all-ones and do not consume budget.
    """
    prunable, excluded = _split_prunable(weights, exclude)
    if not prunable:
        raise ConfigError("no prunable tensors given")
    missing = [n for n in prunable if n not in grads]
    if missing:
        raise ConfigError(f"missing gradients for {missing}")

    flat_w = np.concatenate(
        [np.asarray(weights[n], dtype=np.float64).reshape(-1) for n in prunable]
    )
    flat_g = np.concatenate(
        [np.asarray(grads[n], dtype=np.float64).reshape(-1) for n in prunable]
    )
    saliency = np.abs(flat_w * flat_g)
    flat_w = np.abs(flat_w)
    n = saliency.size
    k = keep_budget(n, sparsity)
    order = np.lexsort((np.arange(n), -flat_w, -saliency))
    keep = np.zeros(n, dtype=np.uint8)
    keep[order[:k]] = 1

    out: dict[str, np.ndarray] = {}
    off = 0
    for name in prunable:
        size = int(np.prod(weights[name].shape))
        out[name] = keep[off : off + size].reshape(weights[name].shape)
        off += size
    for name in excluded:
        out[name] = np.ones(weights[name].shape, dtype=np.uint8)
    return out


def erk_densities(
    shapes: Mapping[str, tuple], sparsity: float
) -> dict[str, float]:
    """Per-layer keep densities under Erdos-Renyi-Kernel scaling.

    Density is proportional to (fan_in + fan_out + kernel_area) /
    (fan_in * fan_out * kernel_area), rescaled so the expected global
    nonzero count matches (1 - S) * total. Layers whose density would
    exceed 1 are clamped dense and the remainder redistributed.
    """
    names = list(shapes)
    sizes = {n: int(np.prod(shapes[n])) for n in names}
    total = sum(sizes.values())
    target = keep_budget(total, sparsity)

    def raw(shape: tuple) -> float:
        if len(shape) < 2:
            raise ConfigError(f"cannot compute ERK scaling for shape {shape}")
        fan_out, fan_in = shape[0], shape[1]
        kernel_area = int(np.prod(shape[2:])) if len(shape) > 2 else 1
        return (fan_in + fan_out + kernel_area) / (fan_in * fan_out * kernel_area)

    raws = {n: raw(shapes[n]) for n in names}
    dense: set[str] = set()
    eps = 0.0
    while True:
        rhs = target - sum(sizes[n] for n in dense)
        flexible = [n for n in names if n not in dense]
        if not flexible:
            if rhs > 0:
                raise ConfigError("ERK budget infeasible: all layers dense yet budget unmet")
            break
        if rhs < 0:
            raise ConfigError("ERK budget infeasible: dense layers alone exceed the budget")
        divisor = sum(raws[n] * sizes[n] for n in flexible)
        eps = rhs / divisor
        overshoot = [n for n in flexible if eps * raws[n] > 1.0]
        if not overshoot:
            break
        dense.update(overshoot)
    return {n: 1.0 if n in dense else eps * raws[n] for n in names}


def _integer_counts(
    shapes: Mapping[str, tuple], densities: Mapping[str, float], target: int
) -> dict[str, int]:
    """Round real per-layer counts to integers summing exactly to target."""
    names = list(shapes)
    sizes = {n: int(np.prod(shapes[n])) for n in names}
    real = {n: densities[n] * sizes[n] for n in names}
    counts = {n: min(sizes[n], int(math.floor(real[n] + 1e-9))) for n in names}
    deficit = target - sum(counts.values())
    # Largest-remainder assignment; ties resolved by layer size then name.
    by_remainder = sorted(names, key=lambda n: (-(real[n] - counts[n]), -sizes[n], n))
    while deficit > 0:
        progressed = False
        for n in by_remainder:
            if deficit == 0:
                break
            if counts[n] < sizes[n]:
                counts[n] += 1
                deficit -= 1
                progressed = True
        if deficit > 0 and not progressed:
            raise ConfigError("ERK budget infeasible: no capacity left")
    while deficit < 0:
        progressed = False
        for n in reversed(by_remainder):
            if deficit == 0:
                break
            if counts[n] > 0:
                counts[n] -= 1
                deficit += 1
                progressed = True
        if deficit < 0 and not progressed:
            raise ConfigError("ERK budget cannot be met")
    return counts


def erk_masks(
    shapes: Mapping[str, tuple],
    sparsity: float,
    rng: np.random.Generator,
    exclude: Collection[str] = (),
) -> dict[str, np.ndarray]:
    """Random-topology masks with ERK layer-wise densities and an exact budget.

    Positions are chosen uniformly at random inside each layer; the global
    nonzero count over prunable layers equals ceil((1 - S) * prunable).
    """
    prunable, excluded = _split_prunable(shapes, exclude)
    if not prunable:
        raise ConfigError("no prunable tensors given")
    pr_shapes = {n: tuple(shapes[n]) for n in prunable}
    total = sum(int(np.prod(s)) for s in pr_shapes.values())
    target = keep_budget(total, sparsity)
    densities = erk_densities(pr_shapes, sparsity)
    counts = _integer_counts(pr_shapes, densities, target)

    out: dict[str, np.ndarray] = {}
    for name in prunable:
        size = int(np.prod(pr_shapes[name]))
        mask = np.zeros(size, dtype=np.uint8)
        keep_idx = rng.permutation(size)[: counts[name]]
        mask[keep_idx] = 1
        out[name] = mask.reshape(pr_shapes[name])
    for name in excluded:
        out[name] = np.ones(tuple(shapes[name]), dtype=np.uint8)
    return out


# ---------------------------------------------------------------------------
# Saliency gradients (torch side)
# ---------------------------------------------------------------------------


def accumulate_loss_gradients(
    model: torch.nn.Module,
    batches: Iterable[tuple[torch.Tensor, torch.Tensor]],
    params: list[tuple[str, torch.nn.Parameter]],
    max_batches: int = 1,
    device: str | torch.device = "cpu",
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Accumulate cross-entropy gradients at initialization for SNIP scoring.

    Returns (weights, summed gradients) as float64 numpy arrays keyed like
    ``params``. The model is restored to its prior grad state afterward.
    """
    named = dict(params)
    grads = {n: np.zeros(p.shape, dtype=np.float64) for n, p in named.items()}
    was_training = model.training
    model.eval()  # saliency uses init-time statistics, no BN updates
    seen = 0
    for x, y in batches:
        if seen >= max_batches:
            break
        x, y = x.to(device), y.to(device)
        model.zero_grad(set_to_none=True)
        logits = model(x)
        loss = F.cross_entropy(logits, y)
        loss.backward()
        for n, p in named.items():
            if p.grad is not None:
                grads[n] += p.grad.detach().cpu().double().numpy()
        seen += 1
    if seen == 0:
        raise ConfigError("saliency computation received no batches")
    model.zero_grad(set_to_none=True)
    model.train(was_training)
    weights = {n: p.detach().cpu().double().numpy() for n, p in named.items()}
    return weights, grads
