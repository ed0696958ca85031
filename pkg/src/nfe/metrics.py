"""Accuracy, calibration, and diversity metrics for exits and ensembles.

All probabilities are plain T=1 softmaxes of logits; the ensemble prediction
is the argmax of the softmax of the mean logits, ties going to the lowest
class index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

PROB_FLOOR = 1e-12


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def ensemble_predict(exit_logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean-logit ensemble prediction.

    ``exit_logits`` has shape (num_exits, num_samples, num_classes). Returns
    (predicted class per sample, probability rows). argmax takes the lowest
    index on ties.
    """
    z = np.asarray(exit_logits, dtype=np.float64)
    if z.ndim != 3 or z.shape[0] < 1:
        raise ValueError(f"expected (exits, samples, classes) logits, got {z.shape}")
    probs = softmax(z.mean(axis=0))
    return probs.argmax(axis=1), probs


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError("prediction/label length mismatch")
    return float((predictions == labels).mean())


def nll(probabilities: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood (natural log), probabilities floored at 1e-12."""
    p = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    picked = p[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())


def ece(probabilities: np.ndarray, labels: np.ndarray, num_bins: int = 15) -> float:
    """Expected calibration error with equal-width, right-inclusive bins.

    Confidence is the max class probability; each bin contributes its sample
    share times |accuracy - mean confidence|.
    """
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    p = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty dataset")
    conf = p.max(axis=1)
    correct = (p.argmax(axis=1) == labels).astype(np.float64)
    edges = np.linspace(0.0, 1.0, num_bins + 1)
    total = 0.0
    n = len(labels)
    for b in range(num_bins):
        mask = (conf > edges[b]) & (conf <= edges[b + 1])
        if not mask.any():
            continue
        gap = abs(correct[mask].mean() - conf[mask].mean())
        total += (mask.sum() / n) * gap
    return float(total)


def prediction_disagreement(preds_a: np.ndarray, preds_b: np.ndarray) -> float:
    """Fraction of samples two members classify differently."""
    a = np.asarray(preds_a)
    b = np.asarray(preds_b)
    if a.shape != b.shape:
        raise ValueError("prediction length mismatch")
    return float((a != b).mean())


def cosine_similarity(softmax_a: np.ndarray, softmax_b: np.ndarray) -> float:
    """Mean per-sample cosine between two members' probability rows."""
    a = np.asarray(softmax_a, dtype=np.float64)
    b = np.asarray(softmax_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("zero probability vector")
    return float(((a * b).sum(axis=1) / (na * nb)).mean())


@dataclass
class EvalReport:
    """Per-exit and ensemble quality, diversity, and compute cost."""

    per_exit_accuracy: list[float]
    ensemble_accuracy: float
    nll: float
    ece: float
    pairwise_pd: list[list[float]]
    pairwise_cs: list[list[float]]
    flops_ratio: float
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_exit_accuracy": self.per_exit_accuracy,
            "ensemble_accuracy": self.ensemble_accuracy,
            "nll": self.nll,
            "ece": self.ece,
            "pairwise_pd": self.pairwise_pd,
            "pairwise_cs": self.pairwise_cs,
            "flops_ratio": self.flops_ratio,
            "extra": self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            per_exit_accuracy=list(d["per_exit_accuracy"]),
            ensemble_accuracy=float(d["ensemble_accuracy"]),
            nll=float(d["nll"]),
            ece=float(d["ece"]),
            pairwise_pd=[list(r) for r in d["pairwise_pd"]],
            pairwise_cs=[list(r) for r in d["pairwise_cs"]],
            flops_ratio=float(d["flops_ratio"]),
            extra=dict(d.get("extra", {})),
        )

    def mean_offdiag_pd(self) -> float:
        n = len(self.pairwise_pd)
        if n < 2:
            return 0.0
        vals = [
            self.pairwise_pd[i][j] for i in range(n) for j in range(n) if i != j
        ]
        return float(np.mean(vals))


def evaluate_logits(
    exit_logits: np.ndarray,
    labels: np.ndarray,
    num_bins: int = 15,
    flops_ratio: float = float("nan"),
) -> EvalReport:
    """Compute the full report from stacked exit logits (exits, samples, classes)."""
    z = np.asarray(exit_logits, dtype=np.float64)
    labels = np.asarray(labels)
    n_exits = z.shape[0]
    ens_pred, ens_probs = ensemble_predict(z)
    exit_probs = [softmax(z[i]) for i in range(n_exits)]
    exit_preds = [p.argmax(axis=1) for p in exit_probs]

    pd_matrix = [[0.0] * n_exits for _ in range(n_exits)]
    cs_matrix = [[1.0] * n_exits for _ in range(n_exits)]
    for i in range(n_exits):
        for j in range(i + 1, n_exits):
            d = prediction_disagreement(exit_preds[i], exit_preds[j])
            c = cosine_similarity(exit_probs[i], exit_probs[j])
            pd_matrix[i][j] = pd_matrix[j][i] = d
            cs_matrix[i][j] = cs_matrix[j][i] = c

    return EvalReport(
        per_exit_accuracy=[accuracy(p, labels) for p in exit_preds],
        ensemble_accuracy=accuracy(ens_pred, labels),
        nll=nll(ens_probs, labels),
        ece=ece(ens_probs, labels, num_bins=num_bins),
        pairwise_pd=pd_matrix,
        pairwise_cs=cs_matrix,
        flops_ratio=flops_ratio,
    )


def collect_exit_logits(
    model, loader, device: str | torch.device = "cpu"
) -> tuple[np.ndarray, np.ndarray]:
    """Run the model over a loader; returns (exits, samples, classes) logits + labels."""
    model.eval()
    chunks: list[list[np.ndarray]] = []
    labels: list[np.ndarray] = []
    with torch.no_grad():
        for x, y in loader:
            outs = model(x.to(device))
            chunks.append([z.cpu().double().numpy() for z in outs])
            labels.append(np.asarray(y))
    n_exits = len(chunks[0])
    stacked = np.stack(
        [np.concatenate([c[i] for c in chunks], axis=0) for i in range(n_exits)]
    )
    return stacked, np.concatenate(labels)


def evaluate_model(model, loader, device="cpu", num_bins: int = 15) -> EvalReport:
    """Evaluate a multi-exit model on a loader, including its FLOPs ratio."""
    from .multiexit import count_flops

    logits, labels = collect_exit_logits(model, loader, device=device)
    report = evaluate_logits(logits, labels, num_bins=num_bins)
    report.flops_ratio = count_flops(model).ratio
    return report


def format_report_table(rows: Sequence[tuple[str, EvalReport]], spec_hash: str = "") -> str:
    """Fixed-width table with accuracy/NLL/ECE/FLOPs columns."""
    header = f"{'Method':<36}{'Acc (%)':>9}{'NLL':>8}{'ECE':>8}{'FLOPs':>8}"
    lines = [header, "-" * len(header)]
    for label, rep in rows:
        lines.append(
            f"{label:<36}"
            f"{100 * rep.ensemble_accuracy:>9.2f}"
            f"{rep.nll:>8.3f}"
            f"{rep.ece:>8.3f}"
            f"{rep.flops_ratio:>7.2f}x"
        )
    if spec_hash:
        lines.append(f"spec-hash: {spec_hash}")
    return "\n".join(lines)
