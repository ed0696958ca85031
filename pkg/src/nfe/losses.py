"""Ensemble-teacher distillation loss over all exits.

The teacher is the arithmetic mean of exit logits, softened by temperature;
every exit is trained with hard-label cross entropy plus an alpha-weighted
KL divergence toward the teacher. By default the cross-entropy term uses
unsoftened logits, the KL term carries no temperature-squared scale, and no
gradient flows through the teacher; each choice sits behind a flag.
"""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F


def ensemble_logits(exit_logits: Sequence[torch.Tensor]) -> torch.Tensor:
    """Arithmetic mean of the exit logits."""
    if len(exit_logits) == 0:
        raise ValueError("need at least one exit")
    first = exit_logits[0]
    for z in exit_logits[1:]:
        if z.shape != first.shape:
            raise ValueError(f"logit shape mismatch: {z.shape} vs {first.shape}")
    return torch.stack(tuple(exit_logits), dim=0).mean(dim=0)


def teacher_signal(
    z_e: torch.Tensor, temperature: float, detach: bool = True
) -> torch.Tensor:
    """Temperature-softened softmax of the ensemble logits.

    With ``detach`` (default) the teacher is a constant for gradient purposes,
    so no exit is pulled toward matching its own influence on the ensemble.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    q = F.softmax(z_e / temperature, dim=-1)
    return q.detach() if detach else q


def nfe_loss_components(
    exit_logits: Sequence[torch.Tensor],
    labels: torch.Tensor,
    alpha: float = 1.0,
    temperature: float = 3.0,
    detach_teacher: bool = True,
    soften_ce: bool = False,
    kl_t2_scale: bool = False,
) -> dict[str, torch.Tensor]:
    """Per-exit cross-entropy and teacher-KL terms plus their weighted total.

    total = sum_i [ CE(softmax(z_i), y) + alpha * KL(q_i || q_E) ] where the
    KL softens both arguments by the temperature. Returns a dict with
    ``total`` (scalar), ``ce`` and ``kl`` (one entry per exit, batch means).
    """
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    num_classes = exit_logits[0].shape[-1]
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError("label index outside [0, num_classes)")

    z_e = ensemble_logits(exit_logits)
    log_q_e = F.log_softmax(z_e / temperature, dim=-1)
    if detach_teacher:
        log_q_e = log_q_e.detach()

    ce_terms = []
    kl_terms = []
    for z in exit_logits:
        ce = F.cross_entropy(z / temperature if soften_ce else z, labels)
        log_q = F.log_softmax(z / temperature, dim=-1)
        kl = (log_q.exp() * (log_q - log_q_e)).sum(dim=-1).mean()
        if kl_t2_scale:
            kl = kl * temperature * temperature
        ce_terms.append(ce)
        kl_terms.append(kl)

    ce_stack = torch.stack(ce_terms)
    kl_stack = torch.stack(kl_terms)
    total = ce_stack.sum() + alpha * kl_stack.sum()
    return {"total": total, "ce": ce_stack, "kl": kl_stack}


def nfe_loss(
    exit_logits: Sequence[torch.Tensor],
    labels: torch.Tensor,
    alpha: float = 1.0,
    temperature: float = 3.0,
    detach_teacher: bool = True,
    soften_ce: bool = False,
    kl_t2_scale: bool = False,
) -> torch.Tensor:
    """Scalar training loss (see :func:`nfe_loss_components`)."""
    return nfe_loss_components(
        exit_logits,
        labels,
        alpha=alpha,
        temperature=temperature,
        detach_teacher=detach_teacher,
        soften_ce=soften_ce,
        kl_t2_scale=kl_t2_scale,
    )["total"]
