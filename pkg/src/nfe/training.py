"""SGD training loop for multi-exit models, schedules, and checkpoints."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .errors import ConfigError, TrainingDivergedError
from .fission import FissionPlan, mask_container_bytes, mask_container_from_bytes
from .losses import ensemble_logits, nfe_loss_components
from .multiexit import MultiExitModel, fission_transform
from .backbones import rebuild_backbone

LR_SCHEDULES = ("milestone_decay", "half_then_linear")


@dataclass
class TrainConfig:
    """Optimizer and loss settings; defaults follow the reference recipe."""

    epochs: int = 200
    batch_size: int = 128
    lr_initial: float = 0.1
    lr_schedule: str = "milestone_decay"
    lr_milestones: tuple[int, ...] = (75, 130, 180)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    alpha: float = 1.0
    temperature: float = 3.0
    seed: int = 0
    detach_teacher: bool = True
    soften_ce: bool = False
    kl_t2_scale: bool = False
    use_cutmix: bool = False

    def __post_init__(self):
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.use_cutmix:
            raise ConfigError("cutmix is a config hook only; not implemented")
        self.lr_milestones = tuple(self.lr_milestones)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["lr_milestones"] = tuple(d.get("lr_milestones", (75, 130, 180)))
        return cls(**d)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Learning rate for a 0-based epoch under the configured schedule.

    milestone_decay drops by 10x at each milestone. half_then_linear holds
    the initial rate for the first half, drops to a tenth at the midpoint,
    decays linearly to a hundredth at 90% of training, then stays there.
    """
    if not 0 <= epoch < config.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {config.epochs})")
    lr0 = config.lr_initial
    if config.lr_schedule == "milestone_decay":
        passed = sum(1 for m in config.lr_milestones if epoch >= m)
        return lr0 * 0.1**passed
    frac = epoch / config.epochs
    if frac < 0.5:
        return lr0
    if frac >= 0.9:
        return 0.01 * lr0
    return lr0 * (0.1 + (0.01 - 0.1) * (frac - 0.5) / 0.4)


def _epoch_record(epoch, lr, n_batches, n_samples, loss_sum, ce_sums, kl_sums, exit_correct, ens_correct):
    return {
        "epoch": epoch,
        "lr": lr,
        "loss": loss_sum / n_batches,
        "exit_ce": [s / n_batches for s in ce_sums],
        "exit_kl": [s / n_batches for s in kl_sums],
        "exit_acc": [c / n_samples for c in exit_correct],
        "ensemble_acc": ens_correct / n_samples,
    }


def train(
    model: MultiExitModel,
    train_loader,
    config: TrainConfig,
    log_path: str | Path | None = None,
    device: str | torch.device = "cpu",
) -> list[dict]:
    """Train all exits jointly with the ensemble-distillation loss.

    Returns one record per epoch (lr, per-exit loss terms, per-exit and
    ensemble train accuracy); the same records go to ``log_path`` as JSON
    lines. Non-finite loss aborts with a diagnostic. Pruned weight positions
    are re-masked after every optimizer step.
    """
    torch.manual_seed(config.seed)
    model.to(device)
    opt = torch.optim.SGD(
        model.parameters(),
        lr=config.lr_initial,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    history: list[dict] = []
    log_file = open(log_path, "a") if log_path is not None else None
    try:
        for epoch in range(config.epochs):
            lr = lr_at(epoch, config)
            for group in opt.param_groups:
                group["lr"] = lr
            model.train()
            n_batches = 0
            n_samples = 0
            loss_sum = 0.0
            ce_sums = [0.0] * model.num_exits
            kl_sums = [0.0] * model.num_exits
            exit_correct = [0] * model.num_exits
            ens_correct = 0
            for x, y in train_loader:
                x, y = x.to(device), y.to(device)
                logits = model(x)
                parts = nfe_loss_components(
                    logits,
                    y,
                    alpha=config.alpha,
                    temperature=config.temperature,
                    detach_teacher=config.detach_teacher,
                    soften_ce=config.soften_ce,
                    kl_t2_scale=config.kl_t2_scale,
                )
                total = parts["total"]
                if not torch.isfinite(total):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch {n_batches}: "
                        f"ce={parts['ce'].tolist()} kl={parts['kl'].tolist()}"
                    )
                opt.zero_grad(set_to_none=True)
                total.backward()
                opt.step()
                model.apply_weight_masks()

                with torch.no_grad():
                    loss_sum += float(total.detach())
                    ce_vals = parts["ce"].detach()
                    kl_vals = parts["kl"].detach()
                    for i in range(model.num_exits):
                        ce_sums[i] += float(ce_vals[i])
                        kl_sums[i] += float(kl_vals[i])
                        exit_correct[i] += int((logits[i].argmax(1) == y).sum())
                    ens_correct += int(
                        (ensemble_logits(logits).argmax(1) == y).sum()
                    )
                n_batches += 1
                n_samples += int(y.shape[0])
            record = _epoch_record(
                epoch, lr, n_batches, n_samples, loss_sum, ce_sums, kl_sums,
                exit_correct, ens_correct,
            )
            history.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()
    return history


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(
    model: MultiExitModel,
    path: str | Path,
    train_config: TrainConfig | None = None,
    history: list[dict] | None = None,
    extra: dict | None = None,
) -> None:
    """Persist everything needed to rebuild the model with identical outputs."""
    payload = {
        "format": "nfe-checkpoint-v1",
        "backbone_config": model.backbone_config,
        "plan": model.plan.to_dict(),
        "mask_container": mask_container_bytes(model.mask_set),
        "state_dict": model.state_dict(),
        "train_config": train_config.to_dict() if train_config else None,
        "history": history,
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path, map_location="cpu") -> tuple[MultiExitModel, dict]:
    """Rebuild a model from a checkpoint; returns (model, payload)."""
    payload = torch.load(path, map_location=map_location, weights_only=False)
    if payload.get("format") != "nfe-checkpoint-v1":
        raise ConfigError(f"{path}: not an nfe checkpoint")
    backbone = rebuild_backbone(payload["backbone_config"])
    mask_set = mask_container_from_bytes(payload["mask_container"])
    plan = FissionPlan.from_dict(payload["plan"])
    model = fission_transform(backbone, plan, mask_set)
    model.load_state_dict(payload["state_dict"])
    model.apply_weight_masks()
    return model, payload
