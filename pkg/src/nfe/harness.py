"""Experiment orchestration: specs, seeded runs, caching, sweeps, tables.

A spec fully determines an experiment; its hash keys the on-disk cache so
sweeps and the acceptance suite never recompute finished runs. Every run
trains `repeats` models with consecutive seeds and aggregates mean/std.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbones import StagedBackbone, build_backbone
from .data import DatasetSpec, ingest_dataset, make_loader
from .errors import ConfigError
from .fission import (
    FissionPlan,
    build_group_masks,
    default_plan,
    make_plan,
    parse_variant_name,
)
from .metrics import EvalReport, evaluate_model, format_report_table
from .multiexit import fission_transform
from .pai import PaiConfig, accumulate_loss_gradients, erk_masks, snip_masks
from .training import TrainConfig, save_checkpoint, train


@dataclass
class ExperimentSpec:
    """Everything needed to reproduce one experiment end to end."""

    name: str = ""
    backbone: str = "small-resnet"
    width: int | None = None
    blocks_per_stage: int | None = None
    widen: int | None = None
    exits: int = 2
    plan_groups: tuple[int, ...] | None = None
    variant: str | None = None
    group_ratio: float | None = None
    pai: PaiConfig = field(default_factory=PaiConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    repeats: int = 3

    def __post_init__(self):
        if self.exits < 1:
            raise ConfigError("exits must be >= 1")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["pai"] = dataclasses.asdict(self.pai)
        d["train"] = self.train.to_dict()
        d["dataset"] = self.dataset.to_dict()
        d["plan_groups"] = list(self.plan_groups) if self.plan_groups else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        d["pai"] = PaiConfig(**d.get("pai", {}))
        d["train"] = TrainConfig.from_dict(d.get("train", {}))
        d["dataset"] = DatasetSpec.from_dict(d.get("dataset", {}))
        pg = d.get("plan_groups")
        d["plan_groups"] = tuple(pg) if pg else None
        return cls(**d)

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_spec_backbone(spec: ExperimentSpec, num_classes: int) -> StagedBackbone:
    return build_backbone(
        spec.backbone,
        num_classes=num_classes,
        width=spec.width,
        blocks_per_stage=spec.blocks_per_stage,
        widen=spec.widen,
    )


def resolve_plan(spec: ExperimentSpec, num_stages: int) -> FissionPlan:
    """Turn spec sugar (explicit groups, variant name, ratio) into a plan."""
    if spec.plan_groups is not None and spec.variant is not None:
        raise ConfigError("give either plan_groups or variant, not both")
    if spec.variant is not None:
        groups = parse_variant_name(spec.variant)
        if len(groups) != num_stages:
            raise ConfigError(
                f"variant {spec.variant!r} encodes {len(groups)} stages, "
                f"backbone has {num_stages}"
            )
        plan = make_plan(groups, num_exits=spec.exits)
    elif spec.plan_groups is not None:
        plan = make_plan(spec.plan_groups, num_exits=spec.exits)
        if plan.num_stages != num_stages:
            raise ConfigError(
                f"plan_groups covers {plan.num_stages} stages, backbone has {num_stages}"
            )
    else:
        plan = default_plan(spec.exits, num_stages)
    if spec.group_ratio is not None:
        plan = plan.with_two_group_ratio(spec.group_ratio)
    return plan


def pai_stage_masks(
    backbone: StagedBackbone,
    cfg: PaiConfig,
    loader,
    seed: int,
    device="cpu",
) -> list[dict[str, np.ndarray]] | None:
    """Per-stage PaI masks for a backbone, or None when pruning is off.

    Only groupable stage weights are prunable; the stem, shortcut convs, and
    heads are excluded by construction.
    """
    if cfg.method == "none" or cfg.sparsity == 0.0:
        return None
    named: list[tuple[str, torch.nn.Parameter]] = []
    stage_of: list[tuple[int, str]] = []
    for i in range(1, backbone.num_stages + 1):
        for rel, mod in backbone.groupable_layers(i):
            named.append((f"s{i}.{rel}", mod.weight))
            stage_of.append((i, rel))
    if cfg.method == "snip":
        if loader is None:
            raise ConfigError("snip needs labeled batches at initialization")
        weights, grads = accumulate_loss_gradients(
            backbone, loader, named, max_batches=cfg.saliency_batches, device=device
        )
        flat = snip_masks(weights, grads, cfg.sparsity)
    else:
        shapes = {n: tuple(p.shape) for n, p in named}
        flat = erk_masks(shapes, cfg.sparsity, np.random.default_rng(seed))
    out: list[dict[str, np.ndarray]] = [dict() for _ in range(backbone.num_stages)]
    for (i, rel), (name, _) in zip(stage_of, named):
        out[i - 1][rel] = flat[name]
    return out


@dataclass
class ExperimentResult:
    """Per-seed reports plus mean/std aggregates for one spec."""

    spec: ExperimentSpec
    spec_hash: str
    seeds: list[int]
    reports: list[EvalReport]
    run_dir: str

    def aggregate(self) -> dict:
        def stats(values):
            arr = np.asarray(values, dtype=np.float64)
            return {"mean": float(arr.mean()), "std": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0}

        return {
            "ensemble_accuracy": stats([r.ensemble_accuracy for r in self.reports]),
            "mean_exit_accuracy": stats(
                [float(np.mean(r.per_exit_accuracy)) for r in self.reports]
            ),
            "nll": stats([r.nll for r in self.reports]),
            "ece": stats([r.ece for r in self.reports]),
            "prediction_disagreement": stats([r.mean_offdiag_pd() for r in self.reports]),
            "flops_ratio": stats([r.flops_ratio for r in self.reports]),
        }

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "spec_hash": self.spec_hash,
            "seeds": self.seeds,
            "reports": [r.to_dict() for r in self.reports],
            "aggregate": self.aggregate(),
            "run_dir": self.run_dir,
        }


def _run_one_seed(
    spec: ExperimentSpec, seed: int, seed_dir: Path, device="cpu", verbose=True
) -> EvalReport:
    torch.manual_seed(seed)
    train_ds, test_ds = ingest_dataset(spec.dataset)
    train_loader = make_loader(train_ds, spec.train.batch_size, shuffle=True, seed=seed)
    test_loader = make_loader(test_ds, 256, shuffle=False)

    backbone = build_spec_backbone(spec, spec.dataset.num_classes)
    plan = resolve_plan(spec, backbone.num_stages)
    pai = pai_stage_masks(backbone, spec.pai, train_loader, seed, device=device)
    masks = build_group_masks(
        plan, backbone.stage_shapes(), pai_masks=pai,
        sparsity=spec.pai.sparsity, seed=seed,
    )
    model = fission_transform(backbone, plan, masks)

    cfg = dataclasses.replace(spec.train, seed=seed)
    history = train(
        model, train_loader, cfg, log_path=seed_dir / "train_log.jsonl", device=device
    )
    report = evaluate_model(model, test_loader, device=device)
    report.extra = {"seed": seed, "spec_hash": spec.spec_hash()}
    save_checkpoint(model, seed_dir / "checkpoint.pt", train_config=cfg, history=history)
    (seed_dir / "report.json").write_text(report.to_json())
    if verbose:
        print(
            f"[{spec.name or spec.spec_hash()}] seed {seed}: "
            f"ens acc {report.ensemble_accuracy:.4f}, "
            f"exits {[round(a, 4) for a in report.per_exit_accuracy]}"
        )
    return report


def run_experiment(
    spec: ExperimentSpec,
    out_dir: str | Path,
    device: str = "cpu",
    force: bool = False,
    verbose: bool = True,
) -> ExperimentResult:
    """Run (or load from cache) all seeds of a spec and aggregate reports."""
    spec_hash = spec.spec_hash()
    run_dir = Path(out_dir) / spec_hash
    run_dir.mkdir(parents=True, exist_ok=True)
    spec.save(run_dir / "spec.json")

    seeds = [spec.train.seed + r for r in range(spec.repeats)]
    reports = []
    for seed in seeds:
        seed_dir = run_dir / f"seed{seed}"
        seed_dir.mkdir(exist_ok=True)
        report_path = seed_dir / "report.json"
        if report_path.exists() and not force:
            reports.append(EvalReport.from_dict(json.loads(report_path.read_text())))
            continue
        reports.append(_run_one_seed(spec, seed, seed_dir, device=device, verbose=verbose))

    result = ExperimentResult(spec, spec_hash, seeds, reports, str(run_dir))
    (run_dir / "result.json").write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    return result


def sweep_sparsity(
    spec: ExperimentSpec,
    sparsities: list[float],
    out_dir: str | Path,
    method: str | None = None,
    **kw,
) -> list[tuple[float, ExperimentResult]]:
    """One experiment per sparsity level (method defaults to the spec's)."""
    results = []
    for s in sparsities:
        pai = PaiConfig(
            method=(method or spec.pai.method) if s > 0 else "none",
            sparsity=s,
            saliency_batches=spec.pai.saliency_batches,
        )
        sub = dataclasses.replace(
            spec, pai=pai, name=f"{spec.name or 'sweep'}-S{s}"
        )
        results.append((s, run_experiment(sub, out_dir, **kw)))
    return results


def sweep_group_ratio(
    spec: ExperimentSpec,
    ratios: list[float],
    out_dir: str | Path,
    **kw,
) -> list[tuple[float, ExperimentResult]]:
    """One experiment per two-way grouping ratio (r, 1-r)."""
    results = []
    for r in ratios:
        sub = dataclasses.replace(
            spec, group_ratio=r, name=f"{spec.name or 'sweep'}-ratio{r}"
        )
        results.append((r, run_experiment(sub, out_dir, **kw)))
    return results


def results_table(results: list[tuple[str, ExperimentResult]]) -> str:
    """Mean-over-seeds table with the columns of the standard comparison."""
    rows = []
    for label, res in results:
        agg = res.aggregate()
        rep = EvalReport(
            per_exit_accuracy=[],
            ensemble_accuracy=agg["ensemble_accuracy"]["mean"],
            nll=agg["nll"]["mean"],
            ece=agg["ece"]["mean"],
            pairwise_pd=[],
            pairwise_cs=[],
            flops_ratio=agg["flops_ratio"]["mean"],
        )
        rows.append((f"{label} [{res.spec_hash}]", rep))
    return format_report_table(rows)
