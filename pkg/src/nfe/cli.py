"""Command-line interface: plan / train / eval / sweep / plot / report.

Errors exit nonzero with a machine-readable JSON error class on stderr.
The dataset cache directory comes from --data-dir or $NFE_DATA_DIR.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import DatasetSpec, ingest_dataset, make_loader
from .errors import NfeError
from .fission import build_execution_dag
from .harness import (
    ExperimentResult,
    ExperimentSpec,
    build_spec_backbone,
    pai_stage_masks,
    resolve_plan,
    results_table,
    run_experiment,
    sweep_group_ratio,
    sweep_sparsity,
)
from .metrics import EvalReport, evaluate_model, format_report_table
from .multiexit import count_flops, fission_transform, parameter_breakdown
from .pai import PaiConfig
from .training import TrainConfig, load_checkpoint
from .fission import build_group_masks


def _add_spec_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backbone", default="small-resnet",
                   choices=["small-resnet", "mid-resnet", "wide-resnet-like", "toy-mlp"])
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--blocks", type=int, default=None, help="blocks per stage")
    p.add_argument("--widen", type=int, default=None)
    p.add_argument("--exits", type=int, default=2)
    p.add_argument("--plan", default=None,
                   help="explicit groups per stage, e.g. 1,2,3,4")
    p.add_argument("--variant", default=None, help="variant name, e.g. Res*2*4")
    p.add_argument("--ratio", type=float, default=None,
                   help="two-way grouping ratio for split stages")
    p.add_argument("--pai", default="none", choices=["none", "snip", "erk"])
    p.add_argument("--sparsity", type=float, default=0.0)
    p.add_argument("--saliency-batches", type=int, default=1)
    p.add_argument("--dataset", default="synthetic",
                   choices=["cifar10", "cifar100", "synthetic"])
    p.add_argument("--subsample", type=float, default=1.0)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--noise", type=float, default=1.0, help="synthetic noise sigma")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--temperature", type=float, default=3.0)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--schedule", default="half_then_linear",
                   choices=["milestone_decay", "half_then_linear"])
    p.add_argument("--milestones", default="75,130,180")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--name", default="")


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _parse_float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _spec_from_args(args) -> ExperimentSpec:
    return ExperimentSpec(
        name=args.name,
        backbone=args.backbone,
        width=args.width,
        blocks_per_stage=args.blocks,
        widen=args.widen,
        exits=args.exits,
        plan_groups=_parse_int_list(args.plan) if args.plan else None,
        variant=args.variant,
        group_ratio=args.ratio,
        pai=PaiConfig(
            method=args.pai, sparsity=args.sparsity,
            saliency_batches=args.saliency_batches,
        ),
        train=TrainConfig(
            epochs=args.epochs, batch_size=args.batch_size, lr_initial=args.lr,
            lr_schedule=args.schedule, lr_milestones=_parse_int_list(args.milestones),
            alpha=args.alpha, temperature=args.temperature, seed=args.seed,
        ),
        dataset=DatasetSpec(
            name=args.dataset, subsample=args.subsample, data_dir=args.data_dir,
            synthetic_noise=args.noise,
        ),
        repeats=args.repeats,
    )


def cmd_plan(args) -> int:
    spec = _spec_from_args(args)
    backbone = build_spec_backbone(spec, spec.dataset.num_classes)
    plan = resolve_plan(spec, backbone.num_stages)
    print(f"plan: exits={plan.num_exits} stages={plan.num_stages} "
          f"groups={list(plan.groups_per_stage)}")
    for i, ratios in enumerate(plan.group_ratios, start=1):
        print(f"  stage {i}: groups={plan.groups_per_stage[i - 1]} "
              f"ratios={[round(r, 4) for r in ratios]}")
    dag = build_execution_dag(plan)
    print(f"dag: {len(dag.nodes)} nodes")
    for idx, node in enumerate(dag.nodes):
        src = "stem" if node.lineage < 0 else f"node {node.lineage}"
        print(f"  node {idx}: stage {node.stage} group {node.group} <- {src}")
    for e, path in enumerate(dag.exit_paths, start=1):
        print(f"  exit {e}: nodes {path}")

    loader = None
    if spec.pai.method == "snip" and spec.pai.sparsity > 0:
        train_ds, _ = ingest_dataset(spec.dataset)
        loader = make_loader(train_ds, spec.train.batch_size, shuffle=True,
                             seed=spec.train.seed)
    pai = pai_stage_masks(backbone, spec.pai, loader, spec.train.seed)
    masks = build_group_masks(plan, backbone.stage_shapes(), pai_masks=pai,
                              sparsity=spec.pai.sparsity, seed=spec.train.seed)
    model = fission_transform(backbone, plan, masks)
    rep = count_flops(model)
    print(f"flops: total ratio {rep.ratio:.4f}, conv-only ratio {rep.conv_ratio:.4f}")
    for j, macs in enumerate(rep.per_exit, start=1):
        print(f"  exit {j} standalone: {macs / 1e6:.2f} MMACs")
    print(f"params: {parameter_breakdown(model)}")
    return 0


def cmd_train(args) -> int:
    spec = _spec_from_args(args)
    result = run_experiment(spec, args.out, force=args.force)
    print(results_table([(spec.name or "run", result)]))
    print(f"artifacts: {result.run_dir}")
    return 0


def cmd_eval(args) -> int:
    model, payload = load_checkpoint(args.checkpoint)
    dataset = DatasetSpec(
        name=args.dataset, subsample=args.subsample, data_dir=args.data_dir,
        synthetic_noise=args.noise,
    )
    _, test_ds = ingest_dataset(dataset)
    report = evaluate_model(model, make_loader(test_ds, 256, shuffle=False))
    print(format_report_table([("checkpoint", report)]))
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    spec = _spec_from_args(args)
    values = _parse_float_list(args.values)
    if args.sweep == "sparsity":
        method = args.pai if args.pai != "none" else "erk"
        pairs = sweep_sparsity(spec, values, args.out, method=method, force=args.force)
        label = "S"
    else:
        pairs = sweep_group_ratio(spec, values, args.out, force=args.force)
        label = "ratio"
    print(results_table([(f"{label}={v}", res) for v, res in pairs]))
    return 0


def _load_results(paths: list[str]) -> list[tuple[str, ExperimentResult]]:
    out = []
    for p in paths:
        blob = json.loads((Path(p) / "result.json").read_text())
        spec = ExperimentSpec.from_dict(blob["spec"])
        out.append(
            (
                spec.name or blob["spec_hash"],
                ExperimentResult(
                    spec,
                    blob["spec_hash"],
                    blob["seeds"],
                    [EvalReport.from_dict(r) for r in blob["reports"]],
                    blob["run_dir"],
                ),
            )
        )
    return out


def cmd_report(args) -> int:
    print(results_table(_load_results(args.results)))
    return 0


def cmd_plot(args) -> int:
    from .plots import plot_accuracy_vs_flops

    results = _load_results(args.results)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = plot_accuracy_vs_flops(results, out / "accuracy_vs_flops.png")
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nfe",
        description="Multi-exit self-ensembles: fission plans, training, evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="inspect a fission plan, DAG, and FLOPs without training")
    _add_spec_args(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("train", help="train one experiment spec (repeats x seeds)")
    _add_spec_args(p)
    p.add_argument("--out", default="results")
    p.add_argument("--force", action="store_true", help="ignore cached runs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default="synthetic",
                   choices=["cifar10", "cifar100", "synthetic"])
    p.add_argument("--subsample", type=float, default=1.0)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--noise", type=float, default=1.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="sweep sparsity or grouping ratio")
    _add_spec_args(p)
    p.add_argument("--sweep", required=True, choices=["sparsity", "ratio"])
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", default="results")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="print the results table for finished runs")
    p.add_argument("results", nargs="+", help="run directories with result.json")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("plot", help="emit plots from finished runs")
    p.add_argument("results", nargs="+")
    p.add_argument("--out", default="plots")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NfeError as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return exc.exit_code
    except (ValueError, FileNotFoundError) as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
