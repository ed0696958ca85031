"""Experiment orchestration: caching, reproducibility, sweeps, tables, plots."""

import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from nfe.data import DatasetSpec
from nfe.errors import ConfigError
from nfe.harness import (
    ExperimentSpec,
    build_spec_backbone,
    pai_stage_masks,
    resolve_plan,
    results_table,
    run_experiment,
    sweep_group_ratio,
    sweep_sparsity,
)
from nfe.pai import PaiConfig, keep_budget
from nfe.training import TrainConfig


def tiny_spec(**kw):
    """Seconds-scale spec: 200 train / 40 test synthetic samples, width-4 net."""
    base = dict(
        name="tiny",
        backbone="small-resnet",
        width=4,
        exits=1,
        train=TrainConfig(
            epochs=1, batch_size=64, lr_initial=0.05,
            lr_schedule="half_then_linear", alpha=0.0, seed=0,
        ),
        dataset=DatasetSpec(name="synthetic", subsample=0.004, synthetic_noise=1.5),
        repeats=1,
    )
    base.update(kw)
    return ExperimentSpec(**base)


class TestSpec:
    def test_round_trip(self):
        spec = tiny_spec(exits=2, group_ratio=0.25, plan_groups=(1, 1, 2, 2))
        again = ExperimentSpec.from_dict(spec.to_dict())
        assert again == spec
        assert again.spec_hash() == spec.spec_hash()

    def test_hash_sensitive_to_fields(self):
        a = tiny_spec()
        b = tiny_spec(exits=2)
        assert a.spec_hash() != b.spec_hash()

    def test_save_load(self, tmp_path):
        spec = tiny_spec()
        spec.save(tmp_path / "spec.json")
        assert ExperimentSpec.load(tmp_path / "spec.json") == spec


class TestResolvePlan:
    def test_default_from_exits(self):
        plan = resolve_plan(tiny_spec(exits=2), num_stages=4)
        assert plan.groups_per_stage == (1, 1, 1, 2)

    def test_explicit_groups(self):
        plan = resolve_plan(tiny_spec(exits=2, plan_groups=(1, 2, 1, 2)), 4)
        assert plan.groups_per_stage == (1, 2, 1, 2)

    def test_variant_sugar(self):
        plan = resolve_plan(tiny_spec(exits=2, variant="Res**34"), 4)
        assert plan.groups_per_stage == (1, 1, 2, 2)

    def test_variant_stage_count_checked(self):
        with pytest.raises(ConfigError):
            resolve_plan(tiny_spec(exits=2, variant="WRN1*3"), 4)

    def test_ratio_applied_to_two_group_stages(self):
        plan = resolve_plan(tiny_spec(exits=2, group_ratio=0.1), 4)
        assert plan.group_ratios[3] == (0.1, 0.9)

    def test_groups_and_variant_conflict(self):
        spec = tiny_spec(exits=2, plan_groups=(1, 1, 1, 2), variant="Res1**4")
        with pytest.raises(ConfigError):
            resolve_plan(spec, 4)


class TestPaiIntegration:
    def test_none_returns_no_masks(self):
        spec = tiny_spec()
        backbone = build_spec_backbone(spec, 10)
        assert pai_stage_masks(backbone, PaiConfig(), None, seed=0) is None

    def test_erk_budget_over_stage_weights(self):
        spec = tiny_spec()
        backbone = build_spec_backbone(spec, 10)
        masks = pai_stage_masks(
            backbone, PaiConfig(method="erk", sparsity=0.5), None, seed=0
        )
        total = sum(
            int(np.prod(s)) for stage in backbone.stage_shapes() for _, s in stage
        )
        nonzero = sum(int(m.sum()) for stage in masks for m in stage.values())
        assert nonzero == keep_budget(total, 0.5)

    def test_snip_needs_batches(self):
        spec = tiny_spec()
        backbone = build_spec_backbone(spec, 10)
        with pytest.raises(ConfigError):
            pai_stage_masks(
                backbone, PaiConfig(method="snip", sparsity=0.5), None, seed=0
            )


class TestRunExperiment:
    def test_single_seed_run_and_cache(self, tmp_path):
        spec = tiny_spec()
        res1 = run_experiment(spec, tmp_path, verbose=False)
        assert len(res1.reports) == 1
        run_dir = Path(res1.run_dir)
        assert (run_dir / "seed0" / "report.json").exists()
        assert (run_dir / "seed0" / "checkpoint.pt").exists()
        assert (run_dir / "seed0" / "train_log.jsonl").exists()
        assert (run_dir / "result.json").exists()

        # Cached load returns the same numbers without retraining.
        res2 = run_experiment(spec, tmp_path, verbose=False)
        assert res2.reports[0].to_dict() == res1.reports[0].to_dict()

    def test_recompute_is_deterministic(self, tmp_path):
        spec = tiny_spec(exits=2, train=TrainConfig(
            epochs=1, batch_size=64, lr_initial=0.05,
            lr_schedule="half_then_linear", alpha=1.0, seed=3,
        ))
        res1 = run_experiment(spec, tmp_path / "a", verbose=False)
        res2 = run_experiment(spec, tmp_path / "b", verbose=False)
        assert res1.reports[0].to_dict() == res2.reports[0].to_dict()

    def test_repeats_produce_one_report_per_seed(self, tmp_path):
        spec = tiny_spec(repeats=2)
        res = run_experiment(spec, tmp_path, verbose=False)
        assert res.seeds == [0, 1]
        assert len(res.reports) == 2
        agg = res.aggregate()
        assert set(agg) >= {
            "ensemble_accuracy", "nll", "ece", "prediction_disagreement", "flops_ratio",
        }

    def test_reports_carry_spec_hash(self, tmp_path):
        spec = tiny_spec()
        res = run_experiment(spec, tmp_path, verbose=False)
        assert res.reports[0].extra["spec_hash"] == spec.spec_hash()

    def test_pai_spec_trains(self, tmp_path):
        spec = tiny_spec(
            exits=2, pai=PaiConfig(method="erk", sparsity=0.5),
        )
        res = run_experiment(spec, tmp_path, verbose=False)
        assert res.reports[0].flops_ratio < 1.0


class TestSweeps:
    def test_sparsity_sweep_shapes(self, tmp_path):
        spec = tiny_spec(exits=2)
        pairs = sweep_sparsity(
            spec, [0.0, 0.5], tmp_path, method="erk", verbose=False
        )
        assert [s for s, _ in pairs] == [0.0, 0.5]
        assert pairs[0][1].reports[0].flops_ratio > pairs[1][1].reports[0].flops_ratio

    def test_ratio_sweep_shapes(self, tmp_path):
        spec = tiny_spec(exits=2)
        pairs = sweep_group_ratio(spec, [0.25, 0.5], tmp_path, verbose=False)
        assert [r for r, _ in pairs] == [0.25, 0.5]
        hashes = {res.spec_hash for _, res in pairs}
        assert len(hashes) == 2

    def test_table_lists_all_rows(self, tmp_path):
        spec = tiny_spec(exits=2)
        pairs = sweep_group_ratio(spec, [0.5], tmp_path, verbose=False)
        table = results_table([("r=0.5", pairs[0][1])])
        assert "r=0.5" in table
        assert pairs[0][1].spec_hash in table


class TestPlots:
    def test_emit_plot_files(self, tmp_path):
        from nfe.plots import plot_accuracy_vs_flops, plot_ratio_curve, plot_sparsity_curves

        spec = tiny_spec(exits=2)
        res = run_experiment(spec, tmp_path, verbose=False)
        p1 = plot_accuracy_vs_flops([("tiny", res)], tmp_path / "scatter.png")
        p2 = plot_sparsity_curves({"tiny": [(0.0, res)]}, tmp_path / "sparsity.png")
        p3 = plot_ratio_curve([(0.5, res)], tmp_path / "ratio.png")
        for p in (p1, p2, p3):
            assert p.exists() and p.stat().st_size > 0
