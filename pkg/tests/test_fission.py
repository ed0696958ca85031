"""Plan construction, mask partitioning, path fall-back, and DAG dedup."""

import numpy as np
import pytest

from nfe.errors import ConfigError
from nfe.fission import (
    DagNode,
    FissionPlan,
    apply_pai,
    build_execution_dag,
    build_group_masks,
    default_plan,
    exit_path_groups,
    group_for,
    load_mask_container,
    make_plan,
    masks_from_assignments,
    parse_variant_name,
    partition_stage,
    save_mask_container,
)


class TestDefaultPlan:
    def test_four_exits_four_stages(self):
        plan = default_plan(4, 4)
        assert plan.groups_per_stage == (1, 2, 3, 4)

    def test_single_exit_is_plain_network(self):
        assert default_plan(1, 4).groups_per_stage == (1, 1, 1, 1)

    def test_two_exits_split_last_stage_only(self):
        # Hand trace of the countdown: n stays above 1 only at the last stage.
        assert default_plan(2, 4).groups_per_stage == (1, 1, 1, 2)

    def test_three_exits_three_stages(self):
        assert default_plan(3, 3).groups_per_stage == (1, 2, 3)

    def test_uniform_ratios(self):
        plan = default_plan(3, 4)
        for g, ratios in zip(plan.groups_per_stage, plan.group_ratios):
            assert len(ratios) == g
            assert ratios == tuple([1.0 / g] * g)

    def test_more_exits_than_stages_rejected(self):
        with pytest.raises(ConfigError):
            default_plan(5, 4)

    @pytest.mark.parametrize("n, k", [(0, 4), (-1, 4), (2, 0)])
    def test_non_positive_rejected(self, n, k):
        with pytest.raises(ConfigError):
            default_plan(n, k)


class TestPlanValidation:
    def test_first_stage_must_be_shared(self):
        with pytest.raises(ConfigError):
            make_plan([2, 2], num_exits=2)

    def test_ratio_sum_checked(self):
        with pytest.raises(ConfigError):
            make_plan([1, 2], group_ratios=[[1.0], [0.6, 0.6]])

    def test_ratio_count_checked(self):
        with pytest.raises(ConfigError):
            make_plan([1, 2], group_ratios=[[1.0], [1.0]])

    def test_group_count_bounded_by_exits(self):
        with pytest.raises(ConfigError):
            make_plan([1, 3], num_exits=2)

    def test_with_two_group_ratio(self):
        plan = make_plan([1, 1, 2, 2]).with_two_group_ratio(0.25)
        assert plan.group_ratios[2] == (0.25, 0.75)
        assert plan.group_ratios[3] == (0.25, 0.75)
        assert plan.group_ratios[0] == (1.0,)

    def test_round_trip_dict(self):
        plan = default_plan(3, 4)
        assert FissionPlan.from_dict(plan.to_dict()) == plan

    def test_monotone_flag(self):
        assert default_plan(4, 4).is_monotone()
        assert not make_plan([1, 2, 1, 2]).is_monotone()


class TestVariantNames:
    @pytest.mark.parametrize(
        "name, expected",
        [
            ("Res1**4", (1, 1, 1, 2)),
            ("Res*2*4", (1, 2, 1, 2)),
            ("Res**34", (1, 1, 2, 2)),
            ("WRN1*3", (1, 1, 2)),
        ],
    )
    def test_known_names(self, name, expected):
        assert parse_variant_name(name) == expected

    def test_bad_character(self):
        with pytest.raises(ConfigError):
            parse_variant_name("Res1x*4")

    def test_missing_code(self):
        with pytest.raises(ConfigError):
            parse_variant_name("Res")


class TestPartitionStage:
    def test_forced_draws(self):
        # Draws [1,2,2,1] over a 2x2 tensor pin both masks exactly.
        assign = np.array([[1, 2], [2, 1]])
        m1, m2 = masks_from_assignments(assign, 2)
        assert np.array_equal(m1, [[1, 0], [0, 1]])
        assert np.array_equal(m2, [[0, 1], [1, 0]])

    def test_single_group_is_identity(self):
        rng = np.random.default_rng(0)
        (mask,) = partition_stage((3, 5), 1, [1.0], rng)
        assert mask.dtype == np.uint8
        assert mask.sum() == 15

    def test_single_group_consumes_no_rng(self):
        rng_a = np.random.default_rng(7)
        partition_stage((4, 4), 1, [1.0], rng_a)
        rng_b = np.random.default_rng(7)
        assert rng_a.random() == rng_b.random()

    def test_partition_and_disjointness(self):
        rng = np.random.default_rng(3)
        masks = partition_stage((8, 4, 3, 3), 3, [0.2, 0.3, 0.5], rng)
        total = sum(m.astype(int) for m in masks)
        assert np.array_equal(total, np.ones((8, 4, 3, 3), dtype=int))

    def test_binomial_counts(self):
        # Uniform 4-way split over 10^4 positions: each group lands within
        # 3 sigma of 2500, sigma = sqrt(10000 * 0.25 * 0.75).
        rng = np.random.default_rng(1)
        masks = partition_stage((100, 100), 4, [0.25] * 4, rng)
        sigma = np.sqrt(10000 * 0.25 * 0.75)
        for m in masks:
            assert abs(int(m.sum()) - 2500) <= 3 * sigma

    def test_bad_ratios_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ConfigError):
            partition_stage((2, 2), 2, [0.7, 0.7], rng)
        with pytest.raises(ConfigError):
            partition_stage((2, 2), 0, [], rng)


class TestApplyPai:
    def test_all_ones_is_identity(self):
        rng = np.random.default_rng(0)
        masks = partition_stage((6, 6), 2, [0.5, 0.5], rng)
        out = apply_pai(masks, np.ones((6, 6), dtype=np.uint8))
        for a, b in zip(masks, out):
            assert np.array_equal(a, b)

    def test_all_zeros_warns_and_zeroes(self):
        rng = np.random.default_rng(0)
        masks = partition_stage((4, 4), 2, [0.5, 0.5], rng)
        with pytest.warns(UserWarning):
            out = apply_pai(masks, np.zeros((4, 4), dtype=np.uint8))
        assert all(int(m.sum()) == 0 for m in out)

    def test_counts_preserved(self):
        rng = np.random.default_rng(5)
        masks = partition_stage((100, 100), 3, [1 / 3] * 3, rng)
        pai = (rng.random((100, 100)) < 0.5).astype(np.uint8)
        out = apply_pai(masks, pai)
        assert sum(int(m.sum()) for m in out) == int(pai.sum())

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            apply_pai([np.ones((2, 2), dtype=np.uint8)], np.ones((3, 3), dtype=np.uint8))


class TestGroupFor:
    def setup_method(self):
        self.plan = default_plan(4, 4)

    def test_fallback_to_group_one(self):
        # Exit 3 has no group at stage 2 (only 2 groups there).
        assert group_for(2, 3, self.plan) == 1

    def test_own_group_when_present(self):
        assert group_for(4, 2, self.plan) == 2

    def test_first_stage_always_group_one(self):
        for e in range(1, 5):
            assert group_for(1, e, self.plan) == 1

    def test_four_exit_paths_match_reference_listing(self):
        expected = {
            1: [1, 1, 1, 1],
            2: [1, 2, 2, 2],
            3: [1, 1, 3, 3],
            4: [1, 1, 1, 4],
        }
        for e, path in expected.items():
            assert exit_path_groups(self.plan, e) == path

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            group_for(0, 1, self.plan)
        with pytest.raises(ConfigError):
            group_for(5, 1, self.plan)
        with pytest.raises(ConfigError):
            group_for(1, 5, self.plan)

    def test_totality_and_bound(self):
        # Always defined in range, and never exceeds the stage's group count.
        for n in range(1, 5):
            for k in range(n, 6):
                plan = default_plan(n, k)
                for stage in range(1, k + 1):
                    for e in range(1, n + 1):
                        g = group_for(stage, e, plan)
                        assert 1 <= g <= plan.groups_per_stage[stage - 1]


class TestExecutionDag:
    def test_full_fission_node_count(self):
        dag = build_execution_dag(default_plan(4, 4))
        assert len(dag.nodes) == 10
        assert len(dag.exit_heads) == 4

    def test_single_exit_is_chain(self):
        dag = build_execution_dag(default_plan(1, 4))
        assert len(dag.nodes) == 4
        assert dag.edges == [(0, 1), (1, 2), (2, 3)]
        assert dag.exit_heads == [3]

    def test_two_exit_trunk_sharing(self):
        dag = build_execution_dag(make_plan([1, 1, 1, 2]))
        assert len(dag.nodes) == 5  # 3 shared trunk nodes + 2 last-stage groups

    def test_nodes_unique(self):
        for plan in [default_plan(4, 4), make_plan([1, 2, 1, 2]), default_plan(3, 5)]:
            dag = build_execution_dag(plan)
            keys = {(n.stage, n.group, n.lineage) for n in dag.nodes}
            assert len(keys) == len(dag.nodes)

    def test_monotone_plan_has_one_node_per_stage_group(self):
        plan = default_plan(4, 4)
        dag = build_execution_dag(plan)
        pairs = [(n.stage, n.group) for n in dag.nodes]
        assert len(pairs) == len(set(pairs))
        expected = {
            (s, g)
            for s in range(1, 5)
            for g in range(1, plan.groups_per_stage[s - 1] + 1)
        }
        assert set(pairs) == expected

    def test_paths_follow_fallback_rule(self):
        plan = default_plan(4, 4)
        dag = build_execution_dag(plan)
        for e in range(1, 5):
            node_groups = [dag.nodes[i].group for i in dag.exit_paths[e - 1]]
            assert node_groups == exit_path_groups(plan, e)

    def test_non_monotone_duplicates_group_with_new_lineage(self):
        # g=[1,2,1,2]: the stage-3 shared group runs on two distinct inputs.
        dag = build_execution_dag(make_plan([1, 2, 1, 2]))
        stage3 = [dag.nodes[i] for i in dag.nodes_at_stage(3)]
        assert len(stage3) == 2
        assert {n.group for n in stage3} == {1}
        assert len(dag.nodes) == 7

    def test_prefix_sharing(self):
        # Exits 1 and 4 share stages 1-3 under full fission.
        dag = build_execution_dag(default_plan(4, 4))
        p1, p4 = dag.exit_paths[0], dag.exit_paths[3]
        assert p1[:3] == p4[:3]
        assert p1[3] != p4[3]


class TestBuildGroupMasks:
    def _shapes(self):
        return [
            [("conv", (8, 3, 3, 3))],
            [("conv", (16, 8, 3, 3))],
            [("conv1", (16, 16, 3, 3)), ("conv2", (16, 16, 3, 3))],
        ]

    def test_partition_invariant_holds(self):
        plan = default_plan(3, 3)
        ms = build_group_masks(plan, self._shapes(), seed=11)
        ms.validate()

    def test_determinism(self):
        plan = default_plan(3, 3)
        a = build_group_masks(plan, self._shapes(), seed=42)
        b = build_group_masks(plan, self._shapes(), seed=42)
        for i in range(3):
            for j in range(plan.groups_per_stage[i]):
                for name in a.group_masks[i][j]:
                    assert np.array_equal(a.group_masks[i][j][name], b.group_masks[i][j][name])

    def test_different_seeds_differ(self):
        plan = default_plan(3, 3)
        a = build_group_masks(plan, self._shapes(), seed=1)
        b = build_group_masks(plan, self._shapes(), seed=2)
        same = all(
            np.array_equal(a.group_masks[2][j][n], b.group_masks[2][j][n])
            for j in range(3)
            for n in a.group_masks[2][j]
        )
        assert not same

    def test_masks_are_immutable(self):
        ms = build_group_masks(default_plan(2, 3), self._shapes()[:3], seed=0)
        with pytest.raises(ValueError):
            ms.group_masks[0][0]["conv"][0, 0, 0, 0] = 0

    def test_pai_intersection(self):
        plan = default_plan(2, 3)
        shapes = self._shapes()
        rng = np.random.default_rng(9)
        pai = [
            {name: (rng.random(shape) < 0.5).astype(np.uint8) for name, shape in stage}
            for stage in shapes
        ]
        ms = build_group_masks(plan, shapes, pai_masks=pai, sparsity=0.5, seed=3)
        ms.validate()
        assert ms.total_surviving() == sum(
            int(p.sum()) for stage in pai for p in stage.values()
        )


class TestMaskContainer:
    def test_round_trip(self, tmp_path):
        plan = default_plan(3, 4)
        shapes = [
            [("c", (4, 3, 3, 3))],
            [("c", (8, 4, 3, 3))],
            [("c1", (8, 8, 3, 3)), ("c2", (8, 8, 1, 1))],
            [("c", (16, 8, 3, 3))],
        ]
        rng = np.random.default_rng(0)
        pai = [
            {name: (rng.random(shape) < 0.7).astype(np.uint8) for name, shape in stage}
            for stage in shapes
        ]
        ms = build_group_masks(plan, shapes, pai_masks=pai, sparsity=0.3, seed=17)
        path = tmp_path / "masks.nfm"
        save_mask_container(ms, path)
        loaded = load_mask_container(path)
        assert loaded.plan == plan
        assert loaded.sparsity == pytest.approx(0.3)
        assert loaded.seed == 17
        for i in range(4):
            for name, _ in shapes[i]:
                assert np.array_equal(loaded.pai_masks[i][name], ms.pai_masks[i][name])
                for j in range(plan.groups_per_stage[i]):
                    assert np.array_equal(
                        loaded.group_masks[i][j][name], ms.group_masks[i][j][name]
                    )

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.nfm"
        p.write_bytes(b"not a mask container")
        with pytest.raises(ValueError):
            load_mask_container(p)
