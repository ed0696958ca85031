"""SNIP saliency ranking, ERK density allocation, and budget exactness."""

import numpy as np
import pytest

from nfe.errors import ConfigError
from nfe.pai import (
    PaiConfig,
    erk_densities,
    erk_masks,
    keep_budget,
    snip_masks,
)


class TestPaiConfig:
    def test_defaults(self):
        cfg = PaiConfig()
        assert cfg.method == "none"
        assert cfg.sparsity == 0.0

    def test_bad_method(self):
        with pytest.raises(ConfigError):
            PaiConfig(method="grasp")

    def test_sparsity_bounds(self):
        with pytest.raises(ConfigError):
            PaiConfig(method="snip", sparsity=1.0)
        with pytest.raises(ConfigError):
            PaiConfig(method="snip", sparsity=-0.1)


class TestKeepBudget:
    @pytest.mark.parametrize(
        "total, sparsity, expected",
        [
            (100000, 0.25, 75000),
            (100000, 0.5, 50000),
            (100000, 0.75, 25000),
            (100000, 0.9, 10000),
            (10, 0.7, 3),
            (7, 0.5, 4),  # ceil(3.5)
            (5, 0.0, 5),
        ],
    )
    def test_exact_ceiling(self, total, sparsity, expected):
        assert keep_budget(total, sparsity) == expected

    def test_rejects_full_sparsity(self):
        with pytest.raises(ConfigError):
            keep_budget(10, 1.0)


class TestSnip:
    def test_top_half_by_saliency(self):
        w = {"a": np.array([3.0, 1.0, 2.0, 4.0])}
        g = {"a": np.ones(4)}
        mask = snip_masks(w, g, sparsity=0.5)
        assert np.array_equal(mask["a"], [1, 0, 0, 1])

    def test_zero_gradients_fall_back_to_magnitude(self):
        w = {"a": np.array([0.5, 2.0, -3.0, 1.0])}
        g = {"a": np.zeros(4)}
        mask = snip_masks(w, g, sparsity=0.5)
        assert np.array_equal(mask["a"], [0, 1, 1, 0])

    def test_full_tie_breaks_by_flat_index(self):
        w = {"a": np.ones(4)}
        g = {"a": np.zeros(4)}
        mask = snip_masks(w, g, sparsity=0.5)
        assert np.array_equal(mask["a"], [1, 1, 0, 0])

    def test_global_ranking_across_layers(self):
        w = {"a": np.array([1.0, 1.0]), "b": np.array([1.0, 1.0])}
        g = {"a": np.array([10.0, 0.1]), "b": np.array([5.0, 0.2])}
        mask = snip_masks(w, g, sparsity=0.5)
        assert np.array_equal(mask["a"], [1, 0])
        assert np.array_equal(mask["b"], [1, 0])

    def test_excluded_layers_stay_dense(self):
        w = {"a": np.zeros((4, 4)), "head": np.zeros((10, 4))}
        g = {"a": np.ones((4, 4)), "head": np.ones((10, 4))}
        mask = snip_masks(w, g, sparsity=0.75, exclude=["head"])
        assert mask["head"].all()
        assert int(mask["a"].sum()) == keep_budget(16, 0.75)

    @pytest.mark.parametrize("sparsity", [0.25, 0.5, 0.75, 0.9])
    def test_budget_exactness(self, sparsity):
        rng = np.random.default_rng(0)
        w = {
            "c1": rng.normal(size=(64, 32, 3, 3)),
            "c2": rng.normal(size=(128, 64, 3, 3)),
            "c3": rng.normal(size=(10, 128)),
        }
        g = {n: rng.normal(size=a.shape) for n, a in w.items()}
        masks = snip_masks(w, g, sparsity=sparsity)
        total = sum(a.size for a in w.values())
        nonzero = sum(int(m.sum()) for m in masks.values())
        assert nonzero == keep_budget(total, sparsity)

    def test_count_oracle_large(self):
        rng = np.random.default_rng(1)
        w = {"a": rng.normal(size=(100, 1000))}
        g = {"a": rng.normal(size=(100, 1000))}
        masks = snip_masks(w, g, sparsity=0.75)
        assert int(masks["a"].sum()) == 25000

    def test_missing_gradients_rejected(self):
        with pytest.raises(ConfigError):
            snip_masks({"a": np.ones(3)}, {}, sparsity=0.5)


class TestErk:
    def test_zero_sparsity_all_ones(self):
        rng = np.random.default_rng(0)
        masks = erk_masks({"a": (8, 8), "b": (4, 4, 3, 3)}, 0.0, rng)
        assert all(m.all() for m in masks.values())

    def test_equal_layers_get_equal_density(self):
        shapes = {"a": (100, 100), "b": (100, 100)}
        d = erk_densities(shapes, 0.5)
        assert d["a"] == pytest.approx(d["b"])
        rng = np.random.default_rng(0)
        masks = erk_masks(shapes, 0.5, rng)
        nonzero = sum(int(m.sum()) for m in masks.values())
        assert nonzero == keep_budget(20000, 0.5)
        for m in masks.values():
            assert abs(int(m.sum()) / 10000 - 0.5) < 0.01

    def test_larger_layer_is_sparser(self):
        # A 10x larger layer must end up with strictly lower keep density.
        d = erk_densities({"small": (32, 32, 3, 3), "big": (320, 32, 3, 3)}, 0.5)
        assert d["big"] < d["small"]

    @pytest.mark.parametrize("sparsity", [0.25, 0.5, 0.75, 0.9])
    def test_budget_exactness(self, sparsity):
        shapes = {
            "c1": (16, 3, 3, 3),
            "c2": (32, 16, 3, 3),
            "c3": (64, 32, 3, 3),
            "fc": (10, 64),
        }
        rng = np.random.default_rng(7)
        masks = erk_masks(shapes, sparsity, rng)
        total = sum(int(np.prod(s)) for s in shapes.values())
        nonzero = sum(int(m.sum()) for m in masks.values())
        assert nonzero == keep_budget(total, sparsity)

    def test_determinism(self):
        shapes = {"a": (64, 64, 3, 3), "b": (10, 64)}
        m1 = erk_masks(shapes, 0.5, np.random.default_rng(3))
        m2 = erk_masks(shapes, 0.5, np.random.default_rng(3))
        for n in shapes:
            assert np.array_equal(m1[n], m2[n])

    def test_tiny_layer_clamps_dense(self):
        # The tiny layer's ERK density exceeds 1; it must clamp and the
        # budget must still be met by the big layer.
        shapes = {"tiny": (2, 2), "big": (256, 256, 3, 3)}
        d = erk_densities(shapes, 0.5)
        assert d["tiny"] == 1.0
        rng = np.random.default_rng(0)
        masks = erk_masks(shapes, 0.5, rng)
        total = 4 + 256 * 256 * 9
        assert sum(int(m.sum()) for m in masks.values()) == keep_budget(total, 0.5)

    def test_excluded_layers_stay_dense(self):
        shapes = {"a": (64, 64), "head": (10, 64)}
        rng = np.random.default_rng(0)
        masks = erk_masks(shapes, 0.5, rng, exclude=["head"])
        assert masks["head"].all()
        assert int(masks["a"].sum()) == keep_budget(64 * 64, 0.5)
