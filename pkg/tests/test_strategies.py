"""Strategy registry: vocabulary, determinism, and coincidence properties."""

import math

import numpy as np
import pytest

from gemmask.model_store import GradientSnapshot, LayerTensor, snapshot_from_arrays
from gemmask.strategies import STRATEGIES, StrategyError, StrategySpec, make_mask


def pair(layers):
    """Build (weights, gradients) snapshots from {name: (w, g)} arrays."""
    w_layers, g_layers = [], []
    for name, (w, g) in layers.items():
        w = np.asarray(w, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        w_layers.append((name, (w.size,), w))
        g_layers.append(LayerTensor(name, (g.size,), g))
    w0 = snapshot_from_arrays(w_layers)
    g0 = GradientSnapshot(tuple(g_layers), tuple(True for _ in g_layers))
    return w0, g0


class TestStrategySpec:
    def test_unknown_name_rejected(self):
        with pytest.raises(StrategyError, match="unknown strategy"):
            StrategySpec("magnitude", 0.5)

    def test_hyphen_alias_normalized(self):
        assert StrategySpec("top-gradient", 0.5).name == "top_gradient"

    def test_random_requires_seed(self):
        with pytest.raises(StrategyError, match="seed"):
            StrategySpec("random", 0.5)

    def test_ratio_range(self):
        with pytest.raises(StrategyError):
            StrategySpec("gem", 0.0)
        with pytest.raises(StrategyError):
            StrategySpec("gem", 1.01)


class TestMakeMask:
    def test_selection_flip_on_two_parameter_example(self):
        w0, g0 = pair({"a": ([1.0, 0.2], [0.5, 0.3])})
        top = make_mask(StrategySpec("top_gradient", 0.5), w0, g0)
        gem = make_mask(StrategySpec("gem", 0.5), w0, g0)
        assert top.mask("a").indices.tolist() == [0]
        assert gem.mask("a").indices.tolist() == [1]

    def test_random_equal_seeds_identical_different_seeds_differ(self):
        rng = np.random.default_rng(0)
        w0, g0 = pair({"a": (rng.standard_normal(100), rng.standard_normal(100))})
        assert make_mask(StrategySpec("random", 0.1, seed=5), w0, g0) == make_mask(
            StrategySpec("random", 0.1, seed=5), w0, g0
        )
        differing = 0
        for s in range(20):
            a = make_mask(StrategySpec("random", 0.1, seed=s), w0, g0)
            b = make_mask(StrategySpec("random", 0.1, seed=s + 1000), w0, g0)
            differing += a.mask("a").indices.tolist() != b.mask("a").indices.tolist()
        assert differing == 20

    def test_gwr_uniform_vs_gem_budgets_differ_on_heterogeneous_layers(self):
        w0, g0 = pair({
            "concentrated": (np.ones(4), [4.0, 0.0, 0.0, 0.0]),
            "spread": (np.ones(4), [1.0, 1.0, 1.0, 1.0]),
        })
        uniform = make_mask(StrategySpec("gwr_uniform", 0.25), w0, g0)
        gem = make_mask(StrategySpec("gem", 0.25), w0, g0)
        assert uniform.budgets() == {"concentrated": 1, "spread": 1}
        assert gem.budgets() == {"concentrated": 0, "spread": 2}

    def test_all_strategies_select_floor_rn(self):
        rng = np.random.default_rng(1)
        w0, g0 = pair({
            "a": (rng.standard_normal(57), rng.standard_normal(57)),
            "b": (rng.standard_normal(31), rng.standard_normal(31)),
        })
        for name in STRATEGIES + ("top_gradient_global", "gwr_equal_count"):
            for ratio in (0.11, 0.5):
                ms = make_mask(StrategySpec(name, ratio, seed=3), w0, g0)
                assert ms.total_selected == math.floor(ratio * 88), name

    def test_gem_equals_norm_only_when_entropies_match(self):
        """Equal-size layers with uniform scores have identical entropies,
        so the entropy factor cancels out of the shares."""
        w0, g0 = pair({
            "a": (np.ones(16), np.full(16, 3.0)),
            "b": (np.ones(16), np.full(16, 1.0)),
            "c": (np.ones(16), np.full(16, 2.0)),
        })
        gem = make_mask(StrategySpec("gem", 0.25), w0, g0)
        norm_only = make_mask(StrategySpec("gwr_norm_only", 0.25), w0, g0)
        assert gem.budgets() == norm_only.budgets()
        for m_a, m_b in zip(gem.masks, norm_only.masks):
            assert m_a == m_b

    def test_gem_equals_entropy_only_when_norms_match(self):
        # |rho| = 2 for both layers; distributions (hence entropies) differ
        w0, g0 = pair({
            "peaked": (np.ones(4), [2.0, 0.0, 0.0, 0.0]),
            "flat": (np.ones(4), [1.0, 1.0, 1.0, 1.0]),
        })
        gem = make_mask(StrategySpec("gem", 0.5), w0, g0)
        entropy_only = make_mask(StrategySpec("gwr_entropy_only", 0.5), w0, g0)
        assert gem.budgets() == entropy_only.budgets()
        for m_a, m_b in zip(gem.masks, entropy_only.masks):
            assert m_a == m_b

    def test_global_top_gradient_concentrates_anywhere(self):
        w0, g0 = pair({
            "small_grads": (np.ones(10), np.full(10, 0.1)),
            "big_grads": (np.ones(10), np.full(10, 1.0)),
        })
        ms = make_mask(StrategySpec("top_gradient_global", 0.2), w0, g0)
        assert ms.budgets() == {"small_grads": 0, "big_grads": 4}

    def test_provenance_records_strategy_and_plan(self):
        w0, g0 = pair({"a": (np.ones(8), np.arange(8.0))})
        ms = make_mask(StrategySpec("gem", 0.25, eps=1e-10), w0, g0, gradient_source="unit test")
        assert ms.provenance["strategy"] == "gem"
        assert ms.provenance["eps"] == 1e-10
        assert ms.provenance["gradient_source"] == "unit test"
        assert ms.provenance["plan"]["total_budget"] == 2

    def test_pairing_checked_before_scoring(self):
        w0, _ = pair({"a": (np.ones(4), np.ones(4))})
        _, g_wrong = pair({"b": (np.ones(4), np.ones(4))})
        with pytest.raises(Exception, match="missing tunable layer"):
            make_mask(StrategySpec("gem", 0.5), w0, g_wrong)
