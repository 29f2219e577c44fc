"""Score semantics: GWR values, invariances, and the training diagnostics."""

import math

import numpy as np
import pytest

from gemmask.mask_engine import LayerMask, MaskSet, select_top_k
from gemmask.model_store import GradientSnapshot, LayerTensor, snapshot_from_arrays
from gemmask.scoring import (
    ScoreVector,
    ScoringError,
    captured_share,
    compute_gwr,
    loss_reduction_proxy,
    relative_weight_change,
    total_loss_reduction_proxy,
    total_relative_weight_change,
)


def layer(name, values):
    values = np.asarray(values, dtype=np.float64)
    return LayerTensor(name, (values.size,), values)


def mask(name, idx, size):
    return LayerMask(name, (size,), np.asarray(idx, dtype=np.uint64))


class TestComputeGwr:
    def test_basic_ratio(self):
        scores = compute_gwr(layer("a", [1.0, 0.2]), layer("a", [0.5, 0.3]))
        np.testing.assert_allclose(scores.scores, [0.5, 1.5], rtol=1e-15)
        # the selection flip: |g| ranks index 0 first, the ratio ranks index 1
        assert np.argmax(scores.scores) == 1

    def test_zero_weight_clamped_by_eps(self):
        scores = compute_gwr(layer("a", [0.0]), layer("a", [1.0]), eps=1e-12)
        np.testing.assert_array_equal(scores.scores, [1e12])

    def test_joint_scale_invariance_spec_example(self):
        base = compute_gwr(layer("a", [1.0, 0.2]), layer("a", [0.5, 0.3]))
        scaled = compute_gwr(layer("a", [7.0, 7 * 0.2]), layer("a", [7 * 0.5, 7 * 0.3]))
        np.testing.assert_allclose(scaled.scores, base.scores, rtol=1e-12)

    def test_joint_scale_invariance_exact_for_pow2(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            w = rng.standard_normal(16)
            g = rng.standard_normal(16)
            c = float(2.0 ** rng.integers(-8, 9))
            a = compute_gwr(layer("a", w), layer("a", g))
            b = compute_gwr(layer("a", c * w), layer("a", c * g))
            np.testing.assert_array_equal(a.scores, b.scores)

    def test_gradient_scale_equivariance(self):
        rng = np.random.default_rng(1)
        w = rng.standard_normal(16)
        g = rng.standard_normal(16)
        base = compute_gwr(layer("a", w), layer("a", g))
        np.testing.assert_array_equal(
            compute_gwr(layer("a", w), layer("a", 4.0 * g)).scores, 4.0 * base.scores
        )
        np.testing.assert_allclose(
            compute_gwr(layer("a", w), layer("a", 3.0 * g)).scores, 3.0 * base.scores, rtol=1e-12
        )

    def test_shape_mismatch_and_bad_eps(self):
        with pytest.raises(ScoringError):
            compute_gwr(layer("a", [1.0]), layer("a", [1.0, 2.0]))
        with pytest.raises(ScoringError):
            compute_gwr(layer("a", [1.0]), layer("a", [1.0]), eps=0.0)

    def test_score_vector_rejects_negative_and_nan(self):
        with pytest.raises(ScoringError):
            ScoreVector("a", [-1.0])
        with pytest.raises(ScoringError):
            ScoreVector("a", [np.nan])


class TestRelativeWeightChange:
    def test_single_element(self):
        out = relative_weight_change(layer("a", [2.0, 4.0]), layer("a", [2.2, 4.0]), mask("a", [0], 2))
        np.testing.assert_allclose(out, abs((2.2 - 2.0) / 2.0), rtol=1e-15)

    def test_identity_is_zero(self):
        w = layer("a", [1.0, 2.0])
        assert relative_weight_change(w, w, mask("a", [0, 1], 2)) == 0.0

    def test_two_element_hand_oracle(self):
        # scalar hand computation, independent of the vectorized path
        expected = math.sqrt(((1.1 - 1.0) / 1.0) ** 2 + ((0.6 - 0.5) / 0.5) ** 2)
        out = relative_weight_change(
            layer("a", [1.0, 0.5]), layer("a", [1.1, 0.6]), mask("a", [0, 1], 2)
        )
        np.testing.assert_allclose(out, expected, rtol=1e-15)
        np.testing.assert_allclose(out, 0.2236, rtol=1e-3)

    def test_index_out_of_range(self):
        with pytest.raises(ScoringError, match="out of range"):
            relative_weight_change(layer("a", [1.0]), layer("a", [1.0]), [3])

    def test_positive_whenever_selected_weights_moved(self):
        rng = np.random.default_rng(2)
        w0 = rng.standard_normal(10)
        wt = w0.copy()
        wt[4] += 0.25
        out = relative_weight_change(layer("a", w0), layer("a", wt), mask("a", [2, 4], 10))
        assert out > 0.0


class TestLossReductionProxy:
    def test_one_term(self):
        out = loss_reduction_proxy(
            layer("a", [0.5]), layer("a", [1.0]), layer("a", [0.9]), mask("a", [0], 1)
        )
        np.testing.assert_allclose(out, 0.05, rtol=1e-12)

    def test_zero_step(self):
        w = layer("a", [1.0, 2.0])
        assert loss_reduction_proxy(layer("a", [0.3, 0.4]), w, w, mask("a", [0, 1], 2)) == 0.0

    def test_exact_cancellation_witness(self):
        # g0 . dw = 1*0.1 + (-2)*0.05 = 0 exactly in float64: the proxy can
        # be zero even though the weights moved.
        g0 = layer("a", [1.0, -2.0])
        w0 = layer("a", [0.0, 0.0])
        wt = layer("a", [0.1, 0.05])
        assert loss_reduction_proxy(g0, w0, wt, mask("a", [0, 1], 2)) == 0.0
        assert relative_weight_change(w0, wt, mask("a", [0, 1], 2)) > 0.0


class TestCapturedShare:
    def test_direct_ratio(self):
        sv = ScoreVector("a", [3.0, 1.0, 1.0, 1.0])
        assert captured_share([sv], [mask("a", [0], 4)]) == 0.5

    def test_full_mask_is_one(self):
        sv = ScoreVector("a", [3.0, 1.0, 1.0, 1.0])
        assert captured_share([sv], [mask("a", [0, 1, 2, 3], 4)]) == 1.0

    def test_two_layer_brute_force(self):
        svs = [ScoreVector("a", [2.0, 2.0]), ScoreVector("b", [1.0, 3.0])]
        masks = [mask("a", [0], 2), mask("b", [1], 2)]
        # independent brute-force share
        num = math.fsum([2.0, 3.0])
        den = math.fsum([2.0, 2.0, 1.0, 3.0])
        out = captured_share(svs, masks)
        np.testing.assert_allclose(out, num / den, rtol=1e-15)
        assert out == 0.625

    def test_zero_total_mass_returns_zero(self):
        sv = ScoreVector("a", [0.0, 0.0])
        assert captured_share([sv], [mask("a", [0], 2)]) == 0.0

    def test_unknown_mask_layer_rejected(self):
        sv = ScoreVector("a", [1.0])
        with pytest.raises(ScoringError, match="no score vector"):
            captured_share([sv], [mask("zz", [0], 1)])

    def test_top_k_mask_maximizes_share(self):
        """Among all masks with the same per-layer counts, the top-k-by-score
        mask captures the largest share (100 random competitors)."""
        rng = np.random.default_rng(7)
        svs = [ScoreVector("a", rng.random(30)), ScoreVector("b", rng.random(20))]
        counts = {"a": 6, "b": 3}
        top = [select_top_k(sv, counts[sv.layer_name]) for sv in svs]
        best = captured_share(svs, top)
        for _ in range(100):
            rand_masks = [
                mask(sv.layer_name, np.sort(rng.choice(len(sv), counts[sv.layer_name], replace=False)), len(sv))
                for sv in svs
            ]
            assert captured_share(svs, rand_masks) <= best + 1e-15


class TestSnapshotTotals:
    def make_setup(self):
        w0 = snapshot_from_arrays([("a", (3,), [1.0, 0.5, 2.0]), ("b", (2,), [1.0, 1.0])])
        wt = snapshot_from_arrays([("a", (3,), [1.1, 0.6, 2.0]), ("b", (2,), [1.0, 0.8])])
        g0 = GradientSnapshot(
            (LayerTensor("a", (3,), [2.0, -0.4, 0.1]), LayerTensor("b", (2,), [0.5, 0.5])),
            (True, True),
        )
        masks = MaskSet(
            (mask("a", [0, 1], 3), mask("b", [1], 2)),
            {"ratio": 0.5, "strategy": "test", "eps": 1e-12, "seed": None,
             "gradient_source": "test", "plan": None},
        )
        return w0, wt, g0, masks

    def test_total_rel_change_combines_layers(self):
        w0, wt, g0, masks = self.make_setup()
        per_a = relative_weight_change(w0.layer("a"), wt.layer("a"), masks.mask("a"))
        per_b = relative_weight_change(w0.layer("b"), wt.layer("b"), masks.mask("b"))
        expected = math.sqrt(per_a**2 + per_b**2)
        np.testing.assert_allclose(total_relative_weight_change(w0, wt, masks), expected, rtol=1e-12)

    def test_total_proxy_takes_abs_after_cross_layer_sum(self):
        w0, wt, g0, masks = self.make_setup()
        signed_a = 2.0 * (1.1 - 1.0) + (-0.4) * (0.6 - 0.5)
        signed_b = 0.5 * (0.8 - 1.0)
        expected = abs(signed_a + signed_b)
        np.testing.assert_allclose(total_loss_reduction_proxy(g0, w0, wt, masks), expected, rtol=1e-12)
        # per-layer abs values would NOT sum to the same thing here
        assert abs(signed_a) + abs(signed_b) != pytest.approx(expected)
