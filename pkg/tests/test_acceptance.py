"""Acceptance suite: one test per release criterion, each printing a
PASS line with its runtime against the stated budget."""

import itertools
import math
import time
from contextlib import contextmanager
from pathlib import Path

import mpmath as mp
import numpy as np

from gemmask.allocation import allocate_budget, layer_entropy, normalize_scores
from gemmask.harness import default_config, run_experiment
from gemmask.mask_engine import (
    AdamWHyper,
    AdamWState,
    MaskSet,
    apply_masked_adamw,
    apply_masked_sgd,
    build_masks,
    load_masks,
    select_top_k,
    serialize_masks,
)
from gemmask.model_store import GradientSnapshot, LayerTensor, snapshot_from_arrays
from gemmask.scoring import ScoreVector, captured_share, compute_gwr, score_snapshot
from gemmask.strategies import StrategySpec, make_mask
from gemmask.toy_models import (
    OptimizerConfig,
    SyntheticTask,
    ToyModel,
    ToyModelSpec,
    TrainConfig,
    make_dataset,
    train_masked,
)

GOLDEN_DIR = Path(__file__).parent / "golden"


@contextmanager
def budget(name, seconds):
    start = time.perf_counter()
    yield
    elapsed = time.perf_counter() - start
    assert elapsed < seconds, f"{name} took {elapsed:.2f}s (budget {seconds}s)"
    print(f"\nACCEPTANCE {name}: PASS ({elapsed:.2f}s < {seconds}s)")


def layer(name, values):
    values = np.asarray(values, dtype=np.float64)
    return LayerTensor(name, (values.size,), values)


def test_gwr_unit_suite():
    """Score examples plus joint-scale invariance and gradient-scale
    equivariance (bitwise for power-of-two factors, <= 1e-12 otherwise)."""
    with budget("gwr-unit-suite", 1.0):
        np.testing.assert_allclose(
            compute_gwr(layer("a", [1.0, 0.2]), layer("a", [0.5, 0.3])).scores,
            [0.5, 1.5], rtol=1e-15,
        )
        np.testing.assert_array_equal(
            compute_gwr(layer("a", [0.0]), layer("a", [1.0]), eps=1e-12).scores, [1e12]
        )
        rng = np.random.default_rng(2024)
        for _ in range(200):
            n = int(rng.integers(1, 64))
            w = rng.standard_normal(n) * 10.0 ** int(rng.integers(-3, 3))
            g = rng.standard_normal(n) * 10.0 ** int(rng.integers(-3, 3))
            base = compute_gwr(layer("a", w), layer("a", g)).scores
            c2 = float(2.0 ** rng.integers(-8, 9))
            np.testing.assert_array_equal(
                compute_gwr(layer("a", c2 * w), layer("a", c2 * g)).scores, base
            )
            np.testing.assert_array_equal(
                compute_gwr(layer("a", w), layer("a", c2 * g)).scores, c2 * base
            )
            c = float(rng.uniform(0.1, 10.0))
            np.testing.assert_allclose(
                compute_gwr(layer("a", c * w), layer("a", c * g)).scores, base, rtol=1e-12
            )
            np.testing.assert_allclose(
                compute_gwr(layer("a", w), layer("a", c * g)).scores, c * base, rtol=1e-12
            )


def test_entropy_and_allocation_oracles():
    """Entropy vs a 50-digit summation oracle; budget conservation and cap
    respect over 1000 random instances; log-base share/budget invariance."""
    with budget("entropy-allocation-oracles", 10.0):
        rng = np.random.default_rng(777)
        with mp.workdps(30):
            for _ in range(100):
                n = int(rng.integers(1, 12000))
                raw = rng.random(n) ** int(rng.integers(1, 6))
                probs, _ = normalize_scores(raw)
                oracle = float(-mp.fsum(mp.mpf(p) * mp.log(mp.mpf(p)) for p in probs if p > 0))
                got = layer_entropy(probs)
                assert abs(got - oracle) <= 1e-10 * max(abs(oracle), 1e-300)

        for _ in range(1000):
            n_layers = int(rng.integers(1, 10))
            sizes = [int(rng.integers(1, 80)) for _ in range(n_layers)]
            alphas = np.abs(rng.standard_normal(n_layers)) * (rng.random(n_layers) > 0.15)
            ratio = float(rng.uniform(1e-3, 1.0))
            plan = allocate_budget(alphas, sizes, ratio, sum(sizes))
            budgets = [r.budget for r in plan.layers]
            assert sum(budgets) == math.floor(ratio * sum(sizes))
            assert all(0 <= b <= s for b, s in zip(budgets, sizes))

        # power-of-two rescaling of every importance: bitwise-identical
        # shares and budgets; ln vs log2 pipelines: identical budgets,
        # shares within 1e-12
        for _ in range(200):
            n_layers = int(rng.integers(2, 9))
            sizes = [int(rng.integers(4, 300)) for _ in range(n_layers)]
            norms = rng.random(n_layers) + 0.05
            entropies = rng.random(n_layers) + 0.02
            ratio = float(rng.uniform(0.005, 0.9))
            nat = allocate_budget(norms * entropies, sizes, ratio, sum(sizes))
            pow2 = allocate_budget(norms * (entropies * 4.0), sizes, ratio, sum(sizes))
            assert [r.share for r in nat.layers] == [r.share for r in pow2.layers]
            assert [r.budget for r in nat.layers] == [r.budget for r in pow2.layers]
            log2 = allocate_budget(norms * (entropies / math.log(2)), sizes, ratio, sum(sizes))
            assert [r.budget for r in nat.layers] == [r.budget for r in log2.layers]
            np.testing.assert_allclose(
                [r.share for r in nat.layers], [r.share for r in log2.layers], rtol=1e-12
            )


def test_top_k_matches_exhaustive_maximizer():
    """500 random vectors of length <= 20: the selection achieves the
    maximal subset sum over every k-subset (exhaustive enumeration)."""
    with budget("top-k-oracle", 30.0):
        rng = np.random.default_rng(555)
        for trial in range(500):
            n = int(rng.integers(1, 21))
            k = int(rng.integers(0, n + 1))
            if trial % 2 == 0:
                scores = rng.random(n)
            else:
                scores = rng.integers(0, 5, size=n).astype(float)
            sel = select_top_k(ScoreVector("a", scores), k).indices.astype(int)
            assert sel.size == k
            if k == 0:
                continue
            combos = np.fromiter(
                itertools.chain.from_iterable(itertools.combinations(range(n), k)),
                dtype=np.int64,
            ).reshape(-1, k)
            sums = scores[combos].sum(axis=1)
            best = sums.max()
            achieved = scores[sel].sum()
            if trial % 2 == 1:
                # small integers sum exactly in float64
                assert achieved == best
            else:
                assert achieved >= best - 1e-12 * max(1.0, abs(best))
                if np.unique(scores).size == n:
                    best_set = set(combos[int(sums.argmax())].tolist())
                    assert set(sel.tolist()) == best_set


def test_frozen_parameters_bit_exact_over_1000_steps():
    """1000 masked SGD and AdamW steps on random toy models leave every
    unmasked parameter bit-identical to its initial value."""
    with budget("frozen-bit-exactness", 30.0):
        for opt_kind, seed in (("sgd", 3), ("adamw", 4)):
            spec = ToyModelSpec("mlp", (6, 14, 2), activation="tanh", seed=seed)
            model = ToyModel(spec)
            snap = model.init_snapshot()
            task = SyntheticTask("two_gaussians_classification", n_train=64, n_eval=16,
                                 noise=0.5, seed=seed, shift=0.8)
            ds = make_dataset(task, model)
            _, g0 = model.loss_and_grads(snap, ds.x_train, ds.y_train)
            masks = make_mask(StrategySpec("gem", 0.05), snap, g0)
            cfg = TrainConfig(OptimizerConfig(kind=opt_kind, lr=0.01), batch_size=16,
                              shuffle_seed=seed)
            # 64/16 = 4 optimizer steps per epoch; 250 epochs = 1000 steps
            out = train_masked(model, snap, task, masks, cfg, 250, grads0=g0, dataset=ds)
            selected = {m.layer_name: set(m.indices.tolist()) for m in masks.masks}
            for l in snap.layers:
                frozen = [i for i in range(l.size) if i not in selected.get(l.name, set())]
                assert (
                    out.snapshot.layer(l.name).values[frozen].tobytes()
                    == l.values[frozen].tobytes()
                ), (opt_kind, l.name)

        # direct kernel-level check on a random single layer
        rng = np.random.default_rng(99)
        w = layer("z", rng.standard_normal(128))
        mask = select_top_k(ScoreVector("z", rng.random(128)), 9)
        state = AdamWState.zeros(128)
        hyper = AdamWHyper(lr=0.05, weight_decay=0.02)
        w_sgd = w
        w_adamw = w
        frozen = np.setdiff1d(np.arange(128), mask.indices.astype(int))
        before = w.values[frozen].tobytes()
        for _ in range(1000):
            g = layer("z", rng.standard_normal(128))
            w_sgd = apply_masked_sgd(w_sgd, g, mask, lr=0.05)
            w_adamw, state = apply_masked_adamw(state, w_adamw, g, mask, hyper)
        assert w_sgd.values[frozen].tobytes() == before
        assert w_adamw.values[frozen].tobytes() == before


def test_gradient_checks_ten_seeds():
    """Analytic gradients vs central finite differences (h=1e-5), every
    layer, relative error <= 1e-4, across 10 seeded models."""
    with budget("gradient-checks", 60.0):
        h = 1e-5
        for seed in range(10):
            if seed < 5:
                spec = ToyModelSpec("mlp", (4, 7, 3), activation="tanh",
                                    loss="cross_entropy" if seed % 2 == 0 else "mse", seed=seed)
            else:
                spec = ToyModelSpec("attn1", (5, 2), activation="tanh",
                                    loss="cross_entropy" if seed % 2 == 0 else "mse",
                                    n_tokens=3, seed=seed)
            model = ToyModel(spec)
            snap = model.init_snapshot()
            rng = np.random.default_rng(1000 + seed)
            x = rng.standard_normal((8,) + model.input_shape)
            if spec.loss == "cross_entropy":
                y = rng.integers(0, model.n_outputs, 8)
            else:
                y = rng.standard_normal((8, model.n_outputs))
            _, grads = model.loss_and_grads(snap, x, y)
            for l in snap.layers:
                analytic = grads.layer(l.name).values
                for i in range(l.size):
                    plus = l.values.copy()
                    plus[i] += h
                    minus = l.values.copy()
                    minus[i] -= h
                    fd = (
                        model.loss(snap.replace_values({l.name: plus}), x, y)
                        - model.loss(snap.replace_values({l.name: minus}), x, y)
                    ) / (2 * h)
                    err = abs(analytic[i] - fd) / max(1e-8, abs(analytic[i]) + abs(fd))
                    assert err <= 1e-4, (spec.kind, l.name, i, err)


def test_fig2_desk_scale_ordering(tmp_path):
    """Three seeds, r=0.01, 10 epochs on the shifted two-Gaussians task:
    both scale-aware strategies beat random and top-gradient masking on
    the seed-mean relative weight change and loss-reduction proxy."""
    with budget("fig2-desk-scale", 300.0):
        cfg = default_config(str(tmp_path / "fig2"))
        assert cfg.seeds == (1, 2, 3) and cfg.ratios == (0.01,) and cfg.epochs == 10
        report = run_experiment(cfg)
        by = {row.strategy: row for row in report.aggregates}
        gwr_based = ("gem", "gwr_uniform")
        baselines = ("random", "top_gradient")
        for metric in ("rel_change_mean", "loss_red_proxy_mean"):
            worst_gwr = min(getattr(by[s], metric) for s in gwr_based)
            best_baseline = max(getattr(by[s], metric) for s in baselines)
            assert worst_gwr > best_baseline, (
                f"{metric}: min(gwr)={worst_gwr:.6g} vs max(baseline)={best_baseline:.6g}"
            )


def test_captured_share_ordering_on_constructed_instance():
    """One near-delta layer plus one near-uniform layer at a fixed budget:
    captured shares order entropy-aware >= norm-only >= uniform, each share
    verified against an independent brute-force computation."""
    with budget("captured-share-table", 10.0):
        n = 1000
        w_delta = np.ones(n)
        g_delta = np.full(n, 0.001)
        g_delta[0] = 20.0
        w_flat = np.ones(n)
        g_flat = np.full(n, 1.0)
        w0 = snapshot_from_arrays([("delta", (n,), w_delta), ("flat", (n,), w_flat)])
        g0 = GradientSnapshot(
            (LayerTensor("delta", (n,), g_delta), LayerTensor("flat", (n,), g_flat)),
            (True, True),
        )
        scores = score_snapshot(w0, g0)

        def brute_force_share(mask_set):
            total = math.fsum(
                s for sv in scores for s in sv.scores.tolist()
            )
            picked = math.fsum(
                sv.scores[i]
                for sv in scores
                for m in mask_set.masks
                if m.layer_name == sv.layer_name
                for i in m.indices.astype(int).tolist()
            )
            return picked / total

        shares = {}
        for strategy in ("gem", "gwr_norm_only", "gwr_uniform"):
            ms = make_mask(StrategySpec(strategy, 0.01), w0, g0)
            engine = captured_share(scores, ms)
            brute = brute_force_share(ms)
            np.testing.assert_allclose(engine, brute, rtol=1e-12)
            shares[strategy] = engine
        assert shares["gem"] >= shares["gwr_norm_only"] >= shares["gwr_uniform"]
        assert shares["gem"] > shares["gwr_uniform"]


def test_harness_determinism_bytewise(tmp_path):
    """Two runs of the identical config produce bytewise-identical reports
    and mask files."""
    with budget("harness-determinism", 300.0):
        config = default_config(str(tmp_path / "run"))

        def fingerprint():
            return {
                str(p.relative_to(tmp_path / "run")): p.read_bytes()
                for p in sorted((tmp_path / "run").rglob("*"))
                if p.is_file()
            }

        run_experiment(config)
        first = fingerprint()
        run_experiment(config)
        second = fingerprint()
        assert sorted(first) == sorted(second)
        for name in first:
            assert first[name] == second[name], name
        assert any(name.endswith(".gemm") for name in first)


def test_mask_format_golden_files():
    """Serialized masks round-trip exactly and match the committed bytes."""
    with budget("mask-golden-files", 1.0):
        w0 = snapshot_from_arrays(
            [("concentrated", (4,), np.ones(4)), ("spread", (2, 2), np.ones(4))]
        )
        g0 = GradientSnapshot(
            (
                LayerTensor("concentrated", (4,), [4.0, 0.0, 0.0, 0.0]),
                LayerTensor("spread", (2, 2), [1.0, 1.0, 1.0, 1.0]),
            ),
            (True, True),
        )
        ms = build_masks(w0, g0, 0.25, "gem")
        blob = serialize_masks(ms)
        assert blob == (GOLDEN_DIR / "two_layer_gem.gemm").read_bytes()
        assert load_masks(GOLDEN_DIR / "two_layer_gem.gemm") == ms
        empty = MaskSet((), {"ratio": 0.001, "strategy": "gem", "eps": 1e-12,
                             "seed": None, "gradient_source": "none", "plan": None})
        assert serialize_masks(empty) == (GOLDEN_DIR / "empty.gemm").read_bytes()
