"""Registry of masking strategies behind one interface.

Canonical names:

- ``gem``               GWR scores, entropy-guided allocation, top-k
- ``random``            uniform sampling, size-proportional layer counts
- ``top_gradient``      |gradient| scores, size-proportional layer counts
- ``gwr_uniform``       GWR scores, size-proportional layer counts
- ``gwr_norm_only``     GWR scores, norm-only layer allocation
- ``gwr_entropy_only``  GWR scores, entropy-only layer allocation

Extra modes: ``top_gradient_global`` (single global top-k over all
layers) and ``gwr_equal_count`` (exactly equal per-layer counts).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import allocation, model_store, scoring
from .mask_engine import LayerMask, MaskError, MaskSet, select_top_k
from .model_store import GradientSnapshot, ModelSnapshot
from .scoring import DEFAULT_EPS, ScoreVector

STRATEGIES = (
    "gem",
    "random",
    "top_gradient",
    "gwr_uniform",
    "gwr_norm_only",
    "gwr_entropy_only",
)
EXTRA_STRATEGIES = ("top_gradient_global", "gwr_equal_count")

_ALLOCATOR_FOR = {
    "gem": "gem",
    "random": "uniform",
    "top_gradient": "uniform",
    "gwr_uniform": "uniform",
    "gwr_norm_only": "norm_only",
    "gwr_entropy_only": "entropy_only",
    "gwr_equal_count": "equal_count",
}


class StrategyError(ValueError):
    """Unknown strategy name or invalid strategy parameters."""


@dataclass(frozen=True)
class StrategySpec:
    """A named masking strategy with its tuning ratio and parameters."""

    name: str
    ratio: float
    eps: float = DEFAULT_EPS
    seed: int | None = None

    def __post_init__(self) -> None:
        name = self.name.replace("-", "_")
        if name not in STRATEGIES + EXTRA_STRATEGIES:
            raise StrategyError(
                f"unknown strategy {self.name!r} (expected one of {STRATEGIES + EXTRA_STRATEGIES})"
            )
        if not (0.0 < self.ratio <= 1.0):
            raise StrategyError(f"ratio must be in (0, 1], got {self.ratio}")
        if self.eps <= 0.0:
            raise StrategyError(f"eps must be positive, got {self.eps}")
        if name == "random" and self.seed is None:
            raise StrategyError("the random strategy requires a seed")
        object.__setattr__(self, "name", name)


def _gwr_scores(w0: ModelSnapshot, g0: GradientSnapshot, eps: float) -> list[ScoreVector]:
    return scoring.score_snapshot(w0, g0, eps)


def _abs_grad_scores(w0: ModelSnapshot, g0: GradientSnapshot) -> list[ScoreVector]:
    return [
        ScoreVector(l.name, np.abs(g0.layer(l.name).values)) for l in w0.tunable_layers()
    ]


def _random_masks(
    layers, budgets: dict[str, int], seed: int
) -> tuple[LayerMask, ...]:
    rng = np.random.default_rng(seed)
    masks = []
    for layer in layers:
        k = budgets[layer.name]
        idx = np.sort(rng.choice(layer.size, size=k, replace=False)).astype(np.uint64)
        masks.append(LayerMask(layer.name, layer.shape, idx))
    return tuple(masks)


def _global_top_k(layers, score_vectors, budget: int) -> tuple[LayerMask, ...]:
    """Single top-k over the concatenation of all layers' scores.

    Ties break toward the earlier layer, then the lower flat index.
    """
    all_scores = np.concatenate([sv.scores for sv in score_vectors]) if score_vectors else np.zeros(0)
    order = np.argsort(-all_scores, kind="stable")
    chosen = np.sort(order[:budget])
    masks = []
    offset = 0
    for layer, sv in zip(layers, score_vectors):
        in_layer = chosen[(chosen >= offset) & (chosen < offset + len(sv))] - offset
        masks.append(LayerMask(layer.name, layer.shape, in_layer.astype(np.uint64)))
        offset += len(sv)
    return tuple(masks)


def make_mask(
    spec: StrategySpec,
    w0: ModelSnapshot,
    g0: GradientSnapshot,
    *,
    gradient_source: str = "caller-supplied",
) -> MaskSet:
    """Build the MaskSet a strategy selects from paired weights/gradients.

    Every strategy selects exactly ``floor(ratio * N)`` indices over the
    tunable layers, and is fully deterministic given its inputs.
    """
    model_store.check_pairing(w0, g0)
    layers = w0.tunable_layers()
    n_total = w0.total_params
    if not layers or n_total == 0:
        raise MaskError("no tunable layers to mask with ratio > 0")
    sizes = [l.size for l in layers]
    names = [l.name for l in layers]

    if spec.name == "random":
        score_vectors = None
    elif spec.name in ("top_gradient", "top_gradient_global"):
        score_vectors = _abs_grad_scores(w0, g0)
    else:
        score_vectors = _gwr_scores(w0, g0, spec.eps)

    if spec.name == "top_gradient_global":
        budget = math.floor(spec.ratio * n_total)
        masks = _global_top_k(layers, score_vectors, budget)
        shares = [m.count / budget if budget else 0.0 for m in masks]
        plan = allocation.AllocationPlan(
            ratio=spec.ratio,
            total_params=n_total,
            total_budget=budget,
            allocator="global_top_k",
            degenerate_fallback=False,
            layers=tuple(
                allocation.LayerAllocation(
                    layer_name=names[i],
                    param_count=sizes[i],
                    norm=None,
                    entropy=None,
                    importance=None,
                    share=shares[i],
                    budget=masks[i].count,
                )
                for i in range(len(layers))
            ),
        )
    else:
        plan = allocation.build_allocation(
            score_vectors,
            sizes,
            spec.ratio,
            _ALLOCATOR_FOR[spec.name],
            layer_names=names,
        )
        budgets = plan.budgets()
        if spec.name == "random":
            masks = _random_masks(layers, budgets, spec.seed)
        else:
            masks = tuple(
                select_top_k(sv, budgets[sv.layer_name], shape=layer.shape)
                for layer, sv in zip(layers, score_vectors)
            )

    provenance = {
        "ratio": spec.ratio,
        "strategy": spec.name,
        "eps": spec.eps,
        "seed": spec.seed,
        "gradient_source": gradient_source,
        "plan": plan.to_json_dict(),
    }
    return MaskSet(masks, provenance)
