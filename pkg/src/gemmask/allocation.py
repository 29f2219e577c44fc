"""Entropy-guided per-layer budget allocation and its ablation variants.

Each layer's scores are normalized into a probability distribution whose
entropy measures how spread out the learning signal is; the layer's
importance is ``alpha = ||rho||_2 * H(p)``. Importances are normalized
into shares ``gamma`` and the integer budget ``B = floor(r * N)`` is
apportioned by the largest-remainder method, with per-layer capacity
caps respected by iterative reallocation.

Allocators:

- ``gem``          alpha = norm * entropy
- ``norm_only``    alpha = norm
- ``entropy_only`` alpha = entropy
- ``uniform``      size-proportional (equal counts when sizes are equal)
- ``equal_count``  exactly equal counts per layer
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .scoring import ScoreVector

ALLOCATORS = ("gem", "norm_only", "entropy_only", "uniform", "equal_count")

_PROB_SUM_TOL = 1e-8


class AllocationError(ValueError):
    """Invalid inputs to a budget-allocation operation."""


class NormalizedScores(NamedTuple):
    probs: np.ndarray
    degenerate: bool


class LayerImportance(NamedTuple):
    norm: float
    entropy: float
    importance: float
    degenerate: bool


def normalize_scores(scores) -> NormalizedScores:
    """Normalize nonnegative scores into a probability distribution.

    An all-zero layer yields the uniform distribution with the degenerate
    flag set, so downstream entropy is well defined.
    """
    arr = scores.scores if isinstance(scores, ScoreVector) else np.asarray(scores, dtype=np.float64)
    if arr.size == 0:
        raise AllocationError("cannot normalize an empty score vector")
    if arr.min() < 0.0:
        raise AllocationError("negative score")
    total = float(np.sum(arr))
    if total == 0.0:
        return NormalizedScores(np.full(arr.size, 1.0 / arr.size), True)
    return NormalizedScores(arr / total, False)


def layer_entropy(p) -> float:
    """Shannon entropy ``-sum p*ln(p)`` with the convention 0*ln(0) = 0.

    Summation is sequential and compensated (exact fsum) so huge layers
    with millions of tiny terms stay accurate; the result is clamped to
    the mathematically valid range [0, ln(len(p))].
    """
    arr = np.asarray(p, dtype=np.float64)
    if arr.size == 0:
        raise AllocationError("empty distribution")
    if not np.isfinite(arr).all() or arr.min() < 0.0:
        raise AllocationError("invalid distribution: entries must be finite and >= 0")
    total = float(np.sum(arr))
    if abs(total - 1.0) > _PROB_SUM_TOL:
        raise AllocationError(f"invalid distribution: sums to {total!r}, not 1")
    pos = arr[arr > 0.0]
    h = -math.fsum(pos * np.log(pos))
    return min(max(h, 0.0), math.log(arr.size))


def layer_importance(scores) -> LayerImportance:
    """Norm, entropy, and combined importance ``norm * entropy`` of a layer.

    A fully concentrated layer has zero entropy and therefore zero
    importance; an all-zero layer has zero norm and is flagged degenerate.
    """
    arr = scores.scores if isinstance(scores, ScoreVector) else np.asarray(scores, dtype=np.float64)
    if arr.size and arr.min() < 0.0:
        raise AllocationError("negative score")
    norm = math.sqrt(float(np.sum(arr * arr)))
    probs, degenerate = normalize_scores(arr)
    entropy = layer_entropy(probs)
    return LayerImportance(norm, entropy, norm * entropy, degenerate)


@dataclass(frozen=True)
class LayerAllocation:
    """One layer's row in an allocation plan."""

    layer_name: str
    param_count: int
    norm: float | None
    entropy: float | None
    importance: float | None
    share: float
    budget: int
    degenerate: bool = False


@dataclass(frozen=True)
class AllocationPlan:
    """Per-layer budgets plus the global quantities that produced them."""

    ratio: float
    total_params: int
    total_budget: int
    allocator: str
    degenerate_fallback: bool
    layers: tuple[LayerAllocation, ...]

    def budgets(self) -> dict[str, int]:
        return {row.layer_name: row.budget for row in self.layers}

    def to_json_dict(self) -> dict:
        return {
            "ratio": self.ratio,
            "total_params": self.total_params,
            "total_budget": self.total_budget,
            "allocator": self.allocator,
            "degenerate_fallback": self.degenerate_fallback,
            "layers": [
                {
                    "name": row.layer_name,
                    "param_count": row.param_count,
                    "norm": row.norm,
                    "entropy": row.entropy,
                    "importance": row.importance,
                    "share": row.share,
                    "budget": row.budget,
                    "degenerate": row.degenerate,
                }
                for row in self.layers
            ],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "AllocationPlan":
        return cls(
            ratio=float(d["ratio"]),
            total_params=int(d["total_params"]),
            total_budget=int(d["total_budget"]),
            allocator=str(d["allocator"]),
            degenerate_fallback=bool(d["degenerate_fallback"]),
            layers=tuple(
                LayerAllocation(
                    layer_name=str(row["name"]),
                    param_count=int(row["param_count"]),
                    norm=None if row["norm"] is None else float(row["norm"]),
                    entropy=None if row["entropy"] is None else float(row["entropy"]),
                    importance=None if row["importance"] is None else float(row["importance"]),
                    share=float(row["share"]),
                    budget=int(row["budget"]),
                    degenerate=bool(row.get("degenerate", False)),
                )
                for row in d["layers"]
            ),
        )

    def save(self, path: str | Path) -> None:
        # json's repr-based float formatting is shortest-round-trip exact.
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "AllocationPlan":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


def _largest_remainder(targets: Sequence[float], original_idx: Sequence[int], budget: int) -> list[int]:
    """Floors plus one unit to the largest fractional parts.

    Ties break toward the lower original layer index. ``targets`` must
    sum to at least ``budget - 1`` (within rounding), which every caller
    guarantees.
    """
    base = [math.floor(t) for t in targets]
    residual = budget - sum(base)
    if residual < 0 or residual > len(base):
        raise AllocationError(
            f"internal apportionment error: residual {residual} for {len(base)} layers"
        )
    order = sorted(range(len(base)), key=lambda i: (-(targets[i] - base[i]), original_idx[i]))
    for i in order[:residual]:
        base[i] += 1
    return base


def _apportion(
    weights: np.ndarray,
    sizes: Sequence[int],
    budget: int,
    first_targets: np.ndarray,
) -> tuple[list[int], bool]:
    """Largest-remainder apportionment with per-layer caps.

    Layers that exceed their capacity are clamped and the freed budget is
    re-apportioned over the remaining layers (proportional to their
    weights), iterating until stable. Returns the per-layer counts and a
    flag set when budget had to be spread size-proportionally because all
    remaining weights were zero.
    """
    n = len(sizes)
    counts = [0] * n
    active = list(range(n))
    remaining = budget
    targets = np.asarray(first_targets, dtype=np.float64)
    zero_weight_spill = False
    while remaining > 0 and active:
        sub = _largest_remainder([targets[i] for i in active], active, remaining)
        over = [j for j, i in enumerate(active) if sub[j] > sizes[i]]
        if not over:
            for j, i in enumerate(active):
                counts[i] = sub[j]
            return counts, zero_weight_spill
        for j in over:
            i = active[j]
            counts[i] = sizes[i]
            remaining -= sizes[i]
        active = [i for j, i in enumerate(active) if j not in set(over)]
        if not active:
            break
        w = weights[active]
        with np.errstate(over="ignore"):
            wsum = float(np.sum(w))
        if not math.isfinite(wsum):
            w = w / np.max(w)
            wsum = float(np.sum(w))
        if wsum > 0.0:
            targets_active = remaining * w / wsum
        else:
            # No importance mass left but budget remains: spread by size.
            zero_weight_spill = True
            s = np.array([sizes[i] for i in active], dtype=np.float64)
            targets_active = remaining * s / float(np.sum(s))
        targets = np.zeros(n)
        for val, i in zip(targets_active, active):
            targets[i] = val
    if remaining > 0 and not active:
        raise AllocationError(f"budget {budget} exceeds total capacity {sum(sizes)}")
    return counts, zero_weight_spill


def allocate_budget(
    importances: Sequence[float],
    layer_sizes: Sequence[int],
    ratio: float,
    total_params: int,
    *,
    layer_names: Sequence[str] | None = None,
    norms: Sequence[float] | None = None,
    entropies: Sequence[float] | None = None,
    degenerate_flags: Sequence[bool] | None = None,
    allocator: str = "gem",
) -> AllocationPlan:
    """Turn per-layer importances into integer budgets summing to floor(r*N).

    Shares are ``gamma = alpha / sum(alpha)``; raw budgets are
    ``floor(r*N*gamma)`` and the stranded residual is redistributed by
    largest remainder (ties to the lower layer index), clamping to layer
    sizes with iterative reallocation. If every importance is zero while
    the budget is positive, allocation falls back to size-proportional
    with the plan flagged degenerate.
    """
    if allocator not in ALLOCATORS:
        raise AllocationError(f"unknown allocator {allocator!r} (expected one of {ALLOCATORS})")
    if not (0.0 < ratio <= 1.0):
        raise AllocationError(f"ratio must be in (0, 1], got {ratio}")
    sizes = [int(s) for s in layer_sizes]
    if any(s < 1 for s in sizes):
        raise AllocationError("layer sizes must be positive")
    alphas = np.asarray(importances, dtype=np.float64)
    if alphas.size != len(sizes):
        raise AllocationError(f"{alphas.size} importances for {len(sizes)} layers")
    if not np.isfinite(alphas).all():
        raise AllocationError("importances must be finite")
    if alphas.size and alphas.min() < 0.0:
        raise AllocationError("importances must be nonnegative")
    n_total = int(total_params)
    if n_total != sum(sizes):
        raise AllocationError(f"total_params {n_total} != sum of layer sizes {sum(sizes)}")
    budget = math.floor(ratio * n_total)
    if budget > n_total:
        raise AllocationError(f"budget {budget} exceeds total parameter count {n_total}")
    names = list(layer_names) if layer_names is not None else [f"layer{i}" for i in range(len(sizes))]

    n_layers = len(sizes)
    size_arr = np.asarray(sizes, dtype=np.float64)
    degenerate_fallback = False
    if allocator == "uniform":
        shares = size_arr / n_total
        weights = size_arr
        first_targets = budget * shares
    elif allocator == "equal_count":
        shares = np.full(n_layers, 1.0 / n_layers)
        weights = np.ones(n_layers)
        first_targets = np.full(n_layers, budget / n_layers)
    else:
        with np.errstate(over="ignore"):  # overflow detected and handled below
            alpha_sum = float(np.sum(alphas))
        if not math.isfinite(alpha_sum):
            # finite importances whose sum overflows: rescaling by the max
            # preserves the proportions (shares are scale-invariant)
            alphas = alphas / np.max(alphas)
            alpha_sum = float(np.sum(alphas))
        if alpha_sum > 0.0:
            shares = alphas / alpha_sum
            weights = alphas
            first_targets = (ratio * n_total) * shares
        else:
            degenerate_fallback = budget > 0
            shares = size_arr / n_total
            weights = size_arr
            first_targets = budget * shares

    counts, spill = _apportion(weights, sizes, budget, first_targets)
    degenerate_fallback = degenerate_fallback or spill

    flags = list(degenerate_flags) if degenerate_flags is not None else [False] * n_layers
    rows = tuple(
        LayerAllocation(
            layer_name=names[i],
            param_count=sizes[i],
            norm=None if norms is None else float(norms[i]),
            entropy=None if entropies is None else float(entropies[i]),
            importance=float(alphas[i]) if allocator not in ("uniform", "equal_count") else None,
            share=float(shares[i]),
            budget=counts[i],
            degenerate=bool(flags[i]),
        )
        for i in range(n_layers)
    )
    return AllocationPlan(
        ratio=float(ratio),
        total_params=n_total,
        total_budget=budget,
        allocator=allocator,
        degenerate_fallback=degenerate_fallback,
        layers=rows,
    )


def build_allocation(
    score_vectors: Sequence[ScoreVector] | None,
    layer_sizes: Sequence[int] | None,
    ratio: float,
    allocator: str = "gem",
    *,
    layer_names: Sequence[str] | None = None,
) -> AllocationPlan:
    """Compute per-layer statistics from scores and allocate the budget.

    ``score_vectors`` may be None (e.g. for random masking) as long as
    ``layer_sizes`` and ``layer_names`` are given; the plan then carries
    no norm/entropy columns.
    """
    if score_vectors is not None:
        stats = [layer_importance(sv) for sv in score_vectors]
        sizes = [len(sv) for sv in score_vectors]
        names = [sv.layer_name for sv in score_vectors]
        norms = [s.norm for s in stats]
        entropies = [s.entropy for s in stats]
        flags = [s.degenerate for s in stats]
        if allocator == "norm_only":
            alphas = norms
        elif allocator == "entropy_only":
            alphas = entropies
        else:
            alphas = [s.importance for s in stats]
        return allocate_budget(
            alphas,
            sizes,
            ratio,
            sum(sizes),
            layer_names=names,
            norms=norms,
            entropies=entropies,
            degenerate_flags=flags,
            allocator=allocator,
        )
    if layer_sizes is None:
        raise AllocationError("need score vectors or explicit layer sizes")
    if allocator not in ("uniform", "equal_count"):
        raise AllocationError(f"allocator {allocator!r} requires score vectors")
    sizes = [int(s) for s in layer_sizes]
    return allocate_budget(
        [0.0] * len(sizes),
        sizes,
        ratio,
        sum(sizes),
        layer_names=layer_names,
        allocator=allocator,
    )
