"""Gradient-to-weight-ratio scores and fine-tuning diagnostics.

The per-parameter score is ``rho[i] = |g[i]| / max(|w[i]|, eps)``: the
magnitude of the gradient relative to the parameter's own scale. All
functions here are pure; cross-layer reductions run in a fixed layer
order (per-layer sums use numpy's pairwise summation in flat-index
order) so results are deterministic across runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from .model_store import GradientSnapshot, LayerTensor, ModelSnapshot

if TYPE_CHECKING:  # pragma: no cover
    from .mask_engine import LayerMask, MaskSet

DEFAULT_EPS = 1e-12


class ScoringError(ValueError):
    """Invalid inputs to a scoring operation."""


@dataclass(frozen=True, eq=False)
class ScoreVector:
    """Per-parameter scores for one layer, parallel to its flat indices."""

    layer_name: str
    scores: np.ndarray

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if not np.isfinite(scores).all():
            raise ScoringError(f"layer {self.layer_name!r}: non-finite score")
        if scores.size and scores.min() < 0.0:
            raise ScoringError(f"layer {self.layer_name!r}: negative score")
        scores = scores.copy()
        scores.flags.writeable = False
        object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return self.scores.size

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ScoreVector):
            return NotImplemented
        return (
            self.layer_name == other.layer_name
            and self.scores.tobytes() == other.scores.tobytes()
        )


def _selected_indices(selected) -> np.ndarray:
    """Accept a LayerMask or a plain index sequence."""
    idx = getattr(selected, "indices", selected)
    return np.asarray(idx, dtype=np.int64)


def _check_indices(idx: np.ndarray, size: int, where: str) -> None:
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise ScoringError(f"{where}: index out of range for {size} parameters")


def compute_gwr(
    weights: LayerTensor, grads: LayerTensor, eps: float = DEFAULT_EPS
) -> ScoreVector:
    """Gradient-to-weight ratio scores ``|g| / max(|w|, eps)`` for one layer.

    The epsilon clamp keeps scores finite at zero weights while preserving
    the ranking intent that small weights with live gradients score high.
    Scores are invariant under joint scaling of weights and gradients and
    scale linearly with the gradients alone.
    """
    if eps <= 0.0:
        raise ScoringError(f"eps must be positive, got {eps}")
    if weights.shape != grads.shape:
        raise ScoringError(
            f"layer {weights.name!r}: weight shape {weights.shape} != gradient shape {grads.shape}"
        )
    denom = np.maximum(np.abs(weights.values), eps)
    return ScoreVector(weights.name, np.abs(grads.values) / denom)


def score_snapshot(
    weights: ModelSnapshot, grads: GradientSnapshot, eps: float = DEFAULT_EPS
) -> list[ScoreVector]:
    """GWR scores for every tunable layer, in snapshot order."""
    out = []
    for layer in weights.tunable_layers():
        out.append(compute_gwr(layer, grads.layer(layer.name), eps))
    return out


def relative_weight_change(
    w0: LayerTensor, wt: LayerTensor, selected, eps: float = DEFAULT_EPS
) -> float:
    """L2 norm of ``(wt - w0) / max(|w0|, eps)`` over the selected indices."""
    if w0.shape != wt.shape:
        raise ScoringError(f"layer {w0.name!r}: shape mismatch {w0.shape} vs {wt.shape}")
    idx = _selected_indices(selected)
    _check_indices(idx, w0.size, f"layer {w0.name!r}")
    return math.sqrt(_rel_change_sq(w0.values, wt.values, idx, eps))


def _rel_change_sq(v0: np.ndarray, vt: np.ndarray, idx: np.ndarray, eps: float) -> float:
    r = (vt[idx] - v0[idx]) / np.maximum(np.abs(v0[idx]), eps)
    return float(np.sum(r * r))


def loss_reduction_proxy(
    grad0: LayerTensor, w0: LayerTensor, wt: LayerTensor, selected
) -> float:
    """First-order loss-change magnitude ``|sum g0[i] * (wt[i] - w0[i])|``.

    This is an estimate of the achieved loss reduction; signed
    cancellation across indices is possible, so zero does not imply
    ``wt == w0``.
    """
    return abs(_loss_reduction_signed(grad0, w0, wt, selected))


def _loss_reduction_signed(
    grad0: LayerTensor, w0: LayerTensor, wt: LayerTensor, selected
) -> float:
    if not (grad0.shape == w0.shape == wt.shape):
        raise ScoringError(f"layer {w0.name!r}: shape mismatch among grad0/w0/wt")
    idx = _selected_indices(selected)
    _check_indices(idx, w0.size, f"layer {w0.name!r}")
    return float(np.sum(grad0.values[idx] * (wt.values[idx] - w0.values[idx])))


def _masks_by_name(masks) -> Mapping[str, "LayerMask"]:
    layer_masks = getattr(masks, "masks", masks)
    return {m.layer_name: m for m in layer_masks}


def captured_share(scores: Sequence[ScoreVector], masks) -> float:
    """Fraction of total score mass covered by the masks' selected indices.

    ``masks`` may be a MaskSet or any iterable of LayerMask; layers are
    matched by name, and layers without a mask contribute nothing to the
    numerator. Returns 0 when the total mass is 0.
    """
    by_name = _masks_by_name(masks)
    scored = {s.layer_name for s in scores}
    for name in by_name:
        if name not in scored:
            raise ScoringError(f"mask layer {name!r} has no score vector")
    num = 0.0
    den = 0.0
    for sv in scores:
        den += float(np.sum(sv.scores))
        mask = by_name.get(sv.layer_name)
        if mask is not None:
            idx = _selected_indices(mask)
            _check_indices(idx, len(sv), f"layer {sv.layer_name!r}")
            num += float(np.sum(sv.scores[idx]))
    if den == 0.0:
        return 0.0
    return num / den


def total_relative_weight_change(
    snap0: ModelSnapshot, snapt: ModelSnapshot, masks, eps: float = DEFAULT_EPS
) -> float:
    """Relative-weight-change norm over all selected indices of all layers."""
    by_name = _masks_by_name(masks)
    total = 0.0
    for name, mask in by_name.items():
        l0 = snap0.layer(name)
        lt = snapt.layer(name)
        if l0.shape != lt.shape:
            raise ScoringError(f"layer {name!r}: shape mismatch {l0.shape} vs {lt.shape}")
        idx = _selected_indices(mask)
        _check_indices(idx, l0.size, f"layer {name!r}")
        total += _rel_change_sq(l0.values, lt.values, idx, eps)
    return math.sqrt(total)


def total_loss_reduction_proxy(
    grads0: GradientSnapshot, snap0: ModelSnapshot, snapt: ModelSnapshot, masks
) -> float:
    """|sum over all layers and selected indices of g0 * (wt - w0)|.

    The absolute value is taken once, after the cross-layer sum, so this
    is the single dot product over every selected parameter.
    """
    by_name = _masks_by_name(masks)
    total = 0.0
    for name, mask in by_name.items():
        total += _loss_reduction_signed(
            grads0.layer(name), snap0.layer(name), snapt.layer(name), mask
        )
    return abs(total)
