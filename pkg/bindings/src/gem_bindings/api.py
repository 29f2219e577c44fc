"""Boundary types and the two exported operations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from gemmask.mask_engine import MaskSet, load_masks, save_masks
from gemmask.model_store import GradientSnapshot, LayerTensor, ModelSnapshot
from gemmask.scoring import compute_gwr
from gemmask.strategies import StrategySpec, make_mask

DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}

__all__ = [
    "ArrayView",
    "MaskBuildResult",
    "bind_compute_gwr",
    "bind_build_masks",
    "save_masks",
    "load_masks",
]


@dataclass(frozen=True)
class ArrayView:
    """Descriptor of a caller-owned contiguous real buffer.

    ``data`` is any object supporting the buffer protocol (bytes,
    array.array, memoryview, numpy array); ``dtype`` tags its element
    type. The buffer is only ever read: widening to float64 always
    copies.
    """

    name: str
    data: object
    dtype: str = "f64"
    length: int | None = None

    def __post_init__(self) -> None:
        if self.dtype not in DTYPES:
            raise TypeError(f"{self.name!r}: dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")

    def as_float64(self) -> np.ndarray:
        """Fresh float64 copy of the buffer contents."""
        dtype = DTYPES[self.dtype]
        if isinstance(self.data, np.ndarray):
            arr = self.data
            if arr.dtype != dtype:
                raise TypeError(
                    f"{self.name!r}: array dtype {arr.dtype} does not match tag {self.dtype!r}"
                )
            if not arr.flags.c_contiguous:
                raise ValueError(f"{self.name!r}: buffer must be C-contiguous")
            flat = arr.reshape(-1)
        else:
            mv = memoryview(self.data)
            if mv.nbytes % dtype.itemsize:
                raise ValueError(
                    f"{self.name!r}: {mv.nbytes} bytes is not a whole number of {self.dtype} items"
                )
            flat = np.frombuffer(mv, dtype=dtype)
        if self.length is not None and flat.size != self.length:
            raise ValueError(f"{self.name!r}: buffer holds {flat.size} items, declared {self.length}")
        return flat.astype(np.float64)


def _as_view(obj, fallback_name: str) -> ArrayView:
    if isinstance(obj, ArrayView):
        return obj
    return ArrayView(fallback_name, obj)


def bind_compute_gwr(weights, grads, eps: float = 1e-12) -> np.ndarray:
    """Gradient-to-weight scores for one layer of caller-owned buffers.

    Same numerical contract as the engine's scorer; the output is a new
    float64 array, bitwise equal to the engine's on identical inputs.
    Empty inputs yield an empty output.
    """
    wv = _as_view(weights, "weights")
    gv = _as_view(grads, wv.name)
    w = wv.as_float64()
    g = gv.as_float64()
    if w.size != g.size:
        raise ValueError(f"{wv.name!r}: {w.size} weights vs {g.size} gradients")
    if w.size == 0:
        return np.empty(0)
    scores = compute_gwr(
        LayerTensor(wv.name, (w.size,), w), LayerTensor(wv.name, (g.size,), g), eps
    )
    return scores.scores.copy()


class MaskBuildResult(NamedTuple):
    """Per-layer selected indices, the allocation summary, and the
    engine mask set (usable with ``save_masks``)."""

    indices: dict[str, np.ndarray]
    allocation: dict
    mask_set: MaskSet


def _normalize_layer(entry) -> tuple[str, ArrayView, ArrayView]:
    if isinstance(entry, Mapping):
        name = entry["name"]
        weights, grads = entry["weights"], entry["grads"]
    else:
        name, weights, grads = entry
    return name, _as_view(weights, name), _as_view(grads, name)


def bind_build_masks(
    layers: Iterable,
    ratio: float,
    strategy: str = "gem",
    *,
    eps: float = 1e-12,
    seed: int | None = None,
    gradient_source: str = "caller buffers",
) -> MaskBuildResult:
    """End-to-end mask construction from caller-owned layer buffers.

    ``layers`` is an iterable of ``(name, weights, grads)`` triples or
    ``{"name", "weights", "grads"}`` mappings, where the arrays are
    ArrayViews or raw buffers. Indices come back as uint64 arrays,
    bitwise identical to the engine's selection on the same inputs.
    """
    names: list[str] = []
    w_layers: list[LayerTensor] = []
    g_layers: list[LayerTensor] = []
    for entry in layers:
        name, wv, gv = _normalize_layer(entry)
        w = wv.as_float64()
        g = gv.as_float64()
        names.append(name)
        w_layers.append(LayerTensor(name, (w.size,), w))
        g_layers.append(LayerTensor(name, (g.size,), g))
    flags = tuple(True for _ in names)
    w0 = ModelSnapshot(tuple(w_layers), flags)
    g0 = GradientSnapshot(tuple(g_layers), flags)
    spec = StrategySpec(name=strategy, ratio=float(ratio), eps=eps, seed=seed)
    mask_set = make_mask(spec, w0, g0, gradient_source=gradient_source)
    indices = {m.layer_name: m.indices.copy() for m in mask_set.masks}
    return MaskBuildResult(indices, mask_set.provenance["plan"], mask_set)
