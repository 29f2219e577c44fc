"""Top-k selection, mask containers, masked optimizers, and mask-file I/O.

A mask is the sorted set of selected flat indices for one layer; a
MaskSet bundles per-layer masks with the provenance (ratio, strategy,
eps, gradient source, allocation plan) that produced them. Masked
updates touch only the selected indices, so frozen parameters are
bit-identical to their initial values after any number of steps.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model_store import GradientSnapshot, LayerTensor, ModelSnapshot
from .scoring import DEFAULT_EPS, ScoreVector

MASK_MAGIC = b"GEMM"
MASK_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


class MaskError(ValueError):
    """A mask violated its structural contract."""


class MaskFormatError(MaskError):
    """A mask file is corrupt or has an unsupported version."""


@dataclass(frozen=True, eq=False)
class LayerMask:
    """Strictly ascending flat indices selected within one layer."""

    layer_name: str
    shape: tuple[int, ...]
    indices: np.ndarray

    def __post_init__(self) -> None:
        shape = tuple(int(d) for d in self.shape)
        if not shape or any(d < 1 for d in shape):
            raise MaskError(f"mask {self.layer_name!r}: invalid shape {shape}")
        idx = np.asarray(self.indices, dtype=np.uint64).reshape(-1)
        if idx.size:
            if not np.all(idx[1:] > idx[:-1]):
                raise MaskError(f"mask {self.layer_name!r}: indices not strictly ascending")
            if int(idx[-1]) >= math.prod(shape):
                raise MaskError(
                    f"mask {self.layer_name!r}: index {int(idx[-1])} out of range "
                    f"for {math.prod(shape)} parameters"
                )
        idx = idx.copy()
        idx.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "indices", idx)

    @property
    def count(self) -> int:
        return self.indices.size

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LayerMask):
            return NotImplemented
        return (
            self.layer_name == other.layer_name
            and self.shape == other.shape
            and self.indices.tobytes() == other.indices.tobytes()
        )


@dataclass(frozen=True, eq=False)
class MaskSet:
    """Per-layer masks plus the provenance that produced them."""

    masks: tuple[LayerMask, ...]
    provenance: dict

    def __post_init__(self) -> None:
        masks = tuple(self.masks)
        names = [m.layer_name for m in masks]
        if len(set(names)) != len(names):
            raise MaskError("duplicate layer name in mask set")
        object.__setattr__(self, "masks", masks)

    @property
    def total_selected(self) -> int:
        return sum(m.count for m in self.masks)

    def mask(self, name: str) -> LayerMask:
        for m in self.masks:
            if m.layer_name == name:
                return m
        raise KeyError(name)

    def budgets(self) -> dict[str, int]:
        return {m.layer_name: m.count for m in self.masks}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MaskSet):
            return NotImplemented
        return self.masks == other.masks and self.provenance == other.provenance


def select_top_k(scores: ScoreVector, k: int, shape: Sequence[int] | None = None) -> LayerMask:
    """Mask of the k highest-scoring indices, ties broken by lower index.

    Output indices are sorted ascending. ``shape`` defaults to the flat
    vector shape.
    """
    n = len(scores)
    if not (0 <= k <= n):
        raise MaskError(f"layer {scores.layer_name!r}: k={k} out of range for {n} scores")
    # Stable sort on the negated scores keeps equal scores in ascending
    # index order, which is exactly the tie rule.
    order = np.argsort(-scores.scores, kind="stable")
    idx = np.sort(order[:k]).astype(np.uint64)
    return LayerMask(scores.layer_name, tuple(shape) if shape is not None else (n,), idx)


def full_mask_set(snapshot: ModelSnapshot) -> MaskSet:
    """Mask selecting every parameter of every tunable layer."""
    masks = tuple(
        LayerMask(l.name, l.shape, np.arange(l.size, dtype=np.uint64))
        for l in snapshot.tunable_layers()
    )
    provenance = {
        "ratio": 1.0,
        "strategy": "full",
        "eps": None,
        "seed": None,
        "gradient_source": None,
        "plan": None,
    }
    return MaskSet(masks, provenance)


def build_masks(
    w0: ModelSnapshot,
    g0: GradientSnapshot,
    ratio: float,
    strategy: str = "gem",
    *,
    eps: float = DEFAULT_EPS,
    seed: int | None = None,
    gradient_source: str = "caller-supplied",
) -> MaskSet:
    """End-to-end mask construction for a named strategy.

    For the default strategy this is the full pipeline: per-layer
    gradient-to-weight scores, entropy-guided budget allocation, then
    top-k selection per layer. Deterministic given its inputs (including
    the seed for the random strategy).
    """
    from .strategies import StrategySpec, make_mask

    spec = StrategySpec(name=strategy, ratio=float(ratio), eps=eps, seed=seed)
    return make_mask(spec, w0, g0, gradient_source=gradient_source)


# --------------------------------------------------------------------------
# Masked updates
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamWHyper:
    """AdamW hyperparameters; weight decay is gated by the mask."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class AdamWState:
    """First/second moment buffers and the step counter for one layer."""

    step: int
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros(cls, size: int) -> "AdamWState":
        return cls(step=0, m=np.zeros(size), v=np.zeros(size))

    def copy(self) -> "AdamWState":
        return AdamWState(self.step, self.m.copy(), self.v.copy())


def sgd_step_(values: np.ndarray, grads: np.ndarray, idx: np.ndarray, lr: float) -> None:
    """In-place masked SGD: only the indexed entries are ever touched."""
    values[idx] -= lr * grads[idx]


def adamw_step_(
    values: np.ndarray,
    grads: np.ndarray,
    idx: np.ndarray,
    state: AdamWState,
    hyper: AdamWHyper,
) -> None:
    """In-place masked AdamW step.

    The gradient is taken as zero outside the mask, so moments at
    unmasked indices stay exactly zero (they are never read or written),
    and decoupled weight decay applies only at masked indices.
    """
    state.step += 1
    t = state.step
    b1, b2 = hyper.beta1, hyper.beta2
    g = grads[idx]
    state.m[idx] = b1 * state.m[idx] + (1.0 - b1) * g
    state.v[idx] = b2 * state.v[idx] + (1.0 - b2) * (g * g)
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    m_hat = state.m[idx] / bc1
    v_hat = state.v[idx] / bc2
    values[idx] -= hyper.lr * (
        m_hat / (np.sqrt(v_hat) + hyper.eps) + hyper.weight_decay * values[idx]
    )


def _mask_indices(mask: LayerMask, size: int) -> np.ndarray:
    idx = mask.indices.astype(np.int64)
    if idx.size and int(idx[-1]) >= size:
        raise MaskError(f"mask {mask.layer_name!r}: index out of range for {size} parameters")
    return idx


def apply_masked_sgd(
    weights: LayerTensor, grads: LayerTensor, mask: LayerMask, lr: float
) -> LayerTensor:
    """One SGD step on the selected indices; the rest are bit-identical."""
    if lr <= 0.0:
        raise MaskError(f"lr must be positive, got {lr}")
    if weights.shape != grads.shape:
        raise MaskError(f"layer {weights.name!r}: weight/gradient shape mismatch")
    idx = _mask_indices(mask, weights.size)
    values = weights.values.copy()
    sgd_step_(values, grads.values, idx, lr)
    return LayerTensor(weights.name, weights.shape, values)


def apply_masked_adamw(
    state: AdamWState,
    weights: LayerTensor,
    grads: LayerTensor,
    mask: LayerMask,
    hyper: AdamWHyper,
) -> tuple[LayerTensor, AdamWState]:
    """One AdamW step on the selected indices; returns new weights + state.

    Unmasked weights and their moments are bit-identical across any
    number of steps (moments for unmasked indices must start at zero).
    """
    if weights.shape != grads.shape:
        raise MaskError(f"layer {weights.name!r}: weight/gradient shape mismatch")
    if state.m.size != weights.size or state.v.size != weights.size:
        raise MaskError(f"layer {weights.name!r}: optimizer state size mismatch")
    idx = _mask_indices(mask, weights.size)
    values = weights.values.copy()
    new_state = state.copy()
    adamw_step_(values, grads.values, idx, new_state, hyper)
    return LayerTensor(weights.name, weights.shape, values), new_state


# --------------------------------------------------------------------------
# Mask file format
# --------------------------------------------------------------------------
#
# header:  magic "GEMM" | version u32 | layer count u32 | trailer offset u64
# layer:   name len u32 | name utf-8 | rank u32 | dims u64[rank]
#          | count u64 | indices u64[count] (strictly ascending)
# trailer: JSON provenance, trailer offset .. EOF
# All integers little-endian.


def serialize_masks(ms: MaskSet) -> bytes:
    body = bytearray()
    for m in ms.masks:
        name = m.layer_name.encode("utf-8")
        body += struct.pack("<I", len(name)) + name
        body += struct.pack("<I", len(m.shape))
        body += np.asarray(m.shape, dtype="<u8").tobytes()
        body += struct.pack("<Q", m.count)
        body += m.indices.astype("<u8").tobytes()
    trailer = json.dumps(ms.provenance, sort_keys=True, separators=(",", ":")).encode("utf-8")
    header = _HEADER.pack(MASK_MAGIC, MASK_VERSION, len(ms.masks), _HEADER.size + len(body))
    return header + bytes(body) + trailer


def deserialize_masks(data: bytes) -> MaskSet:
    if len(data) < _HEADER.size:
        raise MaskFormatError("mask file truncated before header")
    magic, version, n_layers, trailer_offset = _HEADER.unpack_from(data, 0)
    if magic != MASK_MAGIC:
        raise MaskFormatError(f"bad magic {magic!r}")
    if version != MASK_VERSION:
        raise MaskFormatError(f"unsupported mask file version {version}")
    if trailer_offset > len(data):
        raise MaskFormatError("trailer offset beyond end of file")
    pos = _HEADER.size
    masks = []
    for _ in range(n_layers):
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = np.frombuffer(data, dtype="<u8", count=rank, offset=pos)
        pos += 8 * rank
        (count,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        idx = np.frombuffer(data, dtype="<u8", count=count, offset=pos)
        pos += 8 * count
        if pos > trailer_offset:
            raise MaskFormatError(f"layer {name!r}: record overruns the trailer")
        try:
            masks.append(LayerMask(name, tuple(int(d) for d in dims), idx))
        except MaskError as exc:
            raise MaskFormatError(str(exc)) from exc
    if pos != trailer_offset:
        raise MaskFormatError(f"{trailer_offset - pos} unexpected bytes before the trailer")
    try:
        provenance = json.loads(data[trailer_offset:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MaskFormatError(f"corrupt provenance trailer: {exc}") from exc
    return MaskSet(tuple(masks), provenance)


def save_masks(ms: MaskSet, path: str | Path) -> Path:
    """Write a mask set; ``load_masks(save_masks(ms)) == ms`` exactly."""
    p = Path(path)
    p.write_bytes(serialize_masks(ms))
    return p


def load_masks(path: str | Path) -> MaskSet:
    p = Path(path)
    if not p.is_file():
        raise MaskFormatError(f"mask file not found: {p}")
    return deserialize_masks(p.read_bytes())
