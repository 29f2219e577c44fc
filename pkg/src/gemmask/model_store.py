"""In-memory model snapshots and bit-exact binary checkpoint I/O.

A snapshot is an ordered collection of named, flat, 64-bit parameter
tensors plus a per-layer tunability flag. Checkpoints on disk are a JSON
manifest next to one raw little-endian binary file per layer (no header);
32-bit files are widened to 64-bit on load, and all internal arithmetic
downstream runs in 64-bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fnmatch import fnmatch
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MANIFEST_VERSION = 1
MANIFEST_FILENAME = "manifest.json"

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class SnapshotError(ValueError):
    """A snapshot or checkpoint violated its format contract."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float64)
    if out is arr and arr.flags.writeable:
        out = arr.copy()
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class LayerTensor:
    """Named, shaped, flat dense array of one layer's values.

    ``values`` is always a read-only 1-D float64 array of length
    ``prod(shape)`` in row-major order.
    """

    name: str
    shape: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        shape = tuple(int(d) for d in self.shape)
        if not shape or any(d < 1 for d in shape):
            raise SnapshotError(f"layer {self.name!r}: shape {shape} must be non-empty with positive dims")
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if values.size != math.prod(shape):
            raise SnapshotError(
                f"layer {self.name!r}: {values.size} values for shape {shape} "
                f"(expected {math.prod(shape)})"
            )
        if not np.isfinite(values).all():
            idx = int(np.argmin(np.isfinite(values)))
            raise SnapshotError(f"layer {self.name!r}: non-finite value at flat index {idx}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "values", _freeze(values))

    @property
    def size(self) -> int:
        return self.values.size

    def reshaped(self) -> np.ndarray:
        """Read-only row-major view with the layer's declared shape."""
        return self.values.reshape(self.shape)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LayerTensor):
            return NotImplemented
        # Bitwise comparison: the round-trip contract preserves signed zeros.
        return (
            self.name == other.name
            and self.shape == other.shape
            and self.values.tobytes() == other.values.tobytes()
        )


@dataclass(frozen=True, eq=False)
class ModelSnapshot:
    """Ordered, immutable collection of layers with tunability flags."""

    layers: tuple[LayerTensor, ...]
    tunable: tuple[bool, ...]

    def __post_init__(self) -> None:
        layers = tuple(self.layers)
        tunable = tuple(bool(t) for t in self.tunable)
        if len(layers) != len(tunable):
            raise SnapshotError(f"{len(layers)} layers but {len(tunable)} tunable flags")
        names = [l.name for l in layers]
        if len(set(names)) != len(names):
            dup = next(n for i, n in enumerate(names) if n in names[:i])
            raise SnapshotError(f"duplicate layer name {dup!r}")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "tunable", tunable)

    @property
    def total_params(self) -> int:
        """Total parameter count N over tunable layers (always recomputed)."""
        return sum(l.size for l, t in zip(self.layers, self.tunable) if t)

    def layer(self, name: str) -> LayerTensor:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def is_tunable(self, name: str) -> bool:
        for l, t in zip(self.layers, self.tunable):
            if l.name == name:
                return t
        raise KeyError(name)

    def tunable_layers(self) -> tuple[LayerTensor, ...]:
        return tuple(l for l, t in zip(self.layers, self.tunable) if t)

    def replace_values(self, arrays: dict[str, np.ndarray]) -> "ModelSnapshot":
        """New snapshot with some layers' values replaced (others shared)."""
        new_layers = tuple(
            LayerTensor(l.name, l.shape, arrays[l.name]) if l.name in arrays else l
            for l in self.layers
        )
        return type(self)(new_layers, self.tunable)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelSnapshot):
            return NotImplemented
        return self.layers == other.layers and self.tunable == other.tunable


class GradientSnapshot(ModelSnapshot):
    """Snapshot whose layer values are loss gradients at a weight snapshot."""


def check_pairing(weights: ModelSnapshot, grads: GradientSnapshot) -> None:
    """Reject a weights/gradients pair before any scoring runs.

    Every tunable layer of ``weights`` must appear in ``grads`` with an
    identical shape, and ``grads`` must not contain layers unknown to
    ``weights``.
    """
    weight_shapes = {l.name: l.shape for l in weights.layers}
    grad_shapes = {l.name: l.shape for l in grads.layers}
    for l in weights.tunable_layers():
        if l.name not in grad_shapes:
            raise SnapshotError(f"gradients missing tunable layer {l.name!r}")
        if grad_shapes[l.name] != l.shape:
            raise SnapshotError(
                f"layer {l.name!r}: gradient shape {grad_shapes[l.name]} != weight shape {l.shape}"
            )
    for name in grad_shapes:
        if name not in weight_shapes:
            raise SnapshotError(f"gradient layer {name!r} unknown to the model")


def _manifest_path(path: str | Path) -> Path:
    p = Path(path)
    return p / MANIFEST_FILENAME if p.is_dir() else p


def load_snapshot(manifest_path: str | Path) -> ModelSnapshot:
    """Load a snapshot from a manifest (or a directory containing one).

    Values are widened to float64; layer order follows the manifest.
    Missing files, byte-length mismatches, duplicate names, and non-finite
    values are hard errors reported with the offending layer.
    """
    path = _manifest_path(manifest_path)
    if not path.is_file():
        raise SnapshotError(f"manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SnapshotError(f"manifest {path} is not valid JSON: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise SnapshotError(f"manifest version {manifest.get('version')!r} (expected {MANIFEST_VERSION})")

    layers: list[LayerTensor] = []
    tunable: list[bool] = []
    seen: set[str] = set()
    for entry in manifest.get("layers", []):
        name = entry["name"]
        if name in seen:
            raise SnapshotError(f"duplicate layer name {name!r} in manifest")
        seen.add(name)
        shape = tuple(int(d) for d in entry["shape"])
        dtype_tag = entry["dtype"]
        if dtype_tag not in _DTYPES:
            raise SnapshotError(f"layer {name!r}: unknown dtype {dtype_tag!r}")
        dtype = _DTYPES[dtype_tag]
        data_path = path.parent / entry["file"]
        if not data_path.is_file():
            raise SnapshotError(f"layer {name!r}: data file not found: {data_path}")
        raw = data_path.read_bytes()
        expected = math.prod(shape) * dtype.itemsize
        if len(raw) != expected:
            raise SnapshotError(
                f"layer {name!r}: file {data_path.name} has {len(raw)} bytes, "
                f"expected {expected} for shape {list(shape)} at {dtype_tag}"
            )
        values = np.frombuffer(raw, dtype=dtype).astype(np.float64)
        if not np.isfinite(values).all():
            idx = int(np.argmin(np.isfinite(values)))
            raise SnapshotError(f"layer {name!r}: non-finite value at flat index {idx}")
        layers.append(LayerTensor(name, shape, values))
        tunable.append(bool(entry.get("tunable", True)))
    return ModelSnapshot(tuple(layers), tuple(tunable))


def load_gradients(manifest_path: str | Path) -> GradientSnapshot:
    """Load a gradient snapshot (same on-disk format as weights)."""
    snap = load_snapshot(manifest_path)
    return GradientSnapshot(snap.layers, snap.tunable)


def save_snapshot(snapshot: ModelSnapshot, out_dir: str | Path) -> Path:
    """Write a snapshot at 64-bit precision; returns the manifest path.

    ``load_snapshot(save_snapshot(s))`` reproduces ``s`` bit-exactly,
    including signed zeros.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (layer, tun) in enumerate(zip(snapshot.layers, snapshot.tunable)):
        safe = "".join(c if c.isalnum() or c in "._-" else "_" for c in layer.name)
        fname = f"{i:04d}_{safe}.bin"
        (out / fname).write_bytes(layer.values.astype("<f8").tobytes())
        entries.append(
            {
                "name": layer.name,
                "shape": list(layer.shape),
                "dtype": "f64",
                "file": fname,
                "tunable": tun,
            }
        )
    manifest_path = out / MANIFEST_FILENAME
    manifest_path.write_text(json.dumps({"version": MANIFEST_VERSION, "layers": entries}, indent=2) + "\n")
    return manifest_path


def snapshot_from_arrays(
    named_arrays: Iterable[tuple[str, Sequence[int], np.ndarray]],
    tunable: Iterable[bool] | None = None,
) -> ModelSnapshot:
    """Convenience constructor from (name, shape, values) triples."""
    triples = list(named_arrays)
    layers = tuple(LayerTensor(n, tuple(s), v) for n, s, v in triples)
    flags = tuple(tunable) if tunable is not None else tuple(True for _ in triples)
    return ModelSnapshot(layers, flags)


DEFAULT_TUNABLE_PATTERNS = ("*q_proj*", "*v_proj*")


def with_tunable_patterns(
    snapshot: ModelSnapshot, patterns: Sequence[str] = DEFAULT_TUNABLE_PATTERNS
) -> ModelSnapshot:
    """Snapshot with tunability set by fnmatch patterns on layer names.

    The default patterns select query/value projection matrices, the
    usual scope for attention models; values are shared, only the flags
    change.
    """
    flags = tuple(any(fnmatch(l.name, p) for p in patterns) for l in snapshot.layers)
    return type(snapshot)(snapshot.layers, flags)
