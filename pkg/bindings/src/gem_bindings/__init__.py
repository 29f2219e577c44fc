"""Array-exchange layer over the mask engine.

Callers hand in their own contiguous 32- or 64-bit real buffers
(anything supporting the Python buffer protocol, numpy arrays included)
tagged with a dtype; the layer widens to 64-bit at the boundary, never
mutates caller memory, and returns outputs bitwise identical to the
engine's. Mask files written here are the engine's own binary format.
"""

from .api import (
    ArrayView,
    MaskBuildResult,
    bind_build_masks,
    bind_compute_gwr,
    load_masks,
    save_masks,
)

__version__ = "0.1.0"
