"""Walkthrough: the on-disk formats.

Snapshots are a JSON manifest plus one raw little-endian binary file per
layer, so any framework can emit them. Masks are a compact binary format
with an embedded JSON provenance trailer recording the strategy, ratio,
eps, gradient source, and the full allocation plan.
"""

import json
import tempfile
from pathlib import Path

from gemmask import (
    SyntheticTask,
    ToyModel,
    ToyModelSpec,
    build_masks,
    load_masks,
    load_snapshot,
    make_dataset,
    save_masks,
    save_snapshot,
)
from gemmask.model_store import GradientSnapshot, load_gradients

work = Path(tempfile.mkdtemp(prefix="gemmask_files_"))

model = ToyModel(ToyModelSpec("attn1", (16, 2), seed=3, n_tokens=4))
snap = model.init_snapshot()
print("attention model layers:", [l.name for l in snap.layers])
print("tunable by default:", [l.name for l in snap.tunable_layers()])

manifest = save_snapshot(snap, work / "weights")
print("\nmanifest:", manifest)
print(json.dumps(json.loads(manifest.read_text())["layers"][0], indent=2))

reloaded = load_snapshot(manifest)
print("round-trip bit-exact:", reloaded == snap)

# Gradients use the same format.
task = SyntheticTask("two_gaussians_classification", n_train=64, n_eval=16, seed=3)
ds = make_dataset(task, model)
_, grads = model.loss_and_grads(snap, ds.x_train, ds.y_train)
save_snapshot(grads, work / "grads")
g0 = load_gradients(work / "grads")
assert isinstance(g0, GradientSnapshot)

masks = build_masks(reloaded, g0, ratio=0.05, strategy="gem", gradient_source="demo batch")
mask_path = save_masks(masks, work / "masks.gemm")
print("\nmask file:", mask_path, f"({mask_path.stat().st_size} bytes)")
print("selected per layer:", masks.budgets())

again = load_masks(mask_path)
print("mask round-trip exact:", again == masks)
plan = again.provenance["plan"]
for row in plan["layers"]:
    print(f"  {row['name']}: share={row['share']:.4f} entropy={row['entropy']:.4f} "
          f"k={row['budget']}")
print("\nthe CLI renders the same view:  gemmask inspect", mask_path)
