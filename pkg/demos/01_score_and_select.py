"""Walkthrough: per-parameter scores and top-k selection.

The score of a parameter is the magnitude of its gradient relative to its
own value, |g| / max(|w|, eps). A parameter with a modest gradient but a
tiny weight can outrank one with a big gradient sitting on a big weight,
because the small one is about to change *proportionally* more.
"""

import numpy as np

from gemmask import LayerTensor, ScoreVector, compute_gwr, select_top_k

# Two parameters: index 0 has the larger gradient, index 1 the larger
# gradient-to-weight ratio.
weights = LayerTensor("demo", (2,), [1.0, 0.2])
grads = LayerTensor("demo", (2,), [0.5, 0.3])

scores = compute_gwr(weights, grads)
print("weights:           ", weights.values)
print("gradients:         ", grads.values)
print("|g| ranking picks: ", int(np.argmax(np.abs(grads.values))))
print("scores |g|/|w|:    ", scores.scores)
print("score ranking picks:", int(np.argmax(scores.scores)))

# The epsilon clamp keeps zero weights finite instead of infinite.
z = compute_gwr(LayerTensor("z", (1,), [0.0]), LayerTensor("z", (1,), [1.0]), eps=1e-12)
print("\nzero weight score (eps=1e-12):", z.scores[0])

# Selection is deterministic: ties break toward the lower flat index.
tied = ScoreVector("tied", [1.0, 1.0, 1.0, 0.5])
mask = select_top_k(tied, 2)
print("\ntop-2 of", tied.scores, "->", mask.indices)

# Scores are invariant if weights and gradients are rescaled together,
# which is what makes them comparable across layers of different scales.
c = 128.0  # powers of two rescale without any floating-point drift
rescaled = compute_gwr(
    LayerTensor("demo", (2,), c * weights.values),
    LayerTensor("demo", (2,), c * grads.values),
)
print("\nscores after joint rescale by", c, "->", rescaled.scores)
