"""Walkthrough: entropy-guided per-layer budget allocation.

A layer's importance is ||scores||_2 * H(p), where p is the score
distribution. The norm measures how strongly the layer wants to move;
the entropy measures how spread out that signal is. A layer whose signal
is concentrated in one parameter needs almost no budget: one pick
captures it. A layer with an evenly spread signal needs many picks.
"""

import numpy as np

from gemmask import ScoreVector, build_allocation, layer_importance

# One layer with everything concentrated in a single score, one spread out.
concentrated = ScoreVector("concentrated", [20.0, 0.001] + [0.001] * 98)
spread = ScoreVector("spread", [1.0] * 100)

for sv in (concentrated, spread):
    stats = layer_importance(sv)
    print(f"{sv.layer_name:>12}: norm={stats.norm:8.3f} entropy={stats.entropy:6.3f} "
          f"importance={stats.importance:8.3f}")

print("\nbudgets for 10 picks under each allocator:")
for allocator in ("gem", "norm_only", "entropy_only", "uniform", "equal_count"):
    plan = build_allocation([concentrated, spread], None, 0.05, allocator)
    print(f"  {allocator:>13}: {plan.budgets()}")

# The norm-only allocator over-funds the concentrated layer (big norm,
# but only its first pick is worth anything). Discounting by entropy
# moves the budget to where many parameters genuinely matter.

# Budgets always sum to floor(ratio * N) and never exceed a layer's size;
# stranded fractions go to the largest remainders, ties to lower index.
tiny = [ScoreVector("a", np.full(3, 5.0)), ScoreVector("b", np.ones(1000))]
plan = build_allocation(tiny, None, 6 / 1003, "norm_only")
print("\ncapacity-capped allocation:", plan.budgets(), "(layer a holds only 3)")
