"""Walkthrough: the full strategy-comparison experiment.

Runs the default grid (4 masking strategies x 3 seeds at a 1% budget,
10 fine-tuning epochs) and prints the seed-mean diagnostics. The
scale-aware strategies should show both the largest relative weight
change and the largest first-order loss reduction, and capture the
largest share of the total score mass.

The same run is available from the command line:

    gemmask train --config config.json
    gemmask report <output_dir>
"""

import tempfile

from gemmask import default_config, run_experiment

out_dir = tempfile.mkdtemp(prefix="gemmask_demo_")
config = default_config(out_dir)
print(f"running {len(config.strategies)} strategies x {len(config.seeds)} seeds "
      f"at ratio {config.ratios[0]} -> {out_dir}\n")

report = run_experiment(config)

header = f"{'strategy':<14} {'accuracy':>16} {'rel change':>14} {'loss proxy':>12} {'share':>8}"
print(header)
print("-" * len(header))
for row in report.aggregates:
    print(f"{row.strategy:<14} "
          f"{row.final_metric_mean:8.4f}+/-{row.final_metric_std:.4f} "
          f"{row.rel_change_mean:>14.1f} "
          f"{row.loss_red_proxy_mean:>12.4f} "
          f"{row.captured_share_mean:>8.4f}")

print(f"\nreport files: {out_dir}/report.csv, fig2.csv, captured_share.csv")
print("per-cell records, masks, and allocation plans under cells/")
