"""Recompute the benchmark aggregates from the shipped reference table.

The package bundles the published top-1 accuracy table of eight algorithms
on the 44-dataset benchmark. This script recomputes MeanACC, win/tie/lose,
best and the tie-averaged AVG_rank from the raw cells, which is exactly what
`efdls eval-table` does.
"""
from efdls import metrics

table = metrics.load_reference_table()
print(f"{len(table.datasets)} datasets x {len(table.algorithms)} algorithms\n")

report = metrics.MetricReport.from_table(table)
header = f"{'algorithm':<10} {'win':>4} {'tie':>4} {'lose':>5} {'best':>5} {'meanACC':>8} {'avg_rank':>9}"
print(header)
print("-" * len(header))
for a in table.algorithms:
    print(f"{a:<10} {report.win[a]:>4} {report.tie[a]:>4} {report.lose[a]:>5} "
          f"{report.best[a]:>5} {report.mean_acc[a]:>8.4f} {report.avg_rank[a]:>9.4f}")

print("\nhighest mean accuracy:",
      max(table.algorithms, key=lambda a: report.mean_acc[a]))
print("lowest (best) average rank:",
      min(table.algorithms, key=lambda a: report.avg_rank[a]))
