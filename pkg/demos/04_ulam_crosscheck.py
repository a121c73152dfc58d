"""Compare the counting route to the pressure with a transfer-operator route.

The twisted Ulam operator's leading eigenvalue gives an independent
estimate of the pressure; at the root it also yields an approximate
equilibrium measure.
"""
import numpy as np

from sinai_mme.billiard import build_table
from sinai_mme.pressure import PstarEstimator, find_htop
from sinai_mme.symbolic import complexity_counts
from sinai_mme.ulam import (build_operator, equilibrium_measure, flow_mme, leading_eigen, sample_transitions,
                            singularity_cloud, ulam_pressure_scan)

table = build_table([((0.0, 0.0), 0.42), ((0.5, 0.5), 0.27)])
res = complexity_counts(table, 6, budget=60_000, n_lines=8, line_budget=2_000_000)
est = PstarEstimator(res)
h = find_htop(est)

n = 64  # boxes per side; 256 gives the tighter comparison used in the test-suite
tr = sample_transitions(table, n, n, 8, seed=0)
grid = np.linspace(0.0, h.root, 4)
scan = ulam_pressure_scan(table, grid, n, n, 8, seed=0, transitions=tr)
for t, lam, err in zip(grid, scan.log_lambda, scan.err):
    p = est(t)
    print(f"t={t:.3f}  log lambda={lam:+.3f}+-{err:.3f}   P_*={p.value:+.3f}+-{p.error:.3f}")

op = build_operator(table, h.root, transitions=tr)
meas = equilibrium_measure(table, op, leading_eigen(op), singularity_cloud(table))
flow = flow_mme(table, op, meas, h.root, h.bracket)
print("support fraction:", meas.support_fraction)
print("adapt integral:", meas.adapt_integral, " flad integral:", flow.flad_integral)
