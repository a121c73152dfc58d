"""Count itinerary classes, estimate h_* and the pressure curve, and locate h_top."""
import numpy as np

from sinai_mme.billiard import build_table
from sinai_mme.pressure import PstarEstimator, find_htop, pressure_curve, s_star, default_theta0
from sinai_mme.symbolic import complexity_counts, estimate_hstar

table = build_table([((0.0, 0.0), 0.42), ((0.5, 0.5), 0.27)])

# Small budget so this runs in well under a minute; raise n_max for sharper slopes.
res = complexity_counts(table, 6, budget=60_000, n_lines=8, line_budget=2_000_000)
print("counts:", list(res.counts))
hs = estimate_hstar(res.n_values[1:], res.counts[1:])
print(f"h_* ~ {hs.value:.3f} +- {hs.error:.3f}")

# The pressure curve is convex, decreasing, with slopes trapped in [-tau_max, -tau_min]
grid = np.linspace(0.0, 3.0, 7)
cur = pressure_curve(res, grid, table.tau_min, table.tau_max)
for t, p, s in zip(cur.t_grid, cur.pstar, cur.pslope_left):
    print(f"t={t:.2f}  P_*={p:+.3f}  left slope={s:+.3f}")

# h_top is the root of P_*(t) = 0
h = find_htop(PstarEstimator(res))
print(f"h_top ~ {h.root:.3f} (bracket {h.bracket[0]:.4f}..{h.bracket[1]:.4f}, err {h.err_t:.3f})")

theta0 = default_theta0(table.tau_min)
# s_* at the last grid point, using the left slope there
t = cur.t_grid[-1]
est = s_star(t, cur.pslope_left[-1], theta0, table.tau_min, table.tau_max)
print(f"s_* at t={t:.2f}: {est.value:.4f} (must exceed {est.bound:.4f}: {est.check_ok})")
