"""Check the sufficient conditions on a table with widely separated disks.

On the reference table tau_min is tiny and the flow condition holds only
by a thin margin that depends on the count resolution. Shrinking both
disks lengthens the shortest flight and leaves a comfortable margin.
"""
from sinai_mme.billiard import build_table
from sinai_mme.pressure import PstarEstimator, check_conditions, find_htop
from sinai_mme.symbolic import complexity_counts, estimate_hstar, estimate_s0

for radii in [(0.42, 0.27), (0.38, 0.18)]:
    table = build_table([((0.0, 0.0), radii[0]), ((0.5, 0.5), radii[1])])
    res = complexity_counts(table, 5, budget=60_000, n_lines=8, line_budget=2_000_000)
    est = PstarEstimator(res)
    h = find_htop(est, t_hi=2.0)
    hs = estimate_hstar(res.n_values[1:], res.counts[1:])
    s0 = estimate_s0(table, 1.45, 20, 20_000, seed=0)
    rep = check_conditions(table.tau_min, table.tau_max, table.lam, hs.value, s0.estimate, h.root,
                           est(h.root).value)
    print(f"radii {radii}: tau_min={table.tau_min:.4f} h_top~{h.root:.3f} s0~{s0.estimate:.3f}")
    for name, c in rep.conditions.items():
        print(f"    {name:12s} holds={c.holds!s:5s} margin={c.margin:+.3f}")
