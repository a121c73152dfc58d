"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Every test gathers named sub-checks, reports them on one line (also shown
in the terminal summary), then asserts that all of them hold.
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from sinai_mme.billiard import (
    PhasePoint,
    billiard_map,
    build_table,
    check_hyperbolicity,
    fit_c1,
    inverse_map_arrays,
    jacobian_arrays,
    map_arrays,
    sample_invariant,
)
from sinai_mme.curves import (
    check_nesting,
    default_delta0,
    grow_family,
    growth_lemma_check,
    n_step_expansion_check,
    sample_seeds,
    scale_ladder,
    ssp_check,
    verify_complexity,
)
from sinai_mme.pressure import (
    PstarEstimator,
    check_conditions,
    default_theta0,
    find_htop,
    forconv_holds,
    hoelder_holds,
    log_qn,
    pressure_curve,
    qn,
    s_star,
    t_c,
)
from sinai_mme.reports import ExperimentSpec, run
from sinai_mme.symbolic import complexity_counts, estimate_hstar, estimate_s0
from sinai_mme.ulam import (
    build_operator,
    equilibrium_measure,
    flow_mme,
    leading_eigen,
    sample_transitions,
    singularity_cloud,
    ulam_pressure_scan,
)

pytestmark = pytest.mark.slow

REF = [((0.0, 0.0), 0.42), ((0.5, 0.5), 0.27)]
WIDE = [((0.0, 0.0), 0.38), ((0.5, 0.5), 0.18)]


def report(k, title, checks):
    """checks: list of (name, ok, detail)."""
    ok = all(c[1] for c in checks)
    failed = [c[0] for c in checks if not c[1]]
    detail = "; ".join(f"{name}: {d}" for name, _, d in checks)
    line = f"criterion {k} [{title}]: {'PASS' if ok else 'FAIL'}"
    if failed:
        line += f" (failed: {', '.join(failed)})"
    line += f" -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def table():
    return build_table(REF)


@pytest.fixture(scope="module")
def counts8(table):
    t0 = time.perf_counter()
    res = complexity_counts(table, 8, budget=300_000, n_lines=32, line_budget=60_000_000)
    return res, time.perf_counter() - t0


@pytest.fixture(scope="module")
def counts10(table):
    t0 = time.perf_counter()
    res = complexity_counts(table, 10, budget=100_000, n_lines=8, line_budget=5_000_000)
    return res, time.perf_counter() - t0


@pytest.fixture(scope="module")
def htop8(counts8):
    return find_htop(PstarEstimator(counts8[0]))


def _wrap(d, per):
    return np.abs((d + per / 2) % per - per / 2)


# ---------------------------------------------------------------------------


def test_criterion_1_geometry(table):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    idx, r, phi = sample_invariant(table, 10_000, rng)
    j, r1, p1, tau, _, _ = map_arrays(table, idx, r, phi, check_grazing=False)
    i0, r0, p0, _, _, _ = inverse_map_arrays(table, j, r1, p1, check_grazing=False)
    err_rt = max(_wrap(r0 - r, table.perimeters[idx]).max(), np.abs(p0 - phi).max())
    same_rt = bool(np.array_equal(i0, idx))
    # iota o T is an involution; T o T^{-1} = id
    a, ra, pa, _, _, _ = map_arrays(table, j, r1, -p1, check_grazing=False)
    err_inv = max(_wrap(ra - r, table.perimeters[idx]).max(), np.abs(-pa - phi).max())
    b, rb, pb, _, _, _ = inverse_map_arrays(table, idx, r, phi, check_grazing=False)
    c, rc, pc, _, _, _ = map_arrays(table, b, rb, pb, check_grazing=False)
    err_fwd = max(_wrap(rc - r, table.perimeters[idx]).max(), np.abs(pc - phi).max())
    same_inv = bool(np.array_equal(a, idx) and np.array_equal(c, idx))

    # det DT against a sixth-order central-difference Jacobian
    m = (np.abs(phi) < 1.2) & (np.abs(p1) < 1.2)
    sel = np.flatnonzero(m)[:500]
    h = 1e-4
    stencil = ((-3, -1 / 60), (-2, 9 / 60), (-1, -45 / 60), (1, 45 / 60), (2, -9 / 60), (3, 1 / 60))
    per = table.perimeters[j[sel]]
    cols = []
    valid = np.ones(sel.size, bool)
    for dr, dp in ((1.0, 0.0), (0.0, 1.0)):
        drr = np.zeros(sel.size)
        dpp = np.zeros(sel.size)
        for k, w in stencil:
            jj, rr, pp, _, _, _ = map_arrays(table, idx[sel], r[sel] + k * h * dr, phi[sel] + k * h * dp)
            valid &= jj == j[sel]
            drr += w * ((rr - r1[sel] + per / 2) % per - per / 2) / h
            dpp += w * pp / h
        cols.append(np.stack([drr, dpp], -1))
    fd = np.stack(cols, -1)[valid]
    det_fd = np.linalg.det(fd)
    expect = np.cos(phi[sel][valid]) / np.cos(p1[sel][valid])
    err_det = float(np.max(np.abs(det_fd - expect) / expect))
    D = jacobian_arrays(table, idx[sel][valid], phi[sel][valid], j[sel][valid], p1[sel][valid], tau[sel][valid])
    err_det_an = float(np.max(np.abs(np.linalg.det(D) - expect) / expect))

    x = PhasePoint(0, 0.42 * math.pi / 4, 0.0)
    y = billiard_map(table, billiard_map(table, x).next).next
    err_p2 = max(float(_wrap(y.r - x.r, table.perimeters[0])), abs(y.phi - x.phi))
    dt = time.perf_counter() - t0
    report(1, "geometry/dynamics", [
        ("round trip", same_rt and err_rt <= 1e-10, f"max err {err_rt:.2e} on 10^4 points"),
        ("iota conjugacy", same_inv and max(err_inv, err_fwd) <= 1e-10, f"max err {max(err_inv, err_fwd):.2e}"),
        ("det DT (finite differences)", err_det <= 1e-8, f"rel err {err_det:.2e} on {valid.sum()} points"),
        ("det DT (analytic)", err_det_an <= 1e-8, f"rel err {err_det_an:.2e}"),
        ("period-2 orbit", y.scatterer == 0 and err_p2 <= 1e-10, f"err {err_p2:.2e}"),
        ("runtime", dt < 60, f"{dt:.1f}s"),
    ])


def test_criterion_2_hyperbolicity(table):
    t0 = time.perf_counter()
    c1 = fit_c1(table, n_orbits=1000, length=10, seed=0)
    rep = check_hyperbolicity(table, c1, n_orbits=1000, length=10, seed=1)
    dt = time.perf_counter() - t0
    report(2, "hyperbolicity", [
        ("C1 fitted", c1 > 0, f"C1 = {c1:.4g} (Lambda = {table.lam:.5g})"),
        ("violations", rep.violations == 0, f"{rep.violations} of 1000 orbits, min ratio {rep.min_ratio:.4g}"),
        ("runtime", dt < 60, f"{dt:.1f}s"),
    ])


def test_criterion_3_pressure_identities(table, counts10):
    res, t_count = counts10
    t0 = time.perf_counter()
    ns = [n for n in res.n_values if n >= 1]
    q0 = all(qn(res.classes[n], 0.0) == res.counts[n] for n in ns)
    grid = [0.0, 0.5, 1.0, 2.0, 4.0, 8.0]
    fc = all(forconv_holds(res.classes[n], t, s, table.tau_min) for n in ns for t in grid for s in grid if t > s)
    rng = np.random.default_rng(7)
    hold = []
    for _ in range(20):
        t, s = rng.uniform(0, 10, 2)
        eta = rng.uniform(0.01, 0.99)
        hold.append(all(hoelder_holds(res.classes[n], t, s, eta)[2] for n in ns))
    est = PstarEstimator(res)
    p0 = est(0.0)
    hs = estimate_hstar(res.n_values[1:], res.counts[1:])
    dt = time.perf_counter() - t0 + t_count
    report(3, "pressure identities", [
        ("Q_n(0) = count", q0, f"n <= {max(ns)}"),
        ("monotone comparison", fc, f"{len(ns)} depths x {len(grid) * (len(grid) - 1) // 2} pairs"),
        ("Hoelder", all(hold), f"{sum(hold)}/20 triples"),
        ("P_*(0) = h_*", abs(p0.value - hs.value) <= p0.error + hs.error,
         f"P_*(0) = {p0.value:.4f}+-{p0.error:.4f}, h_* = {hs.value:.4f}+-{hs.error:.4f}"),
        ("runtime", dt < 600, f"{dt:.0f}s"),
    ])


def test_criterion_4_slope_bounds(table, counts8):
    res, t_count = counts8
    t0 = time.perf_counter()
    grid = np.round(np.arange(0.0, 8.01, 0.5), 10)
    cur = pressure_curve(res, grid, table.tau_min, table.tau_max)
    sl = cur.pslope_left[1:]
    tol = 2 * cur.slope_err[1:]
    inside = (sl >= -table.tau_max - tol) & (sl <= -table.tau_min + tol)
    d, ctol = cur.convexity_defects()
    conv = d >= -ctol
    dt = time.perf_counter() - t0 + t_count
    report(4, "slope bounds", [
        ("left slopes in [-tau_max, -tau_min]", bool(inside.all()),
         f"{int(inside.sum())}/{inside.size}, slopes {sl.min():.3f}..{sl.max():.3f}"),
        ("convexity", bool(conv.all()), f"{int(conv.sum())}/{conv.size} within error"),
        ("runtime", dt < 600, f"{dt:.0f}s"),
    ])


def test_criterion_5_root_and_conditions(table, counts8, htop8):
    res, t_count = counts8
    t0 = time.perf_counter()
    h = htop8
    width = h.bracket[1] - h.bracket[0]
    theta0 = default_theta0(table.tau_min)
    grid = np.round(np.linspace(0.0, h.root, 11), 10)
    cur = pressure_curve(res, grid, table.tau_min, table.tau_max)
    checked, good = 0, 0
    for t, s in zip(cur.t_grid[1:], cur.pslope_left[1:]):
        try:
            v = s_star(float(t), float(s), theta0, table.tau_min, table.tau_max)
        except ValueError:
            continue
        checked += 1
        good += v.check_ok
    tc_ok = table.t_c == t_c(table.lam, table.tau_min, table.tau_max) and math.isclose(
        table.t_c, math.log(1 + 2 * table.tau_min * table.kmin) / (table.tau_max - table.tau_min), rel_tol=1e-15)

    wide = build_table(WIDE)
    wres = complexity_counts(wide, 6, budget=300_000, n_lines=32)
    wh = find_htop(PstarEstimator(wres), t_hi=2.0)
    whs = estimate_hstar(wres.n_values[1:], wres.counts[1:])
    s0 = estimate_s0(wide, 1.45, 20, 100_000, seed=0)
    rep = check_conditions(wide.tau_min, wide.tau_max, wide.lam, whs.value, s0.estimate, wh.root,
                           PstarEstimator(wres)(wh.root).value)
    fl = rep.conditions["flows"]
    # margin stays positive when h_top is lowered by its error bar
    robust = fl.margin - wh.err_t * wide.tau_min
    dt = time.perf_counter() - t0 + t_count
    report(5, "root and conditions", [
        ("h_top bracket", width <= 2e-3 and h.bracket[0] <= h.root <= h.bracket[1],
         f"h_top = {h.root:.4f} in [{h.bracket[0]:.5f}, {h.bracket[1]:.5f}]"),
        ("s_* check", checked > 0 and good == checked, f"{good}/{checked} admissible grid points"),
        ("t_C formula", tc_ok, f"t_C = {table.t_c:.17g}"),
        ("cond_flows (wide table)", fl.holds and robust > 0,
         f"R = (0.38, 0.18): h_top = {wh.root:.3f}+-{wh.err_t:.3f}, tau_min = {wide.tau_min:.4f}, "
         f"s0 = {s0.estimate:.3f}, margin = {fl.margin:+.3f} (after error {robust:+.3f})"),
        ("runtime", dt < 1800, f"{dt:.0f}s"),
    ])


def test_criterion_6_curves(table, counts10):
    res, _ = counts10
    t0 = time.perf_counter()
    theta0 = default_theta0(table.tau_min)
    d0 = default_delta0(table)
    delta = d0 / 4
    rng = np.random.default_rng(11)
    exact = []
    nest = []
    for sd in sample_seeds(table, 3, delta, rng):
        ladder = scale_ladder(grow_family(table, sd, 5, delta), 3)
        for fam in ladder:
            for rec in fam.history:
                for t in (0.0, table.t_c / 2, table.t_c, 1.0):
                    G, L, S, _ = rec.exact_sums(t)
                    exact.append(G == L + S)
        nest += [check_nesting(ladder[k + 1], ladder[k]) for k in range(2)]
    for sd in sample_seeds(table, 20, (delta * 1e-3, d0), rng):
        fam = grow_family(table, sd, 4, delta)
        for rec in fam.history:
            G, L, S, _ = rec.exact_sums(table.t_c)
            exact.append(G == L + S)
    nest_ok = all(c > 0 and c == o for c, o in nest)

    comp = verify_complexity(table, 8, samples=100, seed=0)
    c1 = fit_c1(table, seed=0)
    ns = n_step_expansion_check(table, table.t_c / 2, theta0, comp.K, samples=100, seed=0)
    m1 = ns.n0_recipe if ns.n0_recipe is not None else 2 * ns.n0
    growth = []
    for t in (table.t_c / 2, table.t_c):
        lq = {n: log_qn(res.classes[n], t) for n in res.n_values if n >= 1}
        growth.append(growth_lemma_check(table, t, delta, m1, theta0, comp.K, c1, lq, samples=100, seed=1))
    g_ok = all(g.all_passed for g in growth)
    dt = time.perf_counter() - t0
    report(6, "curve machinery", [
        ("partition G = L + S", all(exact), f"{sum(exact)}/{len(exact)} exact"),
        ("nesting (3 scales, n = 5)", nest_ok, ", ".join(f"{o}/{c}" for c, o in nest)),
        ("complexity <= K n + 1", comp.passed, f"K = {comp.K}, max components {comp.max_components}"),
        ("n-step expansion", ns.all_passed,
         f"n0 = {ns.n0} (recipe {ns.n0_recipe}), delta_bar = {ns.delta_bar}, "
         f"worst G/bound {max(ns.ratios['worst_G_over_bound'].values()):.4f}"),
        ("growth lemma", g_ok, "; ".join(
            f"t = {g.t_values[0]:.4f}: I/bound {g.ratios['I_over_bound']:.3g}, small-n {g.ratios['I_small_over_bound']:.3g}, "
            f"G/bound {g.ratios['G_over_bound']:.3g}, I empty after n = {g.ratios['last_nonempty_I']}" for g in growth)
         + f"; m1 = {m1}, 100 curves"),
        ("runtime", dt < 1800, f"{dt:.0f}s"),
    ])


def test_criterion_7_ssp(table):
    t0 = time.perf_counter()
    delta = default_delta0(table) / 4
    checks = []
    for t in (table.t_c / 2, table.t_c):
        d = ssp_check(table, t, delta, n_max=6, n_long=10, n_short=5, seed=0)
        tail = [k for k, n in enumerate(d.n_values) if d.n_t is not None and n >= d.n_t]
        worst = float(np.nanmax(d.ratios[:, tail])) if tail else math.nan
        checks += [
            (f"n_t at t = {t:.4f}", d.n_t is not None and worst <= 0.25,
             f"n_t = {d.n_t}, max S/G beyond n_t {worst:.3f}"),
            (f"summand decay at t = {t:.4f}", d.decay_rate < 0, f"rate {d.decay_rate:.3f}/step"),
            (f"time reversal at t = {t:.4f}", bool(d.agree),
             f"max z = {d.max_z:.2f}, reversed n_t = {d.reversed.n_t}"),
        ]
    dt = time.perf_counter() - t0
    checks.append(("runtime", dt < 1800, f"{dt:.0f}s"))
    report(7, "SSP below t_C", checks)


def test_criterion_8_ulam(table, counts8, htop8):
    res, _ = counts8
    t0 = time.perf_counter()
    h = htop8
    grid = np.linspace(0.0, h.root, 5)
    tr256 = sample_transitions(table, 256, 256, 8, seed=0)
    scan = ulam_pressure_scan(table, grid, 256, 256, 8, seed=0, transitions=tr256)
    est = PstarEstimator(res)
    pst = [est(t) for t in grid]
    diff = np.abs(scan.log_lambda - np.array([p.value for p in pst]))
    bars = scan.err + np.array([p.error for p in pst])
    agree = diff <= bars
    cloud = singularity_cloud(table)
    out = {}
    for n, tr in ((256, tr256), (128, sample_transitions(table, 128, 128, 8, seed=0))):
        op = build_operator(table, h.root, transitions=tr)
        meas = equilibrium_measure(table, op, leading_eigen(op), cloud)
        out[n] = (meas, flow_mme(table, op, meas, h.root, h.bracket))
    m = out[256][0]
    adapt = abs(out[256][0].adapt_integral / out[128][0].adapt_integral - 1)
    flad = abs(out[256][1].flad_integral / out[128][1].flad_integral - 1)
    dt = time.perf_counter() - t0
    report(8, "Ulam cross-validation", [
        ("log lambda vs P_*", bool(agree.all()), ", ".join(
            f"t={t:.2f}: {a:.3f} vs {p.value:.3f} (|d|={x:.3f} <= {b:.3f})"
            for t, a, p, x, b in zip(grid, scan.log_lambda, pst, diff, bars))),
        ("measure", bool(np.all(m.weights >= 0)) and math.isclose(m.weights.sum(), 1.0, rel_tol=1e-12)
         and m.support_fraction == 1.0, f"support {m.support_fraction:.4f}, sum {m.weights.sum():.15f}"),
        ("adapt stable", adapt < 0.1, f"{out[128][0].adapt_integral:.4f} -> {m.adapt_integral:.4f} ({100 * adapt:.1f}%)"),
        ("flad stable", flad < 0.1,
         f"{out[128][1].flad_integral:.4f} -> {out[256][1].flad_integral:.4f} ({100 * flad:.1f}%)"),
        ("runtime", dt < 1800, f"{dt:.0f}s"),
    ])


def test_criterion_9_determinism(tmp_path):
    cfg = tmp_path / "table.json"
    cfg.write_text('{"scatterers": [{"center": [0.0, 0.0], "radius": 0.42}, '
                   '{"center": [0.5, 0.5], "radius": 0.27}]}')
    params = {"n_max": 4, "budget": 30_000, "n_lines": 4, "line_budget": 500_000, "s0_samples": 5000,
              "cond_s0_n": 10, "phi0": [1.4], "s0_n": [10], "ssp_n_max": 3, "ssp_curves": 3, "growth_samples": 10,
              "complexity_n_max": 4, "ulam_boxes": 16, "ulam_samples": 4, "dump_operator": True}
    runs = {}
    for name, cache in (("a", ""), ("b", ""), ("fresh", str(tmp_path / "cache")), ("served", str(tmp_path / "cache"))):
        runs[name] = run(ExperimentSpec(str(cfg), "full-report", dict(params), str(tmp_path / name), seed=3),
                         cache_dir=cache)

    def same(x, y):
        files = runs[x].artifacts
        return files == runs[y].artifacts and all(
            (tmp_path / x / f).read_bytes() == (tmp_path / y / f).read_bytes() for f in files)

    report(9, "determinism", [
        ("repeat, same seed", same("a", "b"), f"{len(runs['a'].artifacts)} artifacts bit-identical"),
        ("cache-served vs fresh", same("fresh", "served") and same("a", "served")
         and len(runs["served"].cache_hits) > 0, f"cache hits {sorted(runs['served'].cache_hits)}"),
    ])
