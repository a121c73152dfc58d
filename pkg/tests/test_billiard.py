import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sinai_mme.billiard import (
    PhasePoint,
    billiard_map,
    billiard_map_inverse,
    build_table,
    c1_theory,
    check_horizon,
    check_hyperbolicity,
    corridor_clearance,
    fit_c1,
    inverse_map_arrays,
    jacobian,
    jacobian_arrays,
    load_table_config,
    map_arrays,
    orbit,
    sample_invariant,
    stable_cone,
    table_from_config,
    unstable_cone,
)
from sinai_mme.errors import GrazingInput, InfiniteHorizon, OverlappingScatterers


def _circ(a, b, per):
    d = (a - b) % per
    return np.minimum(d, per - d)


def test_reference_constants(ref_table):
    tb = ref_table
    # closest approach is along the diagonal: sqrt(0.5) - 0.42 - 0.27
    assert tb.tau_min == pytest.approx(math.sqrt(0.5) - 0.69, abs=1e-15)
    assert tb.kmin == pytest.approx(1 / 0.42)
    assert tb.lam == pytest.approx(1 + 2 * tb.tau_min / 0.42)
    assert tb.t_c == pytest.approx(math.log(tb.lam) / (tb.tau_max - tb.tau_min), rel=1e-15)
    assert tb.horizon_ok
    assert 1.40 < tb.tau_max < 1.43


def test_overlap_and_corridor_rejected():
    with pytest.raises(OverlappingScatterers):
        build_table([((0, 0), 0.4), ((0.5, 0.5), 0.35)])
    with pytest.raises(OverlappingScatterers):
        build_table([((0, 0), 0.55)])
    with pytest.raises(InfiniteHorizon):
        build_table([((0, 0), 0.2)])
    tb = build_table([((0, 0), 0.2)], strict=False)
    assert not tb.horizon_ok and math.isinf(tb.tau_max)


def test_corridor_clearance_sign(ref_table):
    _, clear = corridor_clearance(ref_table)
    assert clear < 0
    tb = build_table([((0, 0), 0.2)], strict=False)
    d, clear = corridor_clearance(tb)
    assert clear > 0 and d is not None


def test_horizon_report_is_lower_bound(ref_table):
    rep = check_horizon(ref_table, n_rays=2000, seed=3)
    assert rep.horizon_ok
    assert rep.tau_max_estimate <= ref_table.tau_max * (1 + 1e-6)


def test_head_on_orbit_period_two(ref_table):
    # the diagonal from the big disk hits the small one head on and bounces straight back
    x = PhasePoint(0, 0.42 * math.pi / 4, 0.0)
    a = billiard_map(ref_table, x)
    b = billiard_map(ref_table, a.next)
    assert a.next.scatterer == 1
    assert a.tau == pytest.approx(ref_table.tau_min, abs=1e-12)
    assert a.next.r == pytest.approx(0.27 * 5 * math.pi / 4, abs=1e-12)
    assert abs(a.next.phi) < 1e-12
    assert b.next.scatterer == 0
    assert _circ(b.next.r, x.r, ref_table.perimeters[0]) < 1e-10
    assert abs(b.next.phi) < 1e-10


@given(st.integers(0, 10_000))
def test_inverse_round_trip(ref_table, seed):
    rng = np.random.default_rng(seed)
    idx, r, phi = sample_invariant(ref_table, 50, rng, margin=1e-4)
    j, r1, p1, tau, _, _ = map_arrays(ref_table, idx, r, phi)
    i0, r0, p0, tau0, _, _ = inverse_map_arrays(ref_table, j, r1, p1)
    assert np.array_equal(i0, idx)
    assert np.all(_circ(r0, r, ref_table.perimeters[idx]) < 1e-10)
    assert np.allclose(p0, phi, atol=1e-10)
    assert np.allclose(tau0, tau, atol=1e-10)


def test_involution_conjugacy(ref_table, rng):
    idx, r, phi = sample_invariant(ref_table, 500, rng, margin=1e-4)
    a = inverse_map_arrays(ref_table, idx, r, phi)
    b = map_arrays(ref_table, idx, r, -phi)
    assert np.array_equal(a[0], b[0])
    assert np.allclose(a[2], -b[2], atol=1e-12)
    x = PhasePoint(int(idx[0]), float(r[0]), float(phi[0]))
    y = billiard_map_inverse(ref_table, billiard_map(ref_table, x).next).next
    assert abs(y.phi - x.phi) < 1e-10


def test_flight_at_least_tau_min(ref_table, rng):
    idx, r, phi = sample_invariant(ref_table, 5000, rng)
    tau = map_arrays(ref_table, idx, r, phi, check_grazing=False)[3]
    assert tau.min() >= ref_table.tau_min - 1e-12
    assert tau.max() <= ref_table.tau_max * (1 + 1e-6)


def test_grazing_input_raises(ref_table):
    with pytest.raises(GrazingInput):
        billiard_map(ref_table, PhasePoint(0, 0.1, math.pi / 2))


def test_jacobian_matches_finite_differences(ref_table, rng):
    idx, r, phi = sample_invariant(ref_table, 200, rng, margin=0.05)
    h = 1e-6
    for k in range(len(idx)):
        x = PhasePoint(int(idx[k]), float(r[k]), float(phi[k]))
        D = jacobian(ref_table, x)
        y = billiard_map(ref_table, x).next
        cols = []
        for dr, dp in ((h, 0.0), (0.0, h)):
            yp = billiard_map(ref_table, PhasePoint(x.scatterer, x.r + dr, x.phi + dp)).next
            ym = billiard_map(ref_table, PhasePoint(x.scatterer, x.r - dr, x.phi - dp)).next
            if yp.scatterer != y.scatterer or ym.scatterer != y.scatterer:
                break
            per = ref_table.perimeters[y.scatterer]
            d_r = ((yp.r - ym.r + per / 2) % per - per / 2) / (2 * h)
            cols.append([d_r, (yp.phi - ym.phi) / (2 * h)])
        else:
            fd = np.array(cols).T
            assert np.allclose(D, fd, rtol=1e-4, atol=1e-4 * np.abs(D).max())
            assert np.linalg.det(D) == pytest.approx(math.cos(x.phi) / math.cos(y.phi), rel=1e-10)


def test_cone_invariance(ref_table, rng):
    lo, hi = unstable_cone(ref_table)
    idx, r, phi = sample_invariant(ref_table, 2000, rng, margin=1e-3)
    j, r1, p1, tau, _, _ = map_arrays(ref_table, idx, r, phi)
    D = jacobian_arrays(ref_table, idx, phi, j, p1, tau)
    for s in (lo, hi, 0.5 * (lo + hi)):
        w = D @ np.array([1.0, s])
        slope = w[:, 1] / w[:, 0]
        assert np.all(slope >= lo - 1e-9) and np.all(slope <= hi * (1 + 1e-9))
    assert stable_cone(ref_table) == (-hi, -lo)


def test_hyperbolicity_fit_and_theory(ref_table):
    c1 = fit_c1(ref_table, n_orbits=200, length=6)
    rep = check_hyperbolicity(ref_table, c1, n_orbits=200, length=6)
    assert rep.violations == 0
    assert 0 < c1_theory(ref_table) <= c1


def test_orbit_and_config_roundtrip(ref_table, tmp_path):
    idx, r, phi, tau = orbit(ref_table, PhasePoint(0, 0.3, 0.2), 5)
    assert len(idx) == 6 and len(tau) == 5
    p = tmp_path / "t.toml"
    p.write_text('[[scatterers]]\ncenter = [0.0, 0.0]\nradius = 0.42\n'
                 '[[scatterers]]\ncenter = [0.5, 0.5]\nradius = 0.27\n')
    tb = table_from_config(load_table_config(p))
    assert tb.fingerprint() == ref_table.fingerprint()


def test_diagonal_corridor_example():
    with pytest.raises(InfiniteHorizon):
        build_table([((0, 0), 0.3), ((0.5, 0.5), 0.3)])
    tb = build_table([((0, 0), 0.3), ((0.5, 0.5), 0.3)], strict=False)
    assert tb.horizon.corridor_clearance == pytest.approx(math.sqrt(0.5) - 0.6)


def test_tau_min_against_boundary_minimization(ref_table):
    # brute force over boundary-point pairs across 5 x 5 translates
    a = np.linspace(0, 2 * np.pi, 721)[:-1]
    p0 = 0.42 * np.stack([np.cos(a), np.sin(a)], 1)
    best = np.inf
    for kx in range(-2, 3):
        for ky in range(-2, 3):
            c = np.array([0.5 + kx, 0.5 + ky])
            p1 = c + 0.27 * np.stack([np.cos(a), np.sin(a)], 1)
            d = np.sqrt(((p0[:, None, :] - p1[None, :, :]) ** 2).sum(-1)).min()
            best = min(best, d)
    assert ref_table.tau_min == pytest.approx(best, abs=1e-4)
    assert ref_table.tau_min <= best + 1e-12
