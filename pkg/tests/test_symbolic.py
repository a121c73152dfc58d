import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sinai_mme.billiard import PhasePoint, sample_invariant
from sinai_mme.errors import GrazingOrbit, NotConverged
from sinai_mme.symbolic import (
    brute_force_counts,
    class_data,
    complexity_counts,
    estimate_hstar,
    estimate_s0,
    estimate_slope,
    itinerary,
    itinerary_hashes,
    tail_drift,
    write_counts_csv,
    write_s0_csv,
)


@pytest.fixture(scope="module")
def small_counts(ref_table):
    return complexity_counts(ref_table, 3, budget=100_000, n_lines=16, line_budget=2_000_000)


def test_counts_dominate_brute_force(ref_table, small_counts):
    # both are lower bounds; the adaptive count must not lose to a coarse grid
    for n in (1, 2):
        assert small_counts.counts[n] >= brute_force_counts(ref_table, n, m=300)
    assert small_counts.counts[0] == 2


def test_depth_one_count_exact(ref_table):
    res = complexity_counts(ref_table, 1, budget=300_000, n_lines=32)
    assert res.counts[1] == brute_force_counts(ref_table, 1, m=1500) == 44


def test_counts_monotone_and_half_bounded(small_counts):
    c = small_counts.counts
    assert all(b >= a for a, b in zip(c, c[1:]))
    assert all(h <= f for h, f in zip(small_counts.counts_half, c))
    assert all(0 <= m <= 1 for m in small_counts.missing_fraction())


def test_class_data_tau_bounds(ref_table, small_counts):
    for n in small_counts.n_values[1:]:
        cd = small_counts.classes[n]
        assert cd.count == small_counts.counts[n]
        assert np.all(cd.min_tau >= n * ref_table.tau_min - 1e-12)
        assert np.all(cd.min_tau <= n * ref_table.tau_max * (1 + 1e-6))


def test_itinerary_agrees_with_hashes(ref_table, rng):
    idx, r, phi = sample_invariant(ref_table, 20, rng, margin=1e-3)
    H, B, _ = itinerary_hashes(ref_table, idx, r, phi, 4)
    for k in range(20):
        it = itinerary(ref_table, PhasePoint(int(idx[k]), float(r[k]), float(phi[k])), 4)
        assert it.birkhoff_tau == pytest.approx(B[k, 4], rel=1e-12)
    same = [(a, b) for a in range(20) for b in range(a) if H[a, 4] == H[b, 4]]
    for a, b in same:
        ia = itinerary(ref_table, PhasePoint(int(idx[a]), float(r[a]), float(phi[a])), 4)
        ib = itinerary(ref_table, PhasePoint(int(idx[b]), float(r[b]), float(phi[b])), 4)
        assert ia.symbols == ib.symbols


def test_itinerary_grazing(ref_table):
    with pytest.raises(GrazingOrbit):
        itinerary(ref_table, PhasePoint(0, 0.0, math.pi / 2), 3)


def test_class_data_merge_is_union(ref_table, rng):
    idx, r, phi = sample_invariant(ref_table, 400, rng)
    H, B, _ = itinerary_hashes(ref_table, idx, r, phi, 3)
    a = class_data(H[:200, 3], B[:200, 3], 3)
    b = class_data(H[200:, 3], B[200:, 3], 3)
    full = class_data(H[:, 3], B[:, 3], 3)
    m = a.merge(b)
    assert m.count == full.count
    assert np.allclose(np.sort(m.min_tau), np.sort(full.min_tau))


@given(st.floats(0.1, 3.0), st.floats(-2.0, 2.0), st.integers(4, 12))
def test_slope_exact_on_lines(h, c, N):
    n = np.arange(1, N + 1)
    est = estimate_slope(n, h * n + c)
    assert est.value == pytest.approx(h, abs=1e-9)
    assert est.error < 1e-9


def test_slope_error_covers_drift():
    n = np.arange(1, 9)
    logs = 1.5 * n + 0.8 * np.log(n)  # subexponential correction
    est = estimate_slope(n, logs)
    assert abs(est.value - 1.5) <= est.error + 0.8 / 7
    assert tail_drift(n, logs) > 0
    with pytest.raises(NotConverged):
        estimate_slope([1, 2], [0.0, 1.0])


def test_hstar_of_pure_exponential():
    n = list(range(1, 9))
    est = estimate_hstar(n, [3 * 2**k for k in n])
    assert est.value == pytest.approx(math.log(2), abs=1e-12)


def test_s0_estimate_bounds(ref_table):
    e = estimate_s0(ref_table, 1.4, 5, 5000, seed=1)
    assert 0 <= e.estimate <= 1
    assert np.all(np.diff(e.running_max) >= 0)
    assert e.running_max[-1] == e.estimate
    # a larger phi0 can only lower the fraction on the same orbits
    assert estimate_s0(ref_table, 1.5, 5, 5000, seed=1).estimate <= e.estimate
    assert estimate_s0(ref_table, 0.0, 5, 100, seed=1).estimate == 1.0


def test_csv_writers(tmp_path, ref_table, small_counts):
    write_counts_csv(tmp_path / "c.csv", small_counts)
    rows = (tmp_path / "c.csv").read_text().splitlines()
    assert rows[0] == "n,count,converged_flag,wall_time" and len(rows) == 5
    write_s0_csv(tmp_path / "s.csv", [estimate_s0(ref_table, 1.4, 3, 100)])
    assert (tmp_path / "s.csv").read_text().startswith("phi0,n,n_samples,estimate,discard_fraction")
