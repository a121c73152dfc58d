"""Itineraries, component counting for M \\ S_n, h_* and the grazing exponent s_0.

Components of M \\ S_n are approximated by forward itinerary classes: two
points share a class at depth n when their first n collisions hit the same
scatterer translates.  The adaptive quadtree in :func:`complexity_counts`
refines cells whose corners disagree, so every class it reports is realised
by an actual orbit and the count is a lower bound.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .billiard import (
    GRAZING_TOL,
    HALF_PI,
    BilliardTable,
    PhasePoint,
    inverse_map_arrays,
    map_arrays,
    sample_invariant,
)
from .errors import BudgetExceeded, GrazingOrbit, NotConverged

_MIX1 = np.uint64(0x9E3779B97F4A7C15)
_MIX2 = np.uint64(0xBF58476D1CE4E5B9)
_MIX3 = np.uint64(0x94D049BB133111EB)


@dataclass(frozen=True)
class Itinerary:
    start: int
    symbols: tuple  # ((scatterer, (kx, ky)), ...)
    birkhoff_tau: float
    min_cos: float

    def __len__(self):
        return len(self.symbols)


def itinerary(table: BilliardTable, x: PhasePoint, n: int, inverse: bool = False) -> Itinerary:
    """Symbols and Birkhoff sum of tau along the first n collisions of x.

    Raises :class:`GrazingOrbit` when the orbit enters the grazing band.
    """
    step = inverse_map_arrays if inverse else map_arrays
    i, r, phi = np.array([x.scatterer]), np.array([x.r]), np.array([x.phi])
    if abs(x.phi) >= HALF_PI - GRAZING_TOL:
        raise GrazingOrbit("starting point is grazing")
    syms = []
    total = 0.0
    min_cos = math.cos(x.phi)
    for _ in range(n):
        i, r, phi, s, kx, ky = step(table, i, r, phi, check_grazing=False)
        if abs(phi[0]) >= HALF_PI - GRAZING_TOL:
            raise GrazingOrbit("orbit enters the grazing band")
        syms.append((int(i[0]), (int(kx[0]), int(ky[0]))))
        total += float(s[0])
        min_cos = min(min_cos, math.cos(phi[0]))
    return Itinerary(x.scatterer, tuple(syms), total, min_cos)


# ---------------------------------------------------------------------------
# hashed itineraries (vectorized)


def _mix(h):
    h = h ^ (h >> np.uint64(30))
    h = h * _MIX2
    h = h ^ (h >> np.uint64(27))
    h = h * _MIX3
    return h ^ (h >> np.uint64(31))


def itinerary_hashes(table, idx, r, phi, n, inverse=False):
    """Per-depth itinerary hashes and Birkhoff sums.

    Returns ``(H, B, min_cos)`` with ``H[:, k]`` a 64-bit hash of the depth-k
    itinerary (start scatterer plus k symbols) and ``B[:, k]`` the sum of the
    first k flights.
    """
    step = inverse_map_arrays if inverse else map_arrays
    m = len(idx)
    H = np.empty((m, n + 1), dtype=np.uint64)
    B = np.zeros((m, n + 1))
    h = _mix(np.asarray(idx, dtype=np.uint64) + np.uint64(1))
    H[:, 0] = h
    min_cos = np.cos(phi)
    i, rr, pp = np.asarray(idx), np.asarray(r, dtype=float), np.asarray(phi, dtype=float)
    with np.errstate(over="ignore"):
        for k in range(1, n + 1):
            i, rr, pp, s, kx, ky = step(table, i, rr, pp, check_grazing=False)
            sym = (
                i.astype(np.uint64)
                + np.uint64(64) * (kx + 512).astype(np.uint64)
                + np.uint64(64 * 1024) * (ky + 512).astype(np.uint64)
            )
            h = _mix(h * _MIX1 + sym + np.uint64(k))
            H[:, k] = h
            B[:, k] = B[:, k - 1] + s
            min_cos = np.minimum(min_cos, np.cos(pp))
    return H, B, min_cos


# ---------------------------------------------------------------------------
# class data and adaptive counting


@dataclass
class ClassData:
    """Distinct itinerary classes at one depth.

    ``min_tau``/``max_tau`` are the smallest / largest sampled Birkhoff sums
    in each class; the class sup of exp(-t * Sigma_n tau) is exp(-t * min_tau).
    """

    n: int
    keys: np.ndarray
    min_tau: np.ndarray
    max_tau: np.ndarray
    samples: np.ndarray

    @property
    def count(self) -> int:
        return len(self.keys)

    def merge(self, other: "ClassData") -> "ClassData":
        """Union of two class sets (associative, commutative)."""
        return _reduce_classes(
            self.n,
            np.concatenate([self.keys, other.keys]),
            np.concatenate([self.min_tau, other.min_tau]),
            np.concatenate([self.max_tau, other.max_tau]),
            np.concatenate([self.samples, other.samples]),
        )


def _reduce_classes(n, keys, mn, mx, cnt) -> ClassData:
    order = np.argsort(keys, kind="stable")
    keys, mn, mx, cnt = keys[order], mn[order], mx[order], cnt[order]
    if keys.size == 0:
        return ClassData(n, keys, mn, mx, cnt)
    start = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
    return ClassData(
        n,
        keys[start],
        np.minimum.reduceat(mn, start),
        np.maximum.reduceat(mx, start),
        np.add.reduceat(cnt, start),
    )


def class_data(H_col, B_col, n) -> ClassData:
    H_col = np.asarray(H_col, dtype=np.uint64)
    B_col = np.asarray(B_col, dtype=float)
    return _reduce_classes(n, H_col, B_col, B_col.copy(), np.ones(len(H_col), dtype=np.int64))


class _ClassAccumulator:
    """Streaming union of per-depth classes; memory stays O(#classes)."""

    def __init__(self, n_max, flush=1_000_000):
        self.n_max = n_max
        self.flush = flush
        self.done = [class_data(np.empty(0, np.uint64), np.empty(0), k) for k in range(n_max + 1)]
        self.pending = []
        self.n_pending = 0

    def add(self, H, B):
        self.pending.append((H, B))
        self.n_pending += len(H)
        if self.n_pending >= self.flush:
            self._compact()

    def _compact(self):
        if not self.pending:
            return
        H = np.concatenate([p[0] for p in self.pending])
        B = np.concatenate([p[1] for p in self.pending])
        for k in range(self.n_max + 1):
            self.done[k] = self.done[k].merge(class_data(H[:, k], B[:, k], k))
        self.pending = []
        self.n_pending = 0

    def counts(self):
        self._compact()
        return [c.count for c in self.done]

    def classes(self):
        self._compact()
        return {k: c for k, c in enumerate(self.done)}


@dataclass
class CountResult:
    """Outcome of one counting run (all depths up to n_max).

    ``counts_half`` holds the counts after the first half of the transversal
    lines; its gap to ``counts`` is the convergence diagnostic.
    """

    n_values: list
    counts: list
    converged: list
    classes: dict = field(repr=False)
    counts_half: list = field(default_factory=list)
    classes_half: dict = field(default_factory=dict, repr=False)
    n_points: int = 0
    levels: int = 0
    budget_exceeded: bool = False
    wall_time: float = 0.0
    history: list = field(default_factory=list, repr=False)

    def entry(self, n):
        k = self.n_values.index(n)
        return {
            "n": n,
            "count": self.counts[k],
            "converged": self.converged[k],
            "wall_time": self.wall_time,
        }

    def missing_fraction(self):
        """Relative count gain of the second half of the lines, per depth."""
        if not self.counts_half:
            return [0.0] * len(self.counts)
        return [(c - h) / c if c else 0.0 for c, h in zip(self.counts, self.counts_half)]


def _quadtree(table, n_max, grid, floor, budget, phi_margin, inverse, acc):
    """Adaptive quadtree over each chart; returns (points, levels, hit, history)."""
    k_sc = table.n_scatterers
    pmax = HALF_PI - phi_margin
    # integer lattice: cell side at level L is 2**(LMAX - L) units
    LMAX = 21
    if grid > 256:
        raise ValueError("grid must be <= 256")

    def evaluate(sc, ix, iy):
        span = float(grid * 2**LMAX)
        r = ix / span * table.perimeters[sc]
        phi = -pmax + iy / span * (2 * pmax)
        return itinerary_hashes(table, sc, r, phi, n_max, inverse=inverse)

    def pack(sc, ix, iy):
        # 64 bits: scatterer | 30 bits ix | 30 bits iy
        return (sc.astype(np.int64) << 60) | (ix << 30) | iy

    side0 = 2**LMAX
    g = np.arange(grid + 1, dtype=np.int64) * side0
    gx, gy = np.meshgrid(g, g, indexing="ij")
    sc0 = np.repeat(np.arange(k_sc), gx.size)
    ix0 = np.tile(gx.ravel(), k_sc)
    iy0 = np.tile(gy.ravel(), k_sc)
    H, B, _ = evaluate(sc0, ix0, iy0)
    acc.add(H, B)
    keys = pack(sc0, ix0, iy0)
    order = np.argsort(keys)
    keys, Hn_max = keys[order], H[order, n_max]
    n_points = len(keys)

    def lookup(sc, ix, iy):
        return Hn_max[np.searchsorted(keys, pack(sc, ix, iy))]

    c = np.arange(grid, dtype=np.int64) * side0
    cx, cy = np.meshgrid(c, c, indexing="ij")
    cells = (np.repeat(np.arange(k_sc), cx.size), np.tile(cx.ravel(), k_sc), np.tile(cy.ravel(), k_sc))
    side = side0
    diam_unit = math.hypot(table.perimeters.max(), 2 * pmax) / (grid * 2**LMAX)
    history = [acc.counts()]
    level = 0
    hit = False
    while True:
        sc, ix, iy = cells
        hs = [lookup(sc, ix + dx, iy + dy) for dx, dy in ((0, 0), (side, 0), (0, side), (side, side))]
        flag = (hs[0] != hs[1]) | (hs[0] != hs[2]) | (hs[0] != hs[3])
        sc, ix, iy = sc[flag], ix[flag], iy[flag]
        if sc.size == 0 or side * diam_unit / 2 < floor or side < 2:
            break
        half = side // 2
        offs = ((half, 0), (0, half), (half, half), (side, half), (half, side))
        nsc = np.concatenate([sc] * 5)
        nix = np.concatenate([ix + dx for dx, _ in offs])
        niy = np.concatenate([iy + dy for _, dy in offs])
        nk, first = np.unique(pack(nsc, nix, niy), return_index=True)
        new = ~np.isin(nk, keys, assume_unique=True)
        if n_points + int(new.sum()) > budget:
            hit = True
            break
        sel = first[new]
        H, B, _ = evaluate(nsc[sel], nix[sel], niy[sel])
        acc.add(H, B)
        keys = np.concatenate([keys, nk[new]])
        Hn_max = np.concatenate([Hn_max, H[:, n_max]])
        order = np.argsort(keys, kind="stable")
        keys, Hn_max = keys[order], Hn_max[order]
        n_points = len(keys)
        cells = (
            np.concatenate([sc] * 4),
            np.concatenate([ix, ix + half, ix, ix + half]),
            np.concatenate([iy, iy, iy + half, iy + half]),
        )
        side = half
        level += 1
        history.append(acc.counts())
    return n_points, level, hit, history


def _line_scan(table, n_max, sc, r_lines, m0, floor, phi_margin, inverse, acc, budget):
    """Bisect along vertical lines r = const of one chart.

    Singularity curves of T^n are decreasing in (r, phi), so every vertical
    line crosses them transversally.  Intervals whose endpoints carry
    different depth-n_max itineraries are halved until narrower than
    ``floor``; every evaluated point feeds ``acc``.  Returns (points, hit).
    """
    pmax = HALF_PI - phi_margin
    grid = np.linspace(-pmax, pmax, m0 + 1)
    line = np.repeat(np.arange(len(r_lines)), m0 + 1)
    ph = np.tile(grid, len(r_lines))
    H, B, _ = itinerary_hashes(table, np.full(ph.size, sc), r_lines[line], ph, n_max, inverse=inverse)
    acc.add(H, B)
    used = ph.size
    h = H[:, n_max].reshape(len(r_lines), m0 + 1)
    diff = h[:, 1:] != h[:, :-1]
    li, ki = np.nonzero(diff)
    lo, hi = grid[ki], grid[ki + 1]
    hlo, hhi = h[li, ki], h[li, ki + 1]
    while li.size:
        keep = hi - lo > floor
        li, lo, hi, hlo, hhi = li[keep], lo[keep], hi[keep], hlo[keep], hhi[keep]
        if not li.size:
            break
        if used + li.size > budget:
            return used, True
        mid = 0.5 * (lo + hi)
        H, B, _ = itinerary_hashes(table, np.full(mid.size, sc), r_lines[li], mid, n_max, inverse=inverse)
        acc.add(H, B)
        used += mid.size
        hm = H[:, n_max]
        left = hm != hlo
        right = hm != hhi
        li = np.concatenate([li[left], li[right]])
        lo, hi = np.concatenate([lo[left], mid[right]]), np.concatenate([mid[left], hi[right]])
        hlo, hhi = np.concatenate([hlo[left], hm[right]]), np.concatenate([hm[left], hhi[right]])
    return used, False


def complexity_counts(
    table: BilliardTable,
    n_max: int,
    grid: int = 32,
    floor: float = 1e-7,
    budget: int = 2_000_000,
    phi_margin: float = 1e-7,
    inverse: bool = False,
    stable_levels: int = 2,
    n_lines: int = 64,
    line_points: int = 512,
    line_floor: float = 1e-9,
    line_budget: int = 20_000_000,
    conv_tol: float = 0.02,
) -> CountResult:
    """Lower bounds on #M_0^n for n = 0..n_max.

    Two refinements feed one pool of itinerary classes:

    * an adaptive quadtree: a ``grid`` x ``grid`` lattice of corners per
      scatterer chart (r, phi); cells whose corners disagree at depth
      ``n_max`` are split until their diameter drops below ``floor`` or the
      point count would exceed ``budget``;
    * ``n_lines`` vertical lines per chart, bisected where neighbouring
      points disagree down to ``line_floor`` (at most ``line_budget`` points).

    Every class counted is realised by an evaluated orbit, so each count is
    a lower bound.  Counts at depth n are the distinct depth-n prefixes, so
    one run serves every n <= n_max.

    ``converged[k]`` is True when the depth-k quadtree count was stable over
    its last ``stable_levels`` levels, or the lines in the second
    (interleaved) half added less than ``conv_tol`` relative to the count.
    """
    t0 = time.perf_counter()
    acc = _ClassAccumulator(n_max)
    n_points, level, q_hit, history = _quadtree(
        table, n_max, grid, floor, budget, phi_margin, inverse, acc
    )
    counts_half = []
    classes_half = {}
    l_hit = False
    if n_lines > 0:
        order = np.r_[np.arange(0, n_lines, 2), np.arange(1, n_lines, 2)]
        halves = (order[: (n_lines + 1) // 2], order[(n_lines + 1) // 2 :])
        remaining = line_budget
        for part in halves:
            for sc in range(table.n_scatterers):
                r_lines = (part + 0.5) / n_lines * table.perimeters[sc]
                for chunk in np.array_split(r_lines, max(1, len(r_lines) // 8)):
                    if l_hit or chunk.size == 0:
                        continue
                    used, l_hit = _line_scan(
                        table, n_max, sc, chunk, line_points, line_floor, phi_margin,
                        inverse, acc, remaining,
                    )
                    remaining -= used
                    n_points += used
            if not counts_half:
                counts_half = acc.counts()
                classes_half = dict(acc.classes())
    counts = acc.counts()
    converged = []
    for k in range(n_max + 1):
        tail = [h[k] for h in history[-(stable_levels + 1):]]
        q_ok = len(tail) == stable_levels + 1 and len(set(tail)) == 1 and tail[-1] == counts[k]
        l_ok = bool(counts_half) and counts[k] > 0 and (counts[k] - counts_half[k]) <= conv_tol * counts[k]
        converged.append(bool((q_ok or l_ok) and not l_hit))
    return CountResult(
        n_values=list(range(n_max + 1)),
        counts=counts,
        converged=converged,
        classes=acc.classes(),
        counts_half=counts_half,
        classes_half=classes_half,
        n_points=n_points,
        levels=level,
        budget_exceeded=bool(q_hit or l_hit),
        wall_time=time.perf_counter() - t0,
        history=history,
    )


def count_components(table: BilliardTable, n: int, grid: int = 32, floor: float = 1e-7,
                     budget: int = 2_000_000, strict: bool = False, **kw) -> dict:
    """Distinct-itinerary lower bound on #M_0^n for a single depth.

    Returns the CSV-ready entry ``{n, count, converged, wall_time}``.  With
    ``strict=True`` a budget overrun raises :class:`BudgetExceeded` instead of
    returning a flagged count.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    res = complexity_counts(table, n, grid=grid, floor=floor, budget=budget, **kw)
    if strict and res.budget_exceeded:
        raise BudgetExceeded(f"point budget exhausted at depth {n} (count {res.counts[n]})")
    out = res.entry(n)
    out["budget_exceeded"] = res.budget_exceeded
    return out


def brute_force_counts(table, n, m=4000, phi_margin=1e-7):
    """Distinct itineraries on a uniform m x m grid per scatterer (oracle)."""
    pmax = HALF_PI - phi_margin
    counts = set()
    for sc in range(table.n_scatterers):
        r = (np.arange(m) + 0.5) / m * table.perimeters[sc]
        phi = -pmax + (np.arange(m) + 0.5) / m * 2 * pmax
        for row in np.array_split(np.arange(m), max(1, m * m // 1_000_000)):
            rr, pp = np.meshgrid(r[row], phi, indexing="ij")
            H, _, _ = itinerary_hashes(table, np.full(rr.size, sc), rr.ravel(), pp.ravel(), n)
            counts.update(np.unique(H[:, n]).tolist())
    return len(counts)


# ---------------------------------------------------------------------------
# slope fits


@dataclass(frozen=True)
class SlopeEstimate:
    value: float
    error: float
    window: tuple
    converged: bool
    alternatives: dict

    def __float__(self):
        return self.value


def _lsq_slope(x, y):
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    return float(coef[0]), float(np.max(np.abs(resid))) if len(x) else 0.0


def estimate_slope(n_values, logs, min_points=3, resid_tol=0.005, spread_tol=0.25):
    """Growth rate of ``logs`` against ``n_values`` by windowed least squares.

    Windows end at the largest n, since the limit is approached from finite
    n.  The window is the longest tail run (at least ``min_points``) whose
    fit residuals all stay below ``resid_tol``.  The error bar is the largest
    slope difference between the chosen window and (i) its
    ``min_points``-long sub-windows and (ii) the same-length window shifted
    back by one depth, which measures the finite-n drift.  The last change
    in consecutive differences also enters, as a floor on the bias left in
    a sequence that has not settled.  ``converged`` is False when the
    spread exceeds ``spread_tol``.
    """
    n_values = list(n_values)
    logs = np.asarray(logs, float)
    N = len(n_values)
    if N < min_points:
        raise NotConverged(f"need at least {min_points} depths, got {N}")
    L = min_points
    for cand in range(N, min_points - 1, -1):
        if _lsq_slope(n_values[N - cand :], logs[N - cand :])[1] <= resid_tol:
            L = cand
            break
    a = N - L
    sl = _lsq_slope(n_values[a:], logs[a:])[0]
    subs = {}
    for b in range(a, N - min_points + 1):
        w = (n_values[b], n_values[b + min_points - 1])
        subs[w] = _lsq_slope(n_values[b : b + min_points], logs[b : b + min_points])[0]
    if a >= 1:
        w = (n_values[a - 1], n_values[N - 2])
        subs[w] = _lsq_slope(n_values[a - 1 : N - 1], logs[a - 1 : N - 1])[0]
    err = max((abs(v - sl) for v in subs.values()), default=0.0)
    err = max(err, tail_drift(n_values, logs))
    return SlopeEstimate(sl, err, (n_values[a], n_values[-1]), err <= spread_tol, subs)


def tail_drift(n_values, logs):
    """Change between the last two local slopes (0 with fewer than 3 depths)."""
    if len(n_values) < 3:
        return 0.0
    n = np.asarray(n_values, float)[-3:]
    y = np.asarray(logs, float)[-3:]
    d = np.diff(y) / np.diff(n)
    return float(abs(d[1] - d[0]))


def estimate_hstar(n_values, counts, min_points=3, resid_tol=0.005, spread_tol=0.25, strict=False):
    """h_* as the slope of log(count) against n.

    With ``strict=True``, disagreeing windows raise :class:`NotConverged`
    (the message reports both slopes).
    """
    est = estimate_slope(n_values, np.log(np.asarray(counts, float)), min_points, resid_tol, spread_tol)
    if strict and not est.converged:
        raise NotConverged(f"h_* windows disagree: {est.alternatives}")
    return est


# ---------------------------------------------------------------------------
# s_0


@dataclass(frozen=True)
class S0Estimate:
    phi0: float
    n: int
    n_samples: int
    estimate: float
    discard_fraction: float
    running_max: np.ndarray = field(repr=False, default=None)
    label: str = "lower bound (max over sampled orbits)"


def estimate_s0(table: BilliardTable, phi0: float, n: int, n_samples: int = 100_000,
                seed: int = 0, chunk: int = 50_000) -> S0Estimate:
    """Max over sampled orbit segments of the fraction of collisions with |phi| > phi0.

    Orbits start from the invariant measure cos(phi) dr dphi.  Orbits passing
    within the grazing tolerance are discarded and resampled.  This is a
    lower bound on s_0(phi0, n).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    got = 0
    discarded = 0
    drawn = 0
    running = np.empty(n_samples)
    best = 0.0
    while got < n_samples:
        m = min(chunk, n_samples - got)
        idx, r, phi = sample_invariant(table, m, rng)
        drawn += m
        cnt = np.zeros(m, dtype=np.int64)
        bad = np.zeros(m, dtype=bool)
        i, rr, pp = idx, r, phi
        for _ in range(n):
            # count the n collisions T x, ..., T^n x
            i, rr, pp, _, _, _ = map_arrays(table, i, rr, pp, check_grazing=False)
            a = np.abs(pp)
            bad |= a >= HALF_PI - GRAZING_TOL
            cnt += a > phi0
        bad |= np.abs(phi) >= HALF_PI - GRAZING_TOL
        discarded += int(bad.sum())
        frac = cnt[~bad] / n
        take = frac[: n_samples - got]
        if take.size:
            cm = np.maximum.accumulate(take)
            cm = np.maximum(cm, best)
            running[got : got + take.size] = cm
            best = float(cm[-1])
            got += take.size
    return S0Estimate(phi0, n, n_samples, best, discarded / drawn, running)


# ---------------------------------------------------------------------------
# CSV


def write_counts_csv(path, result: CountResult):
    """Rows (n, count, converged_flag, wall_time)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "count", "converged_flag", "wall_time"])
        for n in result.n_values:
            e = result.entry(n)
            w.writerow([n, e["count"], int(e["converged"]), repr(float(e["wall_time"]))])


def write_s0_csv(path, estimates):
    """Rows (phi0, n, n_samples, estimate, discard_fraction)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["phi0", "n", "n_samples", "estimate", "discard_fraction"])
        for e in estimates:
            w.writerow([repr(float(e.phi0)), e.n, e.n_samples, repr(float(e.estimate)),
                        repr(float(e.discard_fraction))])
