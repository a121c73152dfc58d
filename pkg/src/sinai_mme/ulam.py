"""Ulam discretization of the weighted transfer dynamics.

The phase space of each scatterer is cut into ``n_r`` x ``n_phi`` uniform
boxes in (r, phi).  Sampled points are mapped by T and deposit weight into
the target box.  Two weightings are provided:

``kind="unstable"``
    weight exp(-t tau) * J^u, where J^u = 1 + tau B^+ is the expansion of
    the unstable front in the cos(phi) dr metric.  The leading eigenvalue
    of the twisted operator approximates exp(P(-t tau)), so log lambda is an
    estimate of the pressure that does not go through itinerary counting.
``kind="plain"``
    weight exp(-t tau) only.  At t = 0 this is the stochastic Ulam matrix of
    the Liouville-preserving map; it is used for column-sum and invariance
    checks.

Entries are L[i, j] = (cos-measure fraction of box j landing in box i) x
(mean weight over those samples).
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .billiard import GRAZING_TOL, HALF_PI, BilliardTable, inverse_map_arrays, map_arrays, positions
from .errors import DegenerateEigenvector, EmptyBox, NoConvergence, NotAtRoot

_EDGE = 2e-9


# ---------------------------------------------------------------------------
# unstable expansion


def unstable_log_expansion(table: BilliardTable, idx, r, phi, tau, depth: int = 6):
    """log(1 + tau B^+) with B^+ the post-collision curvature of the unstable front.

    The front is started flat (B^- = 0) ``depth`` collisions in the past and
    propagated forward with B^+ = B^- + 2K / cos(phi) and
    B^-_next = B^+ / (1 + tau B^+).  The error decays like the square of
    the contraction per step, so a handful of steps suffices.
    """
    idx = np.asarray(idx)
    pts = [(idx, np.asarray(r, float), np.asarray(phi, float))]
    flights = []
    i, rr, pp = pts[0]
    for _ in range(depth):
        i, rr, pp, s, _, _ = inverse_map_arrays(table, i, rr, pp, check_grazing=False)
        pts.append((i, rr, pp))
        flights.append(s)
    k = 1.0 / table.radii
    cmin = math.cos(HALF_PI - GRAZING_TOL)
    b_minus = np.zeros(len(idx))
    for step in range(depth, 0, -1):
        i, _, pp = pts[step]
        b_plus = b_minus + 2 * k[i] / np.maximum(np.cos(pp), cmin)
        b_minus = b_plus / (1 + flights[step - 1] * b_plus)
    b_plus = b_minus + 2 * k[idx] / np.maximum(np.cos(pts[0][2]), cmin)
    return np.log1p(tau * b_plus)


# ---------------------------------------------------------------------------
# sampling


@dataclass
class Transitions:
    """t-independent sample data shared by every operator on one partition."""

    n_r: int
    n_phi: int
    n_boxes: int
    seed: int
    samples_per_box: int
    src: np.ndarray
    dst: np.ndarray
    w: np.ndarray  # weight of each sample within its source column (sums to 1 per live box)
    tau: np.ndarray
    log_ju: np.ndarray
    box_mass: np.ndarray  # cos-measure of each box (total 1)
    box_tau: np.ndarray  # cos-weighted mean flight per box
    live: np.ndarray
    graze_band: float
    graze_factor: int


def box_index(table, n_r, n_phi, idx, r, phi):
    br = np.minimum((np.asarray(r) / table.perimeters[idx] * n_r).astype(np.int64), n_r - 1)
    bp = np.clip(((np.asarray(phi) + HALF_PI) / math.pi * n_phi).astype(np.int64), 0, n_phi - 1)
    return (np.asarray(idx) * n_r + br) * n_phi + bp


def box_bounds(table, n_r, n_phi, box):
    box = np.asarray(box)
    sc = box // (n_r * n_phi)
    rem = box % (n_r * n_phi)
    br, bp = rem // n_phi, rem % n_phi
    per = table.perimeters[sc]
    return sc, br / n_r * per, (br + 1) / n_r * per, -HALF_PI + bp / n_phi * math.pi, -HALF_PI + (bp + 1) / n_phi * math.pi


def _box_mass(table, n_r, n_phi):
    edges = -HALF_PI + np.arange(n_phi + 1) / n_phi * math.pi
    col = np.diff(np.sin(edges))  # integral of cos over each phi band
    per = table.perimeters
    mass = (per[:, None, None] / n_r) * np.ones((1, n_r, 1)) * col[None, None, :]
    mass = mass.ravel()
    return mass / mass.sum()


def _draw(table, n_r, n_phi, boxes, reps, rng):
    src = np.repeat(boxes, reps)
    sc, rlo, rhi, plo, phi_hi = box_bounds(table, n_r, n_phi, src)
    u = rng.random((2, src.size))
    r = rlo + u[0] * (rhi - rlo)
    phi = np.clip(plo + u[1] * (phi_hi - plo), -HALF_PI + _EDGE, HALF_PI - _EDGE)
    return src, sc, r, phi


def _push(table, n_r, n_phi, sc, r, phi, inverse, depth, chunk):
    """Partner box, flight and log J^u (at the pre-collision point) per sample."""
    n = sc.size
    other = np.empty(n, dtype=np.int64)
    tau = np.empty(n)
    lju = np.empty(n)
    step = inverse_map_arrays if inverse else map_arrays
    for a in range(0, n, chunk):
        s = slice(a, a + chunk)
        j, r1, p1, t1, _, _ = step(table, sc[s], r[s], phi[s], check_grazing=False)
        other[s] = box_index(table, n_r, n_phi, j, r1, p1)
        tau[s] = t1
        if inverse:
            lju[s] = unstable_log_expansion(table, j, r1, p1, t1, depth=depth)
        else:
            lju[s] = unstable_log_expansion(table, sc[s], r[s], phi[s], t1, depth=depth)
    return other, tau, lju


def sample_transitions(table: BilliardTable, n_r: int = 256, n_phi: int = 256, samples_per_box: int = 8,
                       seed: int = 0, graze_band: float = 0.05, graze_factor: int = 4,
                       jacobian_depth: int = 6, chunk: int = 400_000) -> Transitions:
    """Stratified samples per box, their images, flights and log J^u.

    Boxes meeting the band |phi| > pi/2 - ``graze_band`` receive
    ``graze_factor`` times as many samples.  Samples are uniform in the box
    and carry cos(phi) weights.

    Each box is sampled twice: forward (points of the box pushed by T) and
    backward (points of the box pulled back by T^{-1}).  Backward samples
    weighted by the cos-measure of their box are draws of (x, Tx) under the
    invariant measure, so, grouped by the box of x, they give a second
    estimate of where that box goes.  Column i mixes the two empirical
    distributions half and half (forward only when no backward sample lands
    in i).  Every box then has incoming transitions, including near-grazing
    targets that forward sampling alone rarely reaches, and column sums of
    the plain t = 0 matrix stay exactly 1.
    """
    rng = np.random.default_rng(seed)
    n_boxes = table.n_scatterers * n_r * n_phi
    boxes = np.arange(n_boxes)
    _, _, _, plo, phi_hi = box_bounds(table, n_r, n_phi, boxes)
    graze = (phi_hi > HALF_PI - graze_band) | (plo < -HALF_PI + graze_band)
    reps = np.where(graze, samples_per_box * graze_factor, samples_per_box)
    mass = _box_mass(table, n_r, n_phi)

    src, sc, r, phi = _draw(table, n_r, n_phi, boxes, reps, rng)
    dst, tau_f, lju_f = _push(table, n_r, n_phi, sc, r, phi, False, jacobian_depth, chunk)
    ok = np.isfinite(tau_f) & np.isfinite(lju_f)
    c = np.where(ok, np.cos(phi), 0.0)
    csum = np.bincount(src, weights=c, minlength=n_boxes)
    live = csum > 0
    w_f = c / np.where(csum[src] > 0, csum[src], 1.0)

    dst_b, sc_b, r_b, phi_b = _draw(table, n_r, n_phi, boxes, reps, rng)
    src_b, tau_b, lju_b = _push(table, n_r, n_phi, sc_b, r_b, phi_b, True, jacobian_depth, chunk)
    ok_b = np.isfinite(tau_b) & np.isfinite(lju_b) & live[src_b]
    c_b = np.where(ok_b, np.cos(phi_b), 0.0)
    csum_b = np.bincount(dst_b, weights=c_b, minlength=n_boxes)
    a_b = mass[dst_b] * c_b / np.where(csum_b[dst_b] > 0, csum_b[dst_b], 1.0)
    col_b = np.bincount(src_b, weights=a_b, minlength=n_boxes)
    has_b = col_b > 0
    w_b = 0.5 * a_b / np.where(has_b[src_b], col_b[src_b], 1.0)
    w_f = np.where(has_b[src], 0.5, 1.0) * w_f

    w = np.concatenate([w_f, w_b])
    tau = np.concatenate([np.where(ok, tau_f, 0.0), np.where(ok_b, tau_b, 0.0)])
    box_tau = np.bincount(np.concatenate([src, src_b]), weights=w * tau, minlength=n_boxes)
    return Transitions(n_r, n_phi, n_boxes, seed, samples_per_box,
                       np.concatenate([src, src_b]), np.concatenate([dst, dst_b]), w, tau,
                       np.concatenate([np.where(ok, lju_f, 0.0), np.where(ok_b, lju_b, 0.0)]),
                       mass, box_tau, live, graze_band, graze_factor)


# ---------------------------------------------------------------------------
# operator


@dataclass
class UlamOperator:
    t: float
    kind: str
    n_r: int
    n_phi: int
    samples_per_box: int
    seed: int
    matrix: sp.csr_matrix = field(repr=False)
    transitions: Transitions = field(repr=False)

    @property
    def n_boxes(self) -> int:
        return self.matrix.shape[0]

    def column_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=0)).ravel()


def build_operator(table: BilliardTable, t: float, n_r: int = 256, n_phi: int = 256,
                   samples_per_box: int = 8, seed: int = 0, kind: str = "unstable",
                   transitions: Transitions | None = None, strict: bool = False) -> UlamOperator:
    """Assemble the Ulam matrix for weight exp(-t tau) (times J^u for kind="unstable").

    Boxes with no valid sample are dead: their columns are empty.  With
    ``strict=True`` a dead box raises :class:`EmptyBox`.
    """
    if not table.horizon_ok:
        raise ValueError("table must have finite horizon")
    if t < 0:
        raise ValueError("t must be >= 0")
    if kind not in ("unstable", "plain"):
        raise ValueError("kind must be 'unstable' or 'plain'")
    tr = transitions or sample_transitions(table, n_r, n_phi, samples_per_box, seed)
    if strict and not tr.live.all():
        raise EmptyBox(f"{int((~tr.live).sum())} boxes without valid samples")
    logw = -t * tr.tau
    if kind == "unstable":
        logw = logw + tr.log_ju
    val = tr.w * np.exp(logw)
    m = sp.coo_matrix((val, (tr.dst, tr.src)), shape=(tr.n_boxes, tr.n_boxes)).tocsr()
    m.sum_duplicates()
    return UlamOperator(float(t), kind, tr.n_r, tr.n_phi, tr.samples_per_box, tr.seed, m, tr)


# ---------------------------------------------------------------------------
# eigen


@dataclass
class EigenResult:
    lam: float
    right: np.ndarray
    left: np.ndarray
    iterations: int
    residual: float


def _power(A, x0, tol, max_iter, accel=4):
    x = x0 / x0.sum()
    lam = 0.0
    for it in range(1, max_iter + 1):
        y = A @ x
        for _ in range(accel - 1):
            y = A @ (y / y.sum())
        # one more product gives the Rayleigh-type ratio on the normalised vector
        yn = y / y.sum()
        z = A @ yn
        lam_new = z.sum()
        diff = np.abs(z / lam_new - yn).sum()
        x = z / lam_new
        if diff < tol and abs(lam_new - lam) <= tol * lam_new:
            return lam_new, x, it, diff
        lam = lam_new
    raise NoConvergence(f"power iteration did not converge in {max_iter} rounds (residual {diff:.3g})")


def leading_eigen(op: UlamOperator, tol: float = 1e-10, max_iter: int = 20_000) -> EigenResult:
    """Leading eigenvalue with right and left eigenvectors by power iteration.

    Dead boxes are removed before iterating.  Vectors are L1-normalised and
    nonnegative; the start vector is the box measure.
    """
    tr = op.transitions
    live = np.flatnonzero(tr.live)
    A = op.matrix[live][:, live].tocsr()
    x0 = tr.box_mass[live].copy()
    lam, right, it1, r1 = _power(A, x0, tol, max_iter)
    lam_l, left, it2, r2 = _power(A.T.tocsr(), np.ones(len(live)), tol, max_iter)
    R = np.zeros(op.n_boxes)
    Lv = np.zeros(op.n_boxes)
    R[live] = right
    Lv[live] = left
    if abs(lam - lam_l) > 1e3 * tol * lam:
        raise NoConvergence(f"left/right eigenvalues disagree: {lam} vs {lam_l}")
    return EigenResult(float(lam), R, Lv, it1 + it2, max(r1, r2))


# ---------------------------------------------------------------------------
# singularity point clouds


@dataclass
class SingularityCloud:
    """Points on S_1 \\ S_0 (forward) and S_-1 \\ S_0 (backward) per scatterer."""

    points: list  # per scatterer: (k, 2) array of (r, phi)
    trees: list = field(repr=False)
    perimeters: np.ndarray = field(repr=False)


def _first_symbol(table, idx, r, phi, inverse):
    step = inverse_map_arrays if inverse else map_arrays
    j, _, _, _, kx, ky = step(table, idx, r, phi, check_grazing=False)
    return j * 1_000_003 + (kx + 512) * 1024 + (ky + 512)


def _boundary_scan(table, sc, a_vals, b_grid, along_r, inverse, tol=1e-12, iters=60):
    """Bisect first-symbol changes along lines in one chart.

    ``along_r=False``: vertical lines r = a, scanning phi over ``b_grid``.
    ``along_r=True``: horizontal lines phi = a, scanning r.
    """
    na, nb = len(a_vals), len(b_grid)
    A = np.repeat(a_vals, nb)
    Bv = np.tile(b_grid, na)
    r, p = (Bv, A) if along_r else (A, Bv)
    sym = _first_symbol(table, np.full(r.size, sc), r, p, inverse).reshape(na, nb)
    li, ki = np.nonzero(sym[:, 1:] != sym[:, :-1])
    a = a_vals[li]
    lo, hi = b_grid[ki], b_grid[ki + 1]
    slo = sym[li, ki]
    for _ in range(iters):
        if np.all(hi - lo <= tol):
            break
        mid = 0.5 * (lo + hi)
        rr, pp = (mid, a) if along_r else (a, mid)
        sm = _first_symbol(table, np.full(mid.size, sc), rr, pp, inverse)
        same = sm == slo
        lo = np.where(same, mid, lo)
        hi = np.where(same, hi, mid)
    m = 0.5 * (lo + hi)
    return np.column_stack([m, a]) if along_r else np.column_stack([a, m])


def singularity_cloud(table: BilliardTable, n_lines: int = 1024, n_scan: int = 1024,
                      phi_margin: float = 1e-7) -> SingularityCloud:
    """Dense point samples of T^{-1} S_0 and T S_0 on every chart.

    Both families are located as changes of the first forward (resp.
    backward) symbol along vertical and horizontal lines, refined by
    bisection to 1e-12.
    """
    pm = HALF_PI - phi_margin
    pts, trees = [], []
    for sc in range(table.n_scatterers):
        per = table.perimeters[sc]
        r_lines = (np.arange(n_lines) + 0.5) / n_lines * per
        p_lines = -pm + (np.arange(n_lines) + 0.5) / n_lines * 2 * pm
        r_scan = np.linspace(0.0, per, n_scan + 1)[:-1]
        p_scan = np.linspace(-pm, pm, n_scan + 1)
        chunks = []
        for inverse in (False, True):
            chunks.append(_boundary_scan(table, sc, r_lines, p_scan, False, inverse))
            chunks.append(_boundary_scan(table, sc, p_lines, r_scan, True, inverse))
        P = np.concatenate(chunks)
        pts.append(P)
        # periodic in r: add shifted copies near the seam
        ext = np.concatenate([P, P + [per, 0.0], P - [per, 0.0]])
        trees.append(cKDTree(ext))
    return SingularityCloud(pts, trees, table.perimeters.copy())


def distance_to_singularities(cloud: SingularityCloud, idx, r, phi):
    """Approximate d(x, S_{+-1}) in the (r, phi) metric."""
    idx = np.asarray(idx)
    d = HALF_PI - np.abs(np.asarray(phi, float))
    for sc, tree in enumerate(cloud.trees):
        sel = np.flatnonzero(idx == sc)
        if sel.size == 0:
            continue
        q = np.column_stack([np.asarray(r)[sel], np.asarray(phi)[sel]])
        dd, ii = tree.query(q, k=2)
        data = tree.data
        # distance to the chord through the two nearest cloud points when they are close
        a, b = data[ii[:, 0]], data[ii[:, 1]]
        ab = b - a
        L2 = (ab * ab).sum(1)
        tpar = np.clip(((q - a) * ab).sum(1) / np.where(L2 > 0, L2, 1.0), 0.0, 1.0)
        chord = np.hypot(*(q - a - tpar[:, None] * ab).T)
        use = np.sqrt(L2) < 4 * dd[:, 0] + 1e-12
        best = np.where(use, np.minimum(dd[:, 0], chord), dd[:, 0])
        d[sel] = np.minimum(d[sel], best)
    return np.maximum(d, 1e-300)


# ---------------------------------------------------------------------------
# measures


@dataclass
class MeasureEstimate:
    weights: np.ndarray = field(repr=False)
    support_fraction: float
    tau_mean: float
    adapt_integral: float
    t: float
    n_r: int
    n_phi: int


def equilibrium_measure(table: BilliardTable, op: UlamOperator, eig: EigenResult,
                        cloud: SingularityCloud | None = None, points_per_box: int = 4,
                        seed: int = 1) -> MeasureEstimate:
    """Box weights proportional to left * right eigenvectors.

    ``adapt_integral`` estimates the integral of |log d(x, S_{+-1})| against
    the box measure, using ``points_per_box`` uniform points per box
    (weighted by cos phi).  Without a ``cloud`` it is not computed (nan).
    """
    w = eig.left * eig.right
    if np.any(w < -1e-14 * np.abs(w).max()) or w.sum() <= 0:
        raise DegenerateEigenvector("product of eigenvectors is not a nonnegative measure")
    w = np.maximum(w, 0.0)
    w = w / w.sum()
    live = op.transitions.live
    support = float(np.mean(w[live] > 0))
    tau_mean = float((w * op.transitions.box_tau).sum())
    adapt = math.nan
    if cloud is not None:
        adapt = adapt_integral(table, op.n_r, op.n_phi, w, cloud, points_per_box, seed)
    return MeasureEstimate(w, support, tau_mean, adapt, op.t, op.n_r, op.n_phi)


def adapt_integral(table, n_r, n_phi, weights, cloud, points_per_box=4, seed=1) -> float:
    rng = np.random.default_rng(seed)
    n_boxes = len(weights)
    boxes = np.repeat(np.arange(n_boxes), points_per_box)
    sc, rlo, rhi, plo, phi_hi = box_bounds(table, n_r, n_phi, boxes)
    u = rng.random((2, boxes.size))
    r = rlo + u[0] * (rhi - rlo)
    phi = np.clip(plo + u[1] * (phi_hi - plo), -HALF_PI + _EDGE, HALF_PI - _EDGE)
    g = np.abs(np.log(distance_to_singularities(cloud, sc, r, phi)))
    c = np.cos(phi)
    num = np.bincount(boxes, weights=c * g, minlength=n_boxes)
    den = np.bincount(boxes, weights=c, minlength=n_boxes)
    per_box = num / np.where(den > 0, den, 1.0)
    return float((weights * per_box).sum())


def tv_distance_to_liouville(op: UlamOperator, weights) -> float:
    """Total variation distance between box weights and the cos(phi) measure."""
    return 0.5 * float(np.abs(weights - op.transitions.box_mass).sum())


# ---------------------------------------------------------------------------
# flow MME


def _flow_distance(table, idx, r, phi, tau, s):
    """Approximate distance in Q x S^1 from flow points to S_0^+ and S_0^-.

    For a flow point p at time s after the collision x, and a disk D near
    the segment, the tangent line to D with direction close to v misses p
    by the defect | |(c - p) x v| - R |; rotating the direction by dtheta
    moves the tangent line at distance l from the tangency by l dtheta, so
    the distance in (position, angle) is about defect / sqrt(1 + l^2).
    S_0^+ uses tangencies behind p on the segment (0 <= l <= s + R), S_0^-
    tangencies ahead of p (0 <= l <= tau - s + R); the slack R covers the
    foot point on the departure and arrival disks.
    """
    p0, v = positions(table, idx, r, phi)
    p = p0 + s[:, None] * v
    d = np.full(len(idx), 1.0)
    for i in range(table.n_scatterers):
        sel = np.flatnonzero(idx == i)
        if sel.size == 0:
            continue
        cand = table._candidates[i]
        cx = np.concatenate([cand[0], [table.centers[i, 0]]])
        cy = np.concatenate([cand[1], [table.centers[i, 1]]])
        rad = np.concatenate([cand[2], [table.radii[i]]])
        for a in range(0, sel.size, 20_000):
            ss = sel[a : a + 20_000]
            px, py = p[ss, 0:1], p[ss, 1:2]
            vx, vy = v[ss, 0:1], v[ss, 1:2]
            dx, dy = cx[None, :] - px, cy[None, :] - py
            along = dx * vx + dy * vy
            perp = np.abs(dx * vy - dy * vx)
            defect = np.abs(perp - rad[None, :])
            behind = (-along >= 0) & (-along <= s[ss, None] + rad[None, :])
            ahead = (along >= 0) & (along <= (tau - s)[ss, None] + rad[None, :])
            ell = np.abs(along)
            cand_d = np.where(behind | ahead, defect / np.sqrt(1 + ell * ell), np.inf)
            d[ss] = np.minimum(d[ss], cand_d.min(axis=1))
    return np.maximum(d, 1e-300)


@dataclass
class FlowMME:
    t: float
    tau_mean: float
    abramov_entropy: float
    flad_integral: float
    flad_se: float
    n_samples: int
    note: str = "h_mu(T) = t * tau_mean follows from P(t) = 0; entropy not computed directly"


def flow_mme(table: BilliardTable, op: UlamOperator, measure: MeasureEstimate, root: float,
             bracket: tuple, n_samples: int = 200_000, seed: int = 2, atol: float = 1e-9) -> FlowMME:
    """Suspension data of the flow MME and the flow-adaptedness integral.

    Flow points are drawn from mu_t x Leb normalised by the mean flight:
    a box is drawn by weight, a point uniformly in it (cos phi accepted by
    rejection), a time s uniformly in [0, tau(x)], and the sample is
    weighted by tau(x).
    """
    lo, hi = bracket
    if not (lo - atol <= op.t <= hi + atol) or not (lo - atol <= root <= hi + atol):
        raise NotAtRoot(f"operator built at t = {op.t}, root bracket {bracket}")
    rng = np.random.default_rng(seed)
    w = measure.weights
    boxes = rng.choice(len(w), size=n_samples, p=w)
    sc, rlo, rhi, plo, phi_hi = box_bounds(table, op.n_r, op.n_phi, boxes)
    u = rng.random((3, n_samples))
    r = rlo + u[0] * (rhi - rlo)
    # cos-weighted phi within the box by inversion of sin
    s_lo, s_hi = np.sin(plo), np.sin(phi_hi)
    phi = np.arcsin(np.clip(s_lo + u[1] * (s_hi - s_lo), -1.0, 1.0))
    phi = np.clip(phi, -HALF_PI + _EDGE, HALF_PI - _EDGE)
    _, _, _, tau, _, _ = map_arrays(table, sc, r, phi, check_grazing=False)
    s = u[2] * tau
    g = np.abs(np.log(_flow_distance(table, sc, r, phi, tau, s)))
    wt = tau / tau.sum()
    mean = float((wt * g).sum())
    se = float(np.sqrt((wt * (g - mean) ** 2).sum() / n_samples))
    return FlowMME(op.t, measure.tau_mean, op.t * measure.tau_mean, mean, se, n_samples)


@dataclass
class UlamScan:
    """log lambda_t on a t grid with an error bar from resolution and seed changes."""

    t_grid: np.ndarray
    log_lambda: np.ndarray
    err: np.ndarray
    log_lambda_coarse: np.ndarray
    log_lambda_reseeded: np.ndarray
    n_r: int
    n_phi: int
    samples_per_box: int
    seed: int


def ulam_pressure_scan(table: BilliardTable, t_grid, n_r: int = 256, n_phi: int = 256, samples_per_box: int = 8,
                       seed: int = 0, transitions: Transitions | None = None) -> UlamScan:
    """log of the leading eigenvalue of the twisted operator for each t.

    The error bar is the larger of the change under halving the partition
    and the change under a fresh sampling seed.
    """
    t_grid = np.asarray(t_grid, float)
    runs = [transitions or sample_transitions(table, n_r, n_phi, samples_per_box, seed),
            sample_transitions(table, n_r // 2, n_phi // 2, samples_per_box, seed),
            sample_transitions(table, n_r, n_phi, samples_per_box, seed + 1)]
    out = np.empty((3, len(t_grid)))
    for a, tr in enumerate(runs):
        for b, t in enumerate(t_grid):
            out[a, b] = math.log(leading_eigen(build_operator(table, float(t), transitions=tr)).lam)
    err = np.maximum(np.abs(out[0] - out[1]), np.abs(out[0] - out[2]))
    return UlamScan(t_grid, out[0], err, out[1], out[2], n_r, n_phi, samples_per_box, seed)


def coarse_grain(weights, table: BilliardTable, n_r: int, n_phi: int, factor: int) -> np.ndarray:
    """Sum box weights over factor x factor blocks of each chart."""
    w = np.asarray(weights).reshape(table.n_scatterers, n_r // factor, factor, n_phi // factor, factor)
    return w.sum(axis=(2, 4)).ravel()


# ---------------------------------------------------------------------------
# output


def write_operator(prefix, op: UlamOperator, table: BilliardTable):
    """Write ``prefix.coo`` (little-endian int64 row, int64 col, float64 value)
    and ``prefix.json`` (partition, t, seed, kind, nnz)."""
    m = op.matrix.tocoo()
    order = np.lexsort((m.col, m.row))
    rows = m.row[order].astype("<i8")
    cols = m.col[order].astype("<i8")
    vals = m.data[order].astype("<f8")
    with open(f"{prefix}.coo", "wb") as fh:
        fh.write(struct.pack("<q", len(vals)))
        fh.write(rows.tobytes())
        fh.write(cols.tobytes())
        fh.write(vals.tobytes())
    header = {
        "format": "coo-le-int64-int64-float64",
        "n_boxes": int(op.n_boxes),
        "n_r": op.n_r,
        "n_phi": op.n_phi,
        "n_scatterers": table.n_scatterers,
        "t": op.t,
        "kind": op.kind,
        "seed": op.seed,
        "samples_per_box": op.samples_per_box,
        "nnz": int(len(vals)),
        "table": table.fingerprint(),
    }
    with open(f"{prefix}.json", "w") as fh:
        json.dump(header, fh, sort_keys=True, indent=1)


def read_operator(prefix):
    with open(f"{prefix}.json") as fh:
        header = json.load(fh)
    with open(f"{prefix}.coo", "rb") as fh:
        (nnz,) = struct.unpack("<q", fh.read(8))
        rows = np.frombuffer(fh.read(8 * nnz), dtype="<i8")
        cols = np.frombuffer(fh.read(8 * nnz), dtype="<i8")
        vals = np.frombuffer(fh.read(8 * nnz), dtype="<f8")
    n = header["n_boxes"]
    return header, sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def write_measure_csv(path, table, measure: MeasureEstimate):
    """Rows (scatterer, r_lo, r_hi, phi_lo, phi_hi, weight)."""
    boxes = np.arange(len(measure.weights))
    sc, rlo, rhi, plo, phi_hi = box_bounds(table, measure.n_r, measure.n_phi, boxes)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scatterer", "r_lo", "r_hi", "phi_lo", "phi_hi", "weight"])
        for k in boxes:
            w.writerow([int(sc[k]), repr(float(rlo[k])), repr(float(rhi[k])), repr(float(plo[k])),
                        repr(float(phi_hi[k])), repr(float(measure.weights[k]))])
