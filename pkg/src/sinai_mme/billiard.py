"""Geometry and dynamics of Sinai billiards with circular scatterers on the unit torus.

Phase space coordinates follow the usual convention: ``r`` is counterclockwise
arclength on the boundary of a scatterer (``r = R * theta`` with ``theta`` the
polar angle of the collision point), ``phi`` is the angle from the outward
normal to the post-collision velocity, positive towards the counterclockwise
tangent.  The velocity direction is therefore ``theta + phi``.

Everything is vectorized over arrays of phase points; the scalar helpers
(``billiard_map``, ``billiard_map_inverse``, ``jacobian``) wrap the array
versions.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    GrazingInput,
    InfiniteHorizon,
    NoCollisionWithinHorizon,
    OverlappingScatterers,
)

GRAZING_TOL = 1e-9
HIT_TOL = 1e-12
HALF_PI = 0.5 * math.pi
# mat-vec chunking: rows * candidates kept below this many floats
_CHUNK_CELLS = 2_000_000


@dataclass(frozen=True)
class Scatterer:
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise OverlappingScatterers(f"radius must be positive, got {self.radius}")
        cx, cy = (float(c) % 1.0 for c in self.center)
        object.__setattr__(self, "center", (cx, cy))
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def curvature(self) -> float:
        return 1.0 / self.radius

    @property
    def perimeter(self) -> float:
        return 2.0 * math.pi * self.radius


@dataclass(frozen=True)
class PhasePoint:
    scatterer: int
    r: float
    phi: float

    def reversed(self) -> "PhasePoint":
        """The time-reversal involution (r, phi) -> (r, -phi)."""
        return PhasePoint(self.scatterer, self.r, -self.phi)


@dataclass(frozen=True)
class CollisionResult:
    next: PhasePoint
    tau: float
    translate: tuple[int, int]


@dataclass(frozen=True)
class HorizonReport:
    horizon_ok: bool
    tau_max_estimate: float
    n_rays: int
    max_flight: float
    longest_sampled: float
    corridor_direction: tuple[int, int] | None
    corridor_clearance: float


@dataclass(frozen=True, eq=False)
class BilliardTable:
    """Immutable scatterer configuration plus derived constants.

    Use :func:`build_table` to construct one; it validates the geometry and
    fills in the derived fields.
    """

    scatterers: tuple[Scatterer, ...]
    kmin: float
    kmax: float
    tau_min: float
    tau_max: float
    lam: float
    horizon_ok: bool
    unfold_radius: int
    horizon: HorizonReport | None = None
    max_flight: float = 50.0
    centers: np.ndarray = field(repr=False, default=None)
    radii: np.ndarray = field(repr=False, default=None)
    _candidates: tuple = field(repr=False, default=())
    _search_radius: float = field(repr=False, default=0.0)

    @property
    def n_scatterers(self) -> int:
        return len(self.scatterers)

    @property
    def perimeters(self) -> np.ndarray:
        return 2.0 * np.pi * self.radii

    @property
    def t_c(self) -> float:
        """Threshold log(Lambda) / (tau_max - tau_min)."""
        return math.log(self.lam) / (self.tau_max - self.tau_min)

    @property
    def lambda_(self) -> float:
        return self.lam

    def config(self) -> dict:
        return {
            "scatterers": [
                {"center": list(s.center), "radius": s.radius} for s in self.scatterers
            ],
        }

    def fingerprint(self) -> str:
        blob = json.dumps(
            {"config": self.config(), "tau_max": repr(self.tau_max)}, sort_keys=True
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# construction


def _pair_gaps(centers, radii, shells=2):
    """All boundary gaps |c_i - c_j - k| - R_i - R_j over lattice translates."""
    out = []
    rng = range(-shells, shells + 1)
    for i in range(len(radii)):
        for j in range(len(radii)):
            for kx in rng:
                for ky in rng:
                    if i == j and kx == 0 and ky == 0:
                        continue
                    d = math.hypot(
                        centers[j, 0] + kx - centers[i, 0],
                        centers[j, 1] + ky - centers[i, 1],
                    )
                    out.append(d - radii[i] - radii[j])
    return np.array(out)


def _candidate_sets(centers, radii, search):
    """Per source scatterer: translates whose boundary may be hit within ``search``."""
    sets = []
    shells = int(math.ceil(search + 2 * radii.max())) + 1
    ks = np.arange(-shells, shells + 1)
    kx, ky = np.meshgrid(ks, ks, indexing="ij")
    kx, ky = kx.ravel(), ky.ravel()
    for i in range(len(radii)):
        cx, cy, rad, jj, kxs, kys = [], [], [], [], [], []
        for j in range(len(radii)):
            px = centers[j, 0] + kx
            py = centers[j, 1] + ky
            d = np.hypot(px - centers[i, 0], py - centers[i, 1])
            keep = d <= search + radii[i] + radii[j] + 1e-9
            if i == j:
                keep &= ~((kx == 0) & (ky == 0))
            cx.append(px[keep])
            cy.append(py[keep])
            rad.append(np.full(keep.sum(), radii[j]))
            jj.append(np.full(keep.sum(), j))
            kxs.append(kx[keep])
            kys.append(ky[keep])
        sets.append(
            (
                np.concatenate(cx),
                np.concatenate(cy),
                np.concatenate(rad),
                np.concatenate(jj).astype(np.int64),
                np.concatenate(kxs).astype(np.int64),
                np.concatenate(kys).astype(np.int64),
            )
        )
    return tuple(sets)


def build_table(
    scatterer_list: Sequence,
    n_rays: int = 20_000,
    max_flight: float = 50.0,
    seed: int = 0,
    strict: bool = True,
) -> BilliardTable:
    """Validate a scatterer configuration and compute the table constants.

    Parameters
    ----------
    scatterer_list : sequence of Scatterer, dicts ``{"center", "radius"}`` or tuples
    n_rays, max_flight, seed
        Horizon-check sampling parameters (see :func:`check_horizon`).
    strict : bool
        Raise :class:`InfiniteHorizon` when a corridor is found.  With
        ``strict=False`` the table is returned with ``horizon_ok=False``.
    """
    if len(scatterer_list) == 0:
        raise ValueError("need at least one scatterer")
    scs = []
    for s in scatterer_list:
        if isinstance(s, Scatterer):
            scs.append(s)
        elif isinstance(s, dict):
            scs.append(Scatterer(tuple(s["center"]), s["radius"]))
        else:
            c, rad = s
            scs.append(Scatterer(tuple(c), rad))
    centers = np.array([s.center for s in scs], dtype=float)
    radii = np.array([s.radius for s in scs], dtype=float)
    if np.any(2 * radii >= 1.0):
        raise OverlappingScatterers("a scatterer overlaps its own lattice translate")
    gaps = _pair_gaps(centers, radii)
    if gaps.min() <= 0:
        raise OverlappingScatterers(f"scatterers overlap (min gap {gaps.min():.4g})")
    tau_min = float(gaps.min())
    kmin = float((1.0 / radii).min())
    kmax = float((1.0 / radii).max())

    proto = BilliardTable(
        scatterers=tuple(scs),
        kmin=kmin,
        kmax=kmax,
        tau_min=tau_min,
        tau_max=math.inf,
        lam=1.0 + 2.0 * tau_min * kmin,
        horizon_ok=False,
        unfold_radius=0,
        max_flight=max_flight,
        centers=centers,
        radii=radii,
        _candidates=_candidate_sets(centers, radii, 2.0),
        _search_radius=2.0,
    )
    report = check_horizon(proto, n_rays=n_rays, max_flight=max_flight, seed=seed)
    if not report.horizon_ok and strict:
        raise InfiniteHorizon(
            f"open corridor (direction {report.corridor_direction}, "
            f"longest sampled flight {report.longest_sampled:.3g})"
        )
    tau_max = report.tau_max_estimate if report.horizon_ok else math.inf
    search = tau_max * (1 + 1e-3) + 1e-6 if report.horizon_ok else 2.0
    return BilliardTable(
        scatterers=tuple(scs),
        kmin=kmin,
        kmax=kmax,
        tau_min=tau_min,
        tau_max=tau_max,
        lam=1.0 + 2.0 * tau_min * kmin,
        horizon_ok=report.horizon_ok,
        unfold_radius=int(math.ceil(min(search, max_flight))) + 1,
        horizon=report,
        max_flight=max_flight,
        centers=centers,
        radii=radii,
        _candidates=_candidate_sets(centers, radii, search),
        _search_radius=search,
    )


# ---------------------------------------------------------------------------
# horizon


def corridor_clearance(table: BilliardTable, max_index: int = 5):
    """Exact corridor test along lattice directions (p, q) with |p|, |q| <= max_index.

    Lines of direction (p, q) project onto the unit normal with period
    1/sqrt(p^2 + q^2).  A corridor exists iff the projected disk intervals
    leave a gap.  Returns ``(direction, clearance)`` for the direction with the
    widest gap; clearance >= 0 means an open (or tangential) corridor.
    """
    best = (None, -math.inf)
    for p in range(0, max_index + 1):
        for q in range(-max_index, max_index + 1):
            if (p == 0 and q <= 0) or math.gcd(p, abs(q)) != 1:
                continue
            norm = math.hypot(p, q)
            period = 1.0 / norm
            nvec = np.array([-q, p]) / norm
            gap = _max_circle_gap((table.centers @ nvec - table.radii) % period, 2 * table.radii, period)
            if gap > best[1]:
                best = ((p, q), gap)
    return best


def _max_circle_gap(starts, lengths, period):
    """Widest uncovered arc left by intervals on a circle (negative: min overlap)."""
    if np.any(lengths >= period):
        return -math.inf
    order = np.argsort(starts)
    a = np.concatenate([starts[order], starts[order] + period])
    ln = np.concatenate([lengths[order], lengths[order]])
    end = a[0] + ln[0]
    gap = -math.inf
    for k in range(1, len(a)):
        if a[k] > a[0] + period:
            break
        gap = max(gap, a[k] - end)
        end = max(end, a[k] + ln[k])
    return max(gap, a[0] + period - end)


def _stratified_points(table, n, rng):
    k = table.n_scatterers
    per = max(1, n // k)
    m = max(1, int(math.ceil(math.sqrt(per))))
    idx, r, phi = [], [], []
    for i in range(k):
        u = (np.arange(m)[:, None] + rng.random((m, m))) / m
        w = (np.arange(m)[None, :] + rng.random((m, m))) / m
        idx.append(np.full(m * m, i))
        r.append((u * table.perimeters[i]).ravel())
        phi.append(((w * 2 - 1) * (HALF_PI - 1e-6)).ravel())
    return np.concatenate(idx), np.concatenate(r), np.concatenate(phi)


def _flight_lengths(table, idx, r, phi, max_flight):
    """Free flight, with np.inf for rays that travel beyond ``max_flight``."""
    p, v = positions(table, idx, r, phi)
    s = np.full(len(idx), np.inf)
    for i in range(table.n_scatterers):
        sel = np.nonzero(idx == i)[0]
        if sel.size:
            s[sel], _ = _first_hit(table._candidates[i], p[sel], v[sel])
    far = ~(s <= table._search_radius)
    if np.any(far):
        s[far], _ = _far_hit(table, p[far], v[far], max_flight)
    return s


def check_horizon(
    table: BilliardTable, n_rays: int = 20_000, max_flight: float = 50.0, seed: int = 0
) -> HorizonReport:
    """Ray-sampling plus exact lattice-direction corridor test.

    ``tau_max_estimate`` is the longest sampled flight after a local
    pattern-search refinement of the longest rays, i.e. a lower bound on the
    true tau_max which is tight up to the refinement tolerance.
    """
    direction, clearance = corridor_clearance(table)
    rng = np.random.default_rng(seed)
    idx, r, phi = _stratified_points(table, n_rays, rng)
    s = _flight_lengths(table, idx, r, phi, max_flight)
    longest = float(np.max(np.where(np.isfinite(s), s, max_flight * 2)))
    ok = bool(np.all(s <= max_flight)) and clearance < 0
    if not ok:
        return HorizonReport(
            False, longest, len(idx), max_flight, longest, direction, clearance
        )
    tau_max = max(
        _refine_max_flight(table, idx, r, phi, s, max_flight),
        _tangent_line_max_flight(table, reach=min(max_flight, 2.0 * longest + 1.0)),
    )
    return HorizonReport(True, tau_max, len(idx), max_flight, longest, direction, clearance)


def _tangent_lines(c1, r1, c2, r2):
    """The (up to four) common tangent lines of two disjoint circles as (point, unit dir)."""
    d = c1 - c2
    dist = math.hypot(*d)
    out = []
    for sgn in (1.0, -1.0):
        rho = r1 - sgn * r2
        if abs(rho) > dist:
            continue
        u = d / dist
        w = np.array([-u[1], u[0]])
        a = rho / dist
        b = math.sqrt(max(0.0, 1 - a * a))
        for pm in (1.0, -1.0):
            nrm = a * u + pm * b * w
            h = r1 - nrm @ c1
            out.append((-h * nrm, np.array([-nrm[1], nrm[0]])))
    return out


def _tangent_line_max_flight(table, reach):
    """Longest free segment lying on a common tangent line of two disk translates.

    Maximal free segments of a disk table touch two disks tangentially (a
    grazing departure or arrival counts), so scanning all common tangents of
    nearby translate pairs recovers tau_max up to rounding.
    """
    shells = int(math.ceil(reach)) + 1
    ks = np.arange(-shells, shells + 1)
    kx, ky = np.meshgrid(ks, ks, indexing="ij")
    allc, allr = [], []
    for j in range(table.n_scatterers):
        allc.append(np.stack([table.centers[j, 0] + kx.ravel(), table.centers[j, 1] + ky.ravel()], 1))
        allr.append(np.full(kx.size, table.radii[j]))
    allc = np.concatenate(allc)
    allr = np.concatenate(allr)
    best = 0.0
    for i in range(table.n_scatterers):
        ci, ri = table.centers[i], table.radii[i]
        dist = np.hypot(*(allc - ci).T)
        near = np.nonzero((dist > 1e-12) & (dist <= reach + ri + allr))[0]
        for m in near:
            for x0, u in _tangent_lines(ci, ri, allc[m], allr[m]):
                rel = allc - x0
                along = rel @ u
                perp = np.abs(rel[:, 0] * u[1] - rel[:, 1] * u[0])
                sel = (perp < allr - 1e-12) & (np.abs(along) < 2 * reach + 2)
                half = np.sqrt(allr[sel] ** 2 - perp[sel] ** 2)
                lo = np.sort(along[sel] - half)
                hi = np.sort(along[sel] + half)
                if len(lo) < 2:
                    continue
                gaps = lo[1:] - hi[:-1]
                best = max(best, float(gaps.max()))
    return best


def _refine_max_flight(table, idx, r, phi, s, max_flight, n_starts=24, iters=80):
    top = np.argsort(s)[-n_starts:]
    bi, br, bp, bs = idx[top], r[top].copy(), phi[top].copy(), s[top].copy()
    step_r = np.full(len(top), 1e-2)
    step_p = np.full(len(top), 1e-2)
    moves = np.array([(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)])
    lim = HALF_PI - 2 * GRAZING_TOL
    for _ in range(iters):
        cand_r = (br[:, None] + moves[None, :, 0] * step_r[:, None]) % table.perimeters[bi][:, None]
        cand_p = np.clip(bp[:, None] + moves[None, :, 1] * step_p[:, None], -lim, lim)
        ci = np.repeat(bi, len(moves))
        cs = _flight_lengths(table, ci, cand_r.ravel(), cand_p.ravel(), max_flight)
        cs = np.where(np.isfinite(cs), cs, -1.0).reshape(len(top), len(moves))
        j = np.argmax(cs, axis=1)
        better = cs[np.arange(len(top)), j] > bs
        rows = np.nonzero(better)[0]
        br[rows] = cand_r[rows, j[rows]]
        bp[rows] = cand_p[rows, j[rows]]
        bs[rows] = cs[rows, j[rows]]
        step_r[~better] *= 0.5
        step_p[~better] *= 0.5
    return float(max(bs.max(), s.max()))


# ---------------------------------------------------------------------------
# dynamics


def positions(table, idx, r, phi):
    """Cartesian collision points and unit post-collision velocities."""
    idx = np.asarray(idx)
    rad = table.radii[idx]
    th = np.asarray(r) / rad
    nx, ny = np.cos(th), np.sin(th)
    p = np.stack([table.centers[idx, 0] + rad * nx, table.centers[idx, 1] + rad * ny], axis=-1)
    psi = th + np.asarray(phi)
    v = np.stack([np.cos(psi), np.sin(psi)], axis=-1)
    return p, v


def _first_hit(cand, p, v):
    """Smallest positive entry time over candidate circles; returns (s, argmin)."""
    cx, cy, rad = cand[0], cand[1], cand[2]
    n = len(p)
    s_out = np.full(n, np.inf)
    m_out = np.zeros(n, dtype=np.int64)
    step = max(1, _CHUNK_CELLS // max(1, len(cx)))
    for a in range(0, n, step):
        pp, vv = p[a : a + step], v[a : a + step]
        relx = pp[:, 0:1] - cx[None, :]
        rely = pp[:, 1:2] - cy[None, :]
        b = vv[:, 0:1] * relx + vv[:, 1:2] * rely
        c = relx * relx + rely * rely - rad[None, :] ** 2
        disc = b * b - c
        hit = (disc > 0) & (b < 0)
        s = np.where(hit, -b - np.sqrt(np.where(hit, disc, 0.0)), np.inf)
        s[s <= HIT_TOL] = np.inf
        m = np.argmin(s, axis=1)
        s_out[a : a + step] = s[np.arange(len(pp)), m]
        m_out[a : a + step] = m
    return s_out, m_out


def _far_candidates(table, point, direction, reach):
    """Translates within ``reach`` of a point, restricted to a slab around the ray."""
    shells = int(math.ceil(reach + 2 * table.radii.max())) + 1
    ks = np.arange(-shells, shells + 1)
    kx, ky = np.meshgrid(ks, ks, indexing="ij")
    kx, ky = kx.ravel(), ky.ravel()
    out = [[] for _ in range(6)]
    for j in range(table.n_scatterers):
        px = table.centers[j, 0] + kx
        py = table.centers[j, 1] + ky
        dx, dy = px - point[0], py - point[1]
        along = dx * direction[0] + dy * direction[1]
        perp = np.abs(-dx * direction[1] + dy * direction[0])
        keep = (perp < table.radii[j] + 1e-9) & (along > -table.radii[j]) & (along < reach + table.radii[j])
        for lst, arr in zip(out, (px, py, np.full(kx.shape, table.radii[j]), np.full(kx.shape, j), kx, ky)):
            lst.append(arr[keep])
    return tuple(np.concatenate(a) for a in out)


def _far_hit(table, p, v, reach):
    s = np.full(len(p), np.inf)
    info = []
    for a in range(len(p)):
        cand = _far_candidates(table, p[a], v[a], reach)
        if len(cand[0]) == 0:
            info.append(None)
            continue
        sa, ma = _first_hit(cand, p[a : a + 1], v[a : a + 1])
        s[a] = sa[0] if sa[0] <= reach else np.inf
        info.append((cand, int(ma[0])))
    return s, info


def map_arrays(table: BilliardTable, idx, r, phi, check_grazing: bool = True):
    """Vectorized billiard map.

    Returns ``(idx1, r1, phi1, tau, kx, ky)`` where ``(kx, ky)`` is the lattice
    translate of the scatterer that was hit, relative to the cell of the source
    scatterer's center.
    """
    idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
    r = np.atleast_1d(np.asarray(r, dtype=float))
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    if check_grazing and np.any(np.abs(phi) >= HALF_PI - GRAZING_TOL):
        raise GrazingInput("phase point within grazing tolerance of S0")
    p, v = positions(table, idx, r, phi)
    n = len(idx)
    s = np.full(n, np.inf)
    cx = np.empty(n)
    cy = np.empty(n)
    crad = np.empty(n)
    cj = np.empty(n, dtype=np.int64)
    ckx = np.empty(n, dtype=np.int64)
    cky = np.empty(n, dtype=np.int64)
    for i in range(table.n_scatterers):
        sel = np.nonzero(idx == i)[0]
        if sel.size == 0:
            continue
        cand = table._candidates[i]
        si, mi = _first_hit(cand, p[sel], v[sel])
        s[sel] = si
        cx[sel], cy[sel], crad[sel] = cand[0][mi], cand[1][mi], cand[2][mi]
        cj[sel], ckx[sel], cky[sel] = cand[3][mi], cand[4][mi], cand[5][mi]
    far = np.nonzero(~(s <= table._search_radius))[0]
    if far.size:
        sf, info = _far_hit(table, p[far], v[far], table.max_flight)
        if not np.all(np.isfinite(sf)):
            raise NoCollisionWithinHorizon(
                f"{int(np.sum(~np.isfinite(sf)))} rays travel beyond {table.max_flight}"
            )
        for a, k in enumerate(far):
            cand, m = info[a]
            s[k] = sf[a]
            cx[k], cy[k], crad[k] = cand[0][m], cand[1][m], cand[2][m]
            cj[k], ckx[k], cky[k] = cand[3][m], cand[4][m], cand[5][m]
    qx = p[:, 0] + s * v[:, 0]
    qy = p[:, 1] + s * v[:, 1]
    nx = (qx - cx) / crad
    ny = (qy - cy) / crad
    th1 = np.arctan2(ny, nx) % (2 * np.pi)
    vn = v[:, 0] * nx + v[:, 1] * ny
    wx = v[:, 0] - 2 * vn * nx
    wy = v[:, 1] - 2 * vn * ny
    phi1 = np.arctan2(-ny * wx + nx * wy, nx * wx + ny * wy)
    r1 = (crad * th1) % (2 * np.pi * crad)
    return cj, r1, phi1, s, ckx, cky


def inverse_map_arrays(table, idx, r, phi, check_grazing: bool = True):
    """T^{-1} = iota o T o iota; ``tau`` is the backward free flight."""
    j, r1, p1, s, kx, ky = map_arrays(table, idx, r, -np.asarray(phi), check_grazing)
    return j, r1, -p1, s, kx, ky


def billiard_map(table: BilliardTable, x: PhasePoint) -> CollisionResult:
    j, r1, p1, s, kx, ky = map_arrays(table, [x.scatterer], [x.r], [x.phi])
    return CollisionResult(PhasePoint(int(j[0]), float(r1[0]), float(p1[0])), float(s[0]), (int(kx[0]), int(ky[0])))


def billiard_map_inverse(table: BilliardTable, x: PhasePoint) -> CollisionResult:
    res = billiard_map(table, x.reversed())
    return CollisionResult(res.next.reversed(), res.tau, res.translate)


def involution(x: PhasePoint) -> PhasePoint:
    return x.reversed()


def jacobian_arrays(table, idx, phi, idx1, phi1, tau):
    """DT in (r, phi) coordinates from the endpoint data of one flight.

    DT = -(1/cos phi1) [[tau K0 + cos phi0, tau],
                        [tau K0 K1 + K0 cos phi1 + K1 cos phi0, tau K1 + cos phi1]]
    Output shape (..., 2, 2).
    """
    k0 = 1.0 / table.radii[np.asarray(idx)]
    k1 = 1.0 / table.radii[np.asarray(idx1)]
    c0, c1 = np.cos(phi), np.cos(phi1)
    out = np.empty(np.shape(tau) + (2, 2))
    out[..., 0, 0] = tau * k0 + c0
    out[..., 0, 1] = tau
    out[..., 1, 0] = tau * k0 * k1 + k0 * c1 + k1 * c0
    out[..., 1, 1] = tau * k1 + c1
    return -out / c1[..., None, None]


def jacobian(table: BilliardTable, x: PhasePoint) -> np.ndarray:
    if abs(x.phi) >= HALF_PI - GRAZING_TOL:
        raise GrazingInput("jacobian at a grazing point")
    res = billiard_map(table, x)
    if abs(res.next.phi) >= HALF_PI - GRAZING_TOL:
        raise GrazingInput("image point is grazing")
    return jacobian_arrays(
        table, np.array(x.scatterer), np.array(x.phi), np.array(res.next.scatterer), np.array(res.next.phi), np.array(res.tau)
    )


def unstable_cone(table: BilliardTable) -> tuple[float, float]:
    """Slope interval dphi/dr of the global unstable cone."""
    return table.kmin, table.kmax + 1.0 / table.tau_min


def stable_cone(table: BilliardTable) -> tuple[float, float]:
    lo, hi = unstable_cone(table)
    return -hi, -lo


@dataclass(frozen=True)
class HyperbolicityReport:
    c1: float
    n_orbits: int
    length: int
    min_ratio: float
    violations: int
    ratios: np.ndarray = field(repr=False, default=None)


def expansion_ratios(table: BilliardTable, n_orbits: int = 1000, length: int = 10, seed: int = 0) -> np.ndarray:
    """min over 1 <= n <= length of |DT^n v| / (Lambda^n |v|) per sampled orbit.

    Orbits start from the invariant measure; v is a unit vector with slope
    drawn uniformly from the unstable cone.  Norms are Euclidean in (r, phi).
    """
    rng = np.random.default_rng(seed)
    idx, r, phi = sample_invariant(table, n_orbits, rng)
    lo, hi = unstable_cone(table)
    slope = rng.uniform(lo, hi, n_orbits)
    v = np.stack([np.ones(n_orbits), slope], axis=-1)
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    worst = np.full(n_orbits, np.inf)
    log_growth = np.zeros(n_orbits)
    for n in range(1, length + 1):
        j, r1, p1, tau, _, _ = map_arrays(table, idx, r, phi, check_grazing=False)
        D = jacobian_arrays(table, idx, phi, j, p1, tau)
        v = np.einsum("...ij,...j->...i", D, v)
        norm = np.linalg.norm(v, axis=-1)
        log_growth += np.log(norm)
        v /= norm[:, None]
        worst = np.minimum(worst, np.exp(log_growth - n * math.log(table.lam)))
        idx, r, phi = j, r1, p1
    return worst


def fit_c1(table: BilliardTable, n_orbits: int = 1000, length: int = 10, seed: int = 0,
           safety: float = 0.5) -> float:
    """C1 for |DT^n v| >= C1 Lambda^n |v|: ``safety`` times the calibration minimum."""
    return float(safety * expansion_ratios(table, n_orbits, length, seed).min())


def c1_theory(table: BilliardTable) -> float:
    """Lower bound for C1 from one step of the unstable cone estimate.

    Vectors in the cone have |dphi| >= K_min |dr|, and each step expands
    the p-norm cos(phi)|dr| by at least Lambda; converting back to the
    Euclidean norm loses at most the cone aperture.
    """
    mmax = table.kmax + 1.0 / table.tau_min
    return (2 * table.tau_min * table.kmin / table.lam) * math.sqrt(1 + table.kmin**2) / math.sqrt(1 + mmax**2)


def check_hyperbolicity(table: BilliardTable, c1: float, n_orbits: int = 1000, length: int = 10,
                        seed: int = 1) -> HyperbolicityReport:
    """Count violations of |DT^n v| >= C1 Lambda^n |v| on fresh orbits."""
    ratios = expansion_ratios(table, n_orbits, length, seed)
    return HyperbolicityReport(c1, n_orbits, length, float(ratios.min()), int(np.sum(ratios < c1)), ratios)


def sample_invariant(table: BilliardTable, n: int, rng, margin: float = 1e-6):
    """Sample phase points from the normalized measure cos(phi) dr dphi."""
    per = table.perimeters
    idx = rng.choice(table.n_scatterers, size=n, p=per / per.sum())
    r = rng.random(n) * per[idx]
    phi = np.arcsin(np.clip(rng.uniform(-1, 1, n), -1 + margin, 1 - margin))
    return idx, r, phi


def orbit(table: BilliardTable, x: PhasePoint, n: int):
    """Arrays (idx, r, phi, tau) along n steps of the orbit of x."""
    idx, r, phi = [x.scatterer], [x.r], [x.phi]
    taus = []
    i, rr, pp = np.array([x.scatterer]), np.array([x.r]), np.array([x.phi])
    for _ in range(n):
        i, rr, pp, s, _, _ = map_arrays(table, i, rr, pp)
        idx.append(int(i[0]))
        r.append(float(rr[0]))
        phi.append(float(pp[0]))
        taus.append(float(s[0]))
    return np.array(idx), np.array(r), np.array(phi), np.array(taus)


def load_table_config(path) -> dict:
    """Read a JSON or TOML table config file."""
    path = str(path)
    if path.endswith(".toml"):
        try:
            import tomllib
        except ImportError:  # python < 3.11
            import tomli as tomllib

        with open(path, "rb") as fh:
            return tomllib.load(fh)
    with open(path) as fh:
        return json.load(fh)


def table_from_config(cfg: dict, strict: bool = True) -> BilliardTable:
    hor = cfg.get("horizon", {})
    return build_table(
        cfg["scatterers"],
        n_rays=hor.get("n_rays", 20_000),
        max_flight=hor.get("max_flight", 50.0),
        seed=cfg.get("seed", 0),
        strict=strict,
    )
