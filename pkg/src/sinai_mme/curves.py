"""Cone-stable curves under backward iteration and the G/L/S/I families.

A family is grown from a straight seed curve W, parametrized by s in [0, 1].
Every member of generation n is an s-interval of W on which T^{-n} is
smooth, carried as a polyline of exact images T^{-n}W(s).  Points added
later (refinement, cut bisection, subdivision endpoints) are computed from W
directly, so no interpolated point ever enters the dynamics.

Cuts are detected where the symbol of the last backward step (scatterer hit
plus lattice translate) changes between neighbouring points, and located by
bisection in s.  Scale nesting across delta, delta/2, ... is obtained by
re-subdividing the members of one family in place.

The time-reversed twin uses unstable seeds iterated forward under T; by the
involution this is the same construction for T^{-1}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .billiard import (
    HALF_PI,
    BilliardTable,
    inverse_map_arrays,
    map_arrays,
    sample_invariant,
    stable_cone,
    unstable_cone,
)
from .errors import PieceExplosion

_REL = 1e-9  # relative slack for "exactly l*delta" in subdivision


def _encode(j, kx, ky):
    return (np.asarray(j, np.int64) * 4096 + (np.asarray(kx, np.int64) + 2048)) * 4096 + (np.asarray(ky, np.int64) + 2048)


# ---------------------------------------------------------------------------
# seeds and members


@dataclass(frozen=True)
class Seed:
    """Straight curve W(s) = start + s (end - start) on one scatterer chart."""

    scatterer: int
    start: tuple
    end: tuple
    unstable: bool = False

    @property
    def length(self) -> float:
        return math.hypot(self.end[0] - self.start[0], self.end[1] - self.start[1])

    @property
    def center(self) -> tuple:
        return (0.5 * (self.start[0] + self.end[0]), 0.5 * (self.start[1] + self.end[1]))

    def point(self, s):
        s = np.asarray(s, float)
        r = self.start[0] + s * (self.end[0] - self.start[0])
        phi = self.start[1] + s * (self.end[1] - self.start[1])
        return np.full(s.shape, self.scatterer, dtype=np.int64), r, phi


def make_seed(table: BilliardTable, scatterer: int, r0: float, phi0: float, length: float,
              slope: float | None = None, unstable: bool = False) -> Seed:
    """Straight cone curve of the given length centred at (r0, phi0).

    ``slope`` is dphi/dr; it defaults to the middle of the stable (or
    unstable) cone and must lie inside it.
    """
    lo, hi = unstable_cone(table) if unstable else stable_cone(table)
    if slope is None:
        slope = 0.5 * (lo + hi)
    if not lo <= slope <= hi:
        raise ValueError(f"slope {slope} outside the cone [{lo}, {hi}]")
    u = np.array([1.0, slope]) / math.hypot(1.0, slope)
    h = 0.5 * length * u
    start = (r0 - h[0], phi0 - h[1])
    end = (r0 + h[0], phi0 + h[1])
    if max(abs(start[1]), abs(end[1])) >= HALF_PI:
        raise ValueError("seed leaves the phase space")
    return Seed(int(scatterer), (float(start[0]), float(start[1])), (float(end[0]), float(end[1])), unstable)


def sample_seeds(table: BilliardTable, n: int, length, rng, unstable: bool = False,
                 margin: float = 0.05) -> list[Seed]:
    """Seeds centred at invariant-measure samples with random cone slopes.

    ``length`` is a number or a (lo, hi) range sampled log-uniformly.
    Centres closer than ``margin`` (plus half the seed) to grazing are
    redrawn.
    """
    lo, hi = unstable_cone(table) if unstable else stable_cone(table)
    out = []
    while len(out) < n:
        idx, r, phi = sample_invariant(table, 4 * (n - len(out)) + 8, rng)
        for a in range(len(idx)):
            if len(out) == n:
                break
            if np.ndim(length) == 0:
                ell = float(length)
            else:
                ell = float(np.exp(rng.uniform(math.log(length[0]), math.log(length[1]))))
            slope = float(rng.uniform(lo, hi))
            if abs(phi[a]) + 0.5 * ell + margin >= HALF_PI:
                continue
            out.append(make_seed(table, int(idx[a]), float(r[a]), float(phi[a]), ell, slope, unstable))
    return out


@dataclass
class StableCurve:
    """One member of a family: an s-interval of the seed and its image polyline."""

    scatterer: int
    s: np.ndarray
    r: np.ndarray
    phi: np.ndarray
    sigma: np.ndarray  # Birkhoff sum of flights back to the seed, per point
    length: float
    generation: int
    ident: int
    parent: int
    long_ancestor: bool
    itinerary: tuple = ()

    @property
    def s_lo(self) -> float:
        return float(self.s[0])

    @property
    def s_hi(self) -> float:
        return float(self.s[-1])

    @property
    def min_sigma(self) -> float:
        return float(self.sigma.min())

    def weight_sup(self, t: float) -> float:
        """max over the polyline of exp(-t Sigma tau); a lower bound on the true sup."""
        return math.exp(-t * self.min_sigma)


# ---------------------------------------------------------------------------
# subdivision


def subdivide_lengths(length: float, delta: float) -> list[float]:
    """Piece lengths, listed from the smaller-r end, for a component of ``length``.

    With length = l delta + rho: rho = 0 gives l pieces of delta; rho >= delta/2
    gives the rho piece first and then l pieces of delta; 0 < rho < delta/2
    gives a delta/2 tip, l - 1 pieces of delta and a rho + delta/2 tip.
    Components no longer than delta are kept whole.
    """
    if length <= delta * (1 + _REL):
        return [length]
    ell = math.floor(length / delta)
    rho = length - ell * delta
    if rho < _REL * delta:
        return [delta] * ell
    if delta - rho < _REL * delta:
        return [delta] * (ell + 1)
    if rho >= delta / 2:
        return [rho] + [delta] * ell
    return [delta / 2] + [delta] * (ell - 1) + [rho + delta / 2]


# ---------------------------------------------------------------------------
# families


@dataclass
class GenerationRecord:
    """Per-member data of one generation, enough to form every weighted sum."""

    n: int
    delta: float
    lengths: np.ndarray
    min_sigma: np.ndarray
    long_ancestor: np.ndarray
    s_lo: np.ndarray
    s_hi: np.ndarray
    complete: bool = True

    @property
    def count(self) -> int:
        return len(self.lengths)

    def masks(self):
        long_ = self.lengths >= self.delta / 3
        return long_, ~long_, ~self.long_ancestor

    def weights(self, t: float) -> np.ndarray:
        return np.exp(-t * self.min_sigma)

    def sums(self, t: float) -> "FamilySums":
        w = self.weights(t)
        L, S, I = self.masks()
        return FamilySums(t, self.n, math.fsum(w), math.fsum(w[L]), math.fsum(w[S]), math.fsum(w[I]),
                          int(L.sum()), int(S.sum()), int(I.sum()), self.complete)

    def exact_sums(self, t: float):
        """(G, L, S, I) as exact rational sums of the stored float weights."""
        w = self.weights(t)
        L, S, I = self.masks()

        def tot(v):
            return sum((Fraction(float(x)) for x in v), Fraction(0))

        return tot(w), tot(w[L]), tot(w[S]), tot(w[I])


@dataclass(frozen=True)
class FamilySums:
    t: float
    n: int
    G: float
    L: float
    S: float
    I: float
    n_long: int
    n_short: int
    n_isolated: int
    complete: bool = True

    @property
    def ratio(self) -> float:
        return self.S / self.G if self.G > 0 else math.nan


@dataclass
class CurveFamily:
    origin: Seed
    n: int
    delta: float
    history: list = field(repr=False)
    table: BilliardTable = field(repr=False)
    _pts: dict = field(repr=False)
    _pieces: dict = field(repr=False)
    pruned: bool = False
    exploded: bool = False
    diagnostics: dict = field(default_factory=dict)

    @property
    def members(self) -> list[StableCurve]:
        P, X = self._pieces, self._pts
        bounds = np.searchsorted(X["pid"], np.arange(len(P["scat"]) + 1))
        out = []
        for k in range(len(P["scat"])):
            a, b = bounds[k], bounds[k + 1]
            out.append(StableCurve(int(P["scat"][k]), X["s"][a:b], X["r"][a:b], X["phi"][a:b], X["sig"][a:b],
                                   float(P["len"][k]), self.n, k, int(P["parent"][k]), bool(P["long"][k]),
                                   tuple(int(v) for v in P["itin"][k])))
        return out

    def sums(self, t: float, n: int | None = None) -> FamilySums:
        return self.history[self.n if n is None else n].sums(t)

    def sums_table(self, t_list, n_values=None) -> list[FamilySums]:
        n_values = range(len(self.history)) if n_values is None else n_values
        return [self.history[n].sums(t) for t in t_list for n in n_values]


class _Grower:
    def __init__(self, table: BilliardTable, seed: Seed, delta: float, res: float, min_points: int,
                 cut_tol: float, max_rounds: int):
        self.table = table
        self.seed = seed
        self.delta = delta
        self.res = res
        self.min_points = min_points
        L = seed.length
        self.s_tol = min(cut_tol, 1e-6 * L) / L
        self.max_rounds = max_rounds
        self.step = map_arrays if seed.unstable else inverse_map_arrays
        self.diag = {"resolution_loss": 0, "hidden_cuts": 0, "cone_segments": 0, "cone_violations": 0,
                     "evaluations": 0}
        lo, hi = unstable_cone(table) if seed.unstable else stable_cone(table)
        self.cone = (lo, hi)

    # exact images of seed points after n steps
    def evaluate(self, s, n):
        i, r, p = self.seed.point(s)
        sig = np.zeros(len(s))
        syms = np.empty((len(s), n), dtype=np.int64)
        for k in range(n):
            j, r, p, tau, kx, ky = self.step(self.table, i, r, p, check_grazing=False)
            syms[:, k] = _encode(j, kx, ky)
            sig = sig + tau
            i = j
        self.diag["evaluations"] += len(s) * n
        return i, r, p, sig, syms

    def seglen(self, i, r, p):
        per = self.table.perimeters[i[:-1]]
        dr = r[1:] - r[:-1]
        dr = dr - per * np.round(dr / per)
        return np.hypot(dr, p[1:] - p[:-1]), dr

    def initial(self):
        m = max(self.min_points, int(math.ceil(self.seed.length / self.res)) + 1)
        s = np.linspace(0.0, 1.0, m)
        i, r, p = self.seed.point(s)
        per = self.table.perimeters[i]
        pts = {"pid": np.zeros(m, np.int64), "s": s, "i": i, "r": np.mod(r, per), "phi": p, "sig": np.zeros(m)}
        pieces = {"scat": np.array([self.seed.scatterer]), "len": np.array([self.seed.length]),
                  "gen": np.array([0]), "long": np.array([False]), "parent": np.array([-1]),
                  "itin": np.zeros((1, 0), np.int64)}
        return pts, pieces

    def advance(self, pts, pieces, n):
        """One backward step: generation n - 1 -> n (before subdivision)."""
        j, r1, p1, tau, kx, ky = self.step(self.table, pts["i"], pts["r"], pts["phi"], check_grazing=False)
        eid = pts["pid"].copy()
        s = pts["s"].copy()
        sig = pts["sig"] + tau
        sym = _encode(j, kx, ky)
        nobis = np.zeros(len(s), bool)
        itin = pieces["itin"]
        for _ in range(self.max_rounds):
            same_e = eid[:-1] == eid[1:]
            same_sym = sym[:-1] == sym[1:]
            ds = s[1:] - s[:-1]
            seg, _ = self.seglen(j, r1, p1)
            seg = np.where(same_sym, seg, np.inf)
            need = same_e & ~nobis[:-1] & (ds > self.s_tol) & ((~same_sym) | (seg > self.res))
            # runs with too few points get every segment halved
            brk = np.concatenate([[True], ~(same_e & same_sym)])
            run = np.cumsum(brk) - 1
            cnt = np.bincount(run)
            small = cnt[run[:-1]] < self.min_points
            need |= same_e & same_sym & small & ~nobis[:-1] & (ds > self.s_tol)
            a = np.flatnonzero(need)
            if a.size == 0:
                break
            sm = 0.5 * (s[a] + s[a + 1])
            ii, rr, pp, gg, syms = self.evaluate(sm, n)
            ok = np.all(syms[:, : n - 1] == itin[eid[a]], axis=1) if n > 1 else np.ones(len(a), bool)
            if not ok.all():
                nobis[a[~ok]] = True
                self.diag["hidden_cuts"] += int((~ok).sum())
            a, ii, rr, pp, gg, sm = a[ok], ii[ok], rr[ok], pp[ok], gg[ok], sm[ok]
            ins = a + 1
            eid = np.insert(eid, ins, eid[a])
            s = np.insert(s, ins, sm)
            j = np.insert(j, ins, ii)
            r1 = np.insert(r1, ins, rr)
            p1 = np.insert(p1, ins, pp)
            sig = np.insert(sig, ins, gg)
            sym = np.insert(sym, ins, syms[ok, n - 1])
            nobis = np.insert(nobis, ins, False)
        # split into smooth components
        brk = np.concatenate([[True], ~((eid[:-1] == eid[1:]) & (sym[:-1] == sym[1:]))])
        run = np.cumsum(brk) - 1
        cnt = np.bincount(run)
        keep = cnt[run] >= 2
        self.diag["resolution_loss"] += int((cnt < 2).sum())
        eid, s, j, r1, p1, sig, sym, run = (x[keep] for x in (eid, s, j, r1, p1, sig, sym, run))
        _, run = np.unique(run, return_inverse=True)
        return {"pid": run, "s": s, "i": j, "r": r1, "phi": p1, "sig": sig, "sym": sym, "parent": eid}

    def lengths(self, comp, diagnose=True):
        seg, dr = self.seglen(comp["i"], comp["r"], comp["phi"])
        inside = comp["pid"][:-1] == comp["pid"][1:]
        n_runs = int(comp["pid"][-1]) + 1 if len(comp["pid"]) else 0
        length = np.bincount(comp["pid"][:-1][inside], weights=seg[inside], minlength=n_runs)
        drsum = np.bincount(comp["pid"][:-1][inside], weights=dr[inside], minlength=n_runs)
        if not diagnose:
            return length, drsum
        # cone diagnostics at polyline resolution
        good = inside & (seg > 1e-9)
        slope = (comp["phi"][1:] - comp["phi"][:-1])[good] / np.where(dr[good] == 0, 1e-300, dr[good])
        lo, hi = self.cone
        tol = 0.05 * (hi - lo)
        self.diag["cone_segments"] += int(good.sum())
        self.diag["cone_violations"] += int(np.sum((slope < lo - tol) | (slope > hi + tol)))
        return length, drsum

    def subdivide(self, comp, length, drsum, n, delta):
        """Cut every component longer than delta; returns (pts, pieces-part)."""
        bounds = np.searchsorted(comp["pid"], np.arange(len(length) + 1))
        cut_s, cut_pid = [], []
        for k in np.flatnonzero(length > delta * (1 + _REL)):
            a, b = bounds[k], bounds[k + 1]
            parts = subdivide_lengths(float(length[k]), delta)
            pos = np.cumsum(parts)[:-1]
            seg, _ = self.seglen(comp["i"][a:b], comp["r"][a:b], comp["phi"][a:b])
            c = np.concatenate([[0.0], np.cumsum(seg)])
            if drsum[k] < 0:  # s runs towards smaller r
                pos = c[-1] - pos[::-1]
            sc = np.interp(pos, c, comp["s"][a:b])
            cut_s.append(sc)
            cut_pid.append(np.full(len(sc), k))
        if not cut_s:
            pts = {k: comp[k] for k in ("pid", "s", "i", "r", "phi", "sig")}
            return pts, np.arange(len(length)), length
        cs = np.concatenate(cut_s)
        cp = np.concatenate(cut_pid)
        ii, rr, pp, gg, _ = self.evaluate(cs, n)
        # each cut point ends one child and starts the next
        pid = np.concatenate([comp["pid"], cp, cp])
        s = np.concatenate([comp["s"], cs, cs])
        side = np.concatenate([np.zeros(len(comp["s"]), np.int64), np.zeros(len(cs), np.int64), np.ones(len(cs), np.int64)])
        order = np.lexsort((side, s, pid))
        pid, s, side = pid[order], s[order], side[order]
        i = np.concatenate([comp["i"], ii, ii])[order]
        r = np.concatenate([comp["r"], rr, rr])[order]
        phi = np.concatenate([comp["phi"], pp, pp])[order]
        sig = np.concatenate([comp["sig"], gg, gg])[order]
        is_cut = np.concatenate([np.zeros(len(comp["s"]), bool), np.ones(2 * len(cs), bool)])[order]
        # child index within the component: count of "start" cut points so far
        starts = is_cut & (side == 1)
        newc = np.concatenate([[True], pid[1:] != pid[:-1]]) | starts
        child = np.cumsum(newc) - 1
        parent_comp = pid[newc]
        pts = {"pid": child, "s": s, "i": i, "r": r, "phi": phi, "sig": sig}
        n_child = int(child[-1]) + 1
        clen, _ = self.lengths({"pid": child, "i": i, "r": r, "phi": phi}, diagnose=False)
        return pts, parent_comp, clen[:n_child]


def grow_family(table: BilliardTable, seed: Seed, n: int, delta: float, t_list=(), res: float = 1e-4,
                min_points: int = 8, cut_tol: float = 1e-10, budget: int = 10**7, prune_long: bool = False,
                strict: bool = False, max_rounds: int = 80) -> CurveFamily:
    """Generations 0..n of G_n^delta(W) with L/S/I bookkeeping.

    Each generation maps every member one step backwards, cuts at symbol
    changes, and subdivides components longer than ``delta`` (tips at the
    smaller-r end).  With ``prune_long`` the descendants of long members are
    dropped after their generation is recorded; I sums stay exact, G/L/S of
    later generations are then marked incomplete, and growth stops at the
    first empty generation (recorded as ``diagnostics["emptied"]``).  More than ``budget``
    members raises :class:`PieceExplosion` when ``strict``; otherwise the
    partial family is returned with ``exploded=True``.  ``t_list`` is
    accepted for interface symmetry; sums are formed on demand for any t.
    """
    del t_list
    if n < 0:
        raise ValueError("n must be >= 0")
    g = _Grower(table, seed, delta, res, min_points, cut_tol, max_rounds)
    pts, pieces = g.initial()
    history = [GenerationRecord(0, delta, pieces["len"].copy(), np.array([0.0]), np.array([False]),
                                np.array([0.0]), np.array([1.0]))]
    exploded = False
    complete = True
    done = 0
    for k in range(1, n + 1):
        if prune_long and k >= 2:
            drop = pieces["long"] | (pieces["len"] >= delta / 3)
            if drop.any():
                complete = False
                pts, pieces = _select(pts, pieces, ~drop)
            if len(pieces["len"]) == 0:
                # every later generation of the lineage is empty as well
                history.append(GenerationRecord(k, delta, np.zeros(0), np.zeros(0), np.zeros(0, bool),
                                                np.zeros(0), np.zeros(0), complete))
                done = k
                g.diag["emptied"] = k
                break
        comp = g.advance(pts, pieces, k)
        if len(comp["s"]) == 0:
            break
        length, drsum = g.lengths(comp)
        parent = comp["parent"][np.searchsorted(comp["pid"], np.arange(len(length)))]
        new_pts, comp_of_child, clen = g.subdivide(comp, length, drsum, k, delta)
        par = parent[comp_of_child]
        cfirst = np.searchsorted(new_pts["pid"], np.arange(len(clen)))
        comp_sym = comp["sym"][np.searchsorted(comp["pid"], comp_of_child)]
        long_anc = pieces["long"][par] | ((pieces["gen"][par] >= 1) & (pieces["len"][par] >= delta / 3))
        pieces = {"scat": new_pts["i"][cfirst], "len": clen, "gen": np.full(len(clen), k),
                  "long": long_anc, "parent": par,
                  "itin": np.concatenate([pieces["itin"][par], comp_sym[:, None]], axis=1)}
        pts = new_pts
        minsig = np.full(len(clen), np.inf)
        np.minimum.at(minsig, pts["pid"], pts["sig"])
        last = np.searchsorted(pts["pid"], np.arange(1, len(clen) + 1)) - 1
        history.append(GenerationRecord(k, delta, clen.copy(), minsig, long_anc.copy(),
                                        pts["s"][cfirst].copy(), pts["s"][last].copy(), complete))
        done = k
        if len(clen) > budget:
            exploded = True
            if strict:
                raise PieceExplosion(f"{len(clen)} members at generation {k} exceed budget {budget}")
            break
    g.diag["generations"] = done
    return CurveFamily(seed, done, delta, history, table, pts, pieces, prune_long, exploded, g.diag)


def _select(pts, pieces, keep):
    newid = np.cumsum(keep) - 1
    pk = keep[pts["pid"]]
    out_pts = {k: v[pk] for k, v in pts.items()}
    out_pts["pid"] = newid[out_pts["pid"]]
    return out_pts, {k: v[keep] for k, v in pieces.items()}


def pull_back(table: BilliardTable, seed: Seed, t: float = 0.0, **kw) -> list[StableCurve]:
    """Smooth components of T^{-1}W (no subdivision)."""
    fam = grow_family(table, seed, 1, math.inf, **kw)
    return fam.members


def refine_family(family: CurveFamily, delta: float) -> CurveFamily:
    """Re-subdivide the last generation of ``family`` at a smaller scale, in place.

    Every new member lies in exactly one old member, which is what makes the
    scale ladder delta0 / 2^N nested.  Ancestor flags are inherited from the
    coarse lineage.
    """
    if delta > family.delta:
        raise ValueError("refinement needs a smaller delta")
    g = _Grower(family.table, family.origin, delta, math.inf, 2, 1e-10, 1)
    P, X = family._pieces, family._pts
    comp = {k: X[k] for k in ("pid", "s", "i", "r", "phi", "sig")}
    length, drsum = g.lengths(comp)
    new_pts, comp_of_child, clen = g.subdivide(comp, length, drsum, family.n, delta)
    cfirst = np.searchsorted(new_pts["pid"], np.arange(len(clen)))
    last = np.searchsorted(new_pts["pid"], np.arange(1, len(clen) + 1)) - 1
    pieces = {"scat": P["scat"][comp_of_child], "len": clen, "gen": P["gen"][comp_of_child],
              "long": P["long"][comp_of_child], "parent": P["parent"][comp_of_child],
              "itin": P["itin"][comp_of_child]}
    minsig = np.full(len(clen), np.inf)
    np.minimum.at(minsig, new_pts["pid"], new_pts["sig"])
    rec = GenerationRecord(family.n, delta, clen.copy(), minsig, pieces["long"].copy(),
                           new_pts["s"][cfirst].copy(), new_pts["s"][last].copy(), family.history[-1].complete)
    history = list(family.history[:-1]) + [rec]
    fam = CurveFamily(family.origin, family.n, delta, history, family.table, new_pts, pieces,
                      family.pruned, family.exploded, dict(family.diagnostics))
    fam.diagnostics["refined_from"] = family.delta
    return fam


def scale_ladder(family: CurveFamily, levels: int = 3) -> list[CurveFamily]:
    """[family, family at delta/2, family at delta/4, ...] by in-place refinement."""
    out = [family]
    for _ in range(levels - 1):
        out.append(refine_family(out[-1], out[-1].delta / 2))
    return out


def check_nesting(fine: CurveFamily, coarse: CurveFamily) -> tuple[int, int]:
    """(members checked, members inside exactly one coarse member) for long fine members.

    Containment is tested on the seed parameter intervals together with
    equal itineraries, which is containment of the curves themselves.
    """
    fr, cr = fine.history[-1], coarse.history[-1]
    long_ = np.flatnonzero(fr.lengths >= fine.delta / 3)
    fit = fine._pieces["itin"]
    cit = coarse._pieces["itin"]
    order = np.argsort(cr.s_lo, kind="stable")
    c_lo, c_hi = cr.s_lo[order], cr.s_hi[order]
    ok = 0
    for k in long_:
        hits = 0
        hi_idx = np.searchsorted(c_lo, fr.s_lo[k], side="right")
        for m in range(max(0, hi_idx - 3), min(len(c_lo), hi_idx + 1)):
            if c_lo[m] <= fr.s_lo[k] and fr.s_hi[k] <= c_hi[m] and np.array_equal(cit[order[m]], fit[k]):
                hits += 1
        ok += hits == 1
    return len(long_), ok


# ---------------------------------------------------------------------------
# complexity


@dataclass
class ComplexityResult:
    K: int
    n_values: list
    max_components: list  # max over sampled curves of the number of components
    passed: bool
    worst_excess: int
    n_samples: int
    fit_n_max: int


def singular_points(table: BilliardTable, n: int, rng, unstable: bool = False, eps: float = 1e-7):
    """Points on T S_0 (or T^{-1} S_0 for the reversed construction) for stable seeds."""
    per = table.perimeters
    idx = rng.choice(table.n_scatterers, size=n, p=per / per.sum())
    r = rng.random(n) * per[idx]
    sgn = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    phi = sgn * (HALF_PI - eps)
    step = inverse_map_arrays if unstable else map_arrays
    j, r1, p1, _, _, _ = step(table, idx, r, phi, check_grazing=False)
    return j, r1, p1


def verify_complexity(table: BilliardTable, n_max: int = 8, samples: int = 100, seed: int = 0,
                      length: float = 1e-9, singular_fraction: float = 0.5, fit_n_max: int | None = None,
                      unstable: bool = False) -> ComplexityResult:
    """Number of smooth components of T^{-n}W for tiny W, n = 1..n_max.

    Half of the curves (by default) are centred on T S_0, where cuts are
    guaranteed; the rest at invariant-measure samples.  K is fitted as the
    smallest integer with components <= K n + 1 for n <= ``fit_n_max``
    (default n_max // 2), then the bound is tested up to n_max.
    """
    rng = np.random.default_rng(seed)
    fit_n_max = fit_n_max or max(1, n_max // 2)
    lo, hi = unstable_cone(table) if unstable else stable_cone(table)
    n_sing = int(round(samples * singular_fraction))
    seeds = []
    j, r, p = singular_points(table, n_sing, rng, unstable)
    for a in range(n_sing):
        if abs(p[a]) + length >= HALF_PI:
            continue
        seeds.append(make_seed(table, int(j[a]), float(r[a]), float(p[a]), length, float(rng.uniform(lo, hi)), unstable))
    seeds += sample_seeds(table, samples - len(seeds), length, rng, unstable, margin=1e-3)
    comps = np.zeros((len(seeds), n_max), np.int64)
    for a, sd in enumerate(seeds):
        fam = grow_family(table, sd, n_max, math.inf)
        for k in range(1, fam.n + 1):
            comps[a, k - 1] = fam.history[k].count
    mx = comps.max(axis=0)
    ns = np.arange(1, n_max + 1)
    K = max(1, int(max(math.ceil((mx[k - 1] - 1) / k) for k in range(1, fit_n_max + 1))))
    excess = mx - (K * ns + 1)
    return ComplexityResult(K, ns.tolist(), mx.tolist(), bool(np.all(excess <= 0)), int(excess.max()),
                            len(seeds), fit_n_max)


# ---------------------------------------------------------------------------
# n-step expansion and growth lemma


@dataclass
class GrowthCheckResult:
    theta0: float
    n0: int
    n0_recipe: int | None
    delta_bar: float | None
    t_values: list
    passed: dict
    ratios: dict
    notes: list = field(default_factory=list)

    @property
    def all_passed(self) -> bool:
        return all(self.passed.values())


def default_delta0(table: BilliardTable) -> float:
    return 0.05 * float(table.perimeters.min())


def n_step_expansion_check(table: BilliardTable, t0: float, theta0: float, K: int, delta0: float | None = None,
                           n_cap: int = 4, samples: int = 100, N_max: int = 20, seed: int = 0) -> GrowthCheckResult:
    """Search delta_bar = delta0 / 2^N with G_{n0}^{delta0}(W, t) < theta0^{n0 t} for sampled short W.

    n0 comes from the recipe (K n0 + 1)^{1/n0} <= (theta0 e^{tau_min})^{t0};
    when that n0 exceeds ``n_cap`` the check runs at n_cap and says so.
    Both t0 and 2 t0 are tested; S_{n0}^{delta_bar} <= G_{n0}^{delta0} is
    checked on the same curves.
    """
    from .pressure import n0_recipe, validate_theta0

    validate_theta0(theta0, table.tau_min)
    delta0 = delta0 or default_delta0(table)
    try:
        recipe = n0_recipe(K, t0, theta0, table.tau_min, n_cap=10**12)
    except ValueError:
        recipe = None
    n0 = max(2, min(recipe if recipe is not None else n_cap, n_cap))
    notes = []
    if recipe is None or recipe > n_cap:
        notes.append(f"recipe n0 = {recipe}; empirical check run at n0 = {n0}")
    rng = np.random.default_rng(seed)
    ts = [t0, 2 * t0]
    worst = {}
    for N in range(N_max + 1):
        dbar = delta0 / 2**N
        seeds = sample_seeds(table, samples, dbar, rng, margin=1e-3)
        ok = True
        worst = {t: 0.0 for t in ts}
        s_ok = True
        for sd in seeds:
            fam = grow_family(table, sd, n0, delta0)
            fine = grow_family(table, sd, n0, dbar) if fam.history[n0].count > 1 else fam
            for t in ts:
                G = fam.sums(t).G
                worst[t] = max(worst[t], G / theta0 ** (n0 * t))
                ok &= G < theta0 ** (n0 * t)
                s_ok &= fine.sums(t).S <= G * (1 + 1e-12)
            if not ok:
                break
        if ok:
            return GrowthCheckResult(theta0, n0, recipe, dbar, ts, {"eq_theta": True, "S_le_G": bool(s_ok)},
                                     {"worst_G_over_bound": worst, "N": N}, notes)
    return GrowthCheckResult(theta0, n0, recipe, None, ts, {"eq_theta": False, "S_le_G": False},
                             {"worst_G_over_bound": worst, "N": None}, notes + ["NotFound for N <= %d" % N_max])


def growth_lemma_check(table: BilliardTable, t: float, delta: float, m1: int, theta0: float, K: int, c1: float,
                       log_q: dict, samples: int = 100, n_i_max: int | None = None, n_g_max: int = 4,
                       seed: int = 0, length_range=None) -> GrowthCheckResult:
    """Short-growth and extra-growth bounds on sampled W with |W| <= delta.

    ``log_q`` maps n to log Q_n(t) from class data.  I_n is tracked on the
    pruned lineage up to ``n_i_max`` (default 2 m1).  The lineage usually
    empties long before that, after which I_n = 0 exactly, so m1 can be the
    recipe value of n0.  A lineage still alive at ``n_i_max`` < 2 m1 leaves
    the bound untested and fails the check.  G_n is formed on full families
    up to ``n_g_max``.
    """
    n_i_max = min(n_i_max or 2 * m1, 2 * m1)
    length_range = length_range or (delta * 1e-3, delta)
    L0 = math.pi * math.sqrt(1 + table.kmin**-2)
    rng = np.random.default_rng(seed)
    seeds = sample_seeds(table, samples, length_range, rng, margin=1e-3)
    worst_i = 0.0
    worst_small = 0.0
    worst_g = 0.0
    unresolved = 0
    last_alive = 0
    for sd in seeds:
        fam = grow_family(table, sd, n_i_max, delta, prune_long=True)
        emptied = fam.diagnostics.get("emptied")
        if emptied is None and n_i_max < 2 * m1:
            unresolved += 1
        last_alive = max(last_alive, (emptied or fam.n + 1) - 1)
        for n in range(1, fam.n + 1):
            I = fam.history[n].sums(t).I
            bound = theta0 ** (n * t)
            if n >= m1:
                worst_i = max(worst_i, I / bound)
            else:
                worst_small = max(worst_small, I / (K * m1 * bound))
        full = grow_family(table, sd, n_g_max, delta)
        for n in range(1, full.n + 1):
            if n not in log_q:
                continue
            G = full.history[n].sums(t).G
            rhs = 2 * L0 / (c1 * delta) * math.exp(log_q[n])
            worst_g = max(worst_g, G / rhs)
    passed = {"short_growth": worst_i <= 1.0 and unresolved == 0, "short_growth_small_n": worst_small <= 1.0,
              "extra_growth": worst_g <= 1.0}
    notes = [f"{unresolved} lineages alive at n = {n_i_max}"] if unresolved else []
    return GrowthCheckResult(theta0, m1, None, delta, [t], passed,
                             {"I_over_bound": worst_i, "I_small_over_bound": worst_small,
                              "G_over_bound": worst_g, "L0": L0, "last_nonempty_I": last_alive}, notes)


# ---------------------------------------------------------------------------
# SSP diagnostics


@dataclass
class SSPDiagnostics:
    t: float
    delta: float
    n_values: list
    ratios: np.ndarray  # (curves, n) S/G for long seeds
    n_t: int | None
    summand_sup: np.ndarray  # sup over long seeds of exp(-n t tau_min) / L_n
    decay_rate: float  # fitted log ratio of successive summands
    short_nstar: list
    counts: np.ndarray = field(repr=False, default=None)
    reversed: "SSPDiagnostics | None" = None
    agree: bool | None = None
    max_z: float | None = None

    @property
    def mean_ratio(self) -> np.ndarray:
        return np.nanmean(self.ratios, axis=0)

    @property
    def se_ratio(self) -> np.ndarray:
        k = self.ratios.shape[0]
        return np.nanstd(self.ratios, axis=0, ddof=1) / math.sqrt(max(k, 1)) if k > 1 else np.zeros(self.ratios.shape[1])

    def to_dict(self) -> dict:
        d = {"t": self.t, "delta": self.delta, "n_values": list(self.n_values),
             "mean_ratio": self.mean_ratio.tolist(), "max_ratio": np.nanmax(self.ratios, axis=0).tolist(),
             "n_t": self.n_t, "summand_sup": self.summand_sup.tolist(), "decay_rate": self.decay_rate,
             "short_nstar": self.short_nstar, "agree": self.agree, "max_z": self.max_z}
        if self.reversed is not None:
            d["reversed"] = self.reversed.to_dict()
        return d


def _first_stable(ok_by_n, n_values):
    """Smallest n after which every entry is True (None if the last one fails)."""
    n_t = None
    for k in range(len(n_values) - 1, -1, -1):
        if not ok_by_n[k]:
            break
        n_t = n_values[k]
    return n_t


def _ssp_one(table, t, delta, n_max, n_long, n_short, rng, unstable, res):
    long_seeds = sample_seeds(table, n_long, (delta / 3, delta), rng, unstable)
    short_seeds = sample_seeds(table, n_short, (delta * 1e-4, delta / 3), rng, unstable)
    n_values = list(range(1, n_max + 1))
    ratios = np.full((len(long_seeds), n_max), np.nan)
    counts = np.zeros((len(long_seeds), n_max), np.int64)
    summ = np.zeros((len(long_seeds), n_max))
    for a, sd in enumerate(long_seeds):
        fam = grow_family(table, sd, n_max, delta, res=res)
        for n in range(1, fam.n + 1):
            sm = fam.history[n].sums(t)
            ratios[a, n - 1] = sm.ratio
            counts[a, n - 1] = fam.history[n].count
            summ[a, n - 1] = math.exp(-n * t * table.tau_min) / sm.L if sm.L > 0 else math.inf
    worst = np.nanmax(ratios, axis=0)
    n_t = _first_stable(worst <= 0.25, n_values)
    sup = summ.max(axis=0)
    tail = [k for k in range(n_max) if n_t is not None and n_values[k] >= n_t and np.isfinite(sup[k])]
    if len(tail) >= 2:
        decay = float(np.polyfit([n_values[k] for k in tail], np.log(sup[tail]), 1)[0])
    else:
        fin = np.isfinite(sup)
        decay = float(np.polyfit(np.array(n_values)[fin], np.log(sup[fin]), 1)[0]) if fin.sum() >= 2 else math.nan
    nstar = []
    for sd in short_seeds:
        fam = grow_family(table, sd, n_max, delta, res=res)
        r = [fam.history[n].sums(t).ratio for n in range(1, fam.n + 1)]
        nstar.append(_first_stable([x <= 0.5 for x in r], n_values[: len(r)]))
    return SSPDiagnostics(t, delta, n_values, ratios, n_t, sup, decay, nstar, counts)


def ssp_check(table: BilliardTable, t: float, delta: float, n_max: int = 7, n_long: int = 20, n_short: int = 10,
              seed: int = 0, reverse: bool = True, res: float = 1e-4) -> SSPDiagnostics:
    """S/G ratios, n_t, the summand sequence, and the time-reversed twin.

    The twin uses unstable seeds iterated forward under T with an
    independent random stream.  Agreement is judged per n by
    |mean_f - mean_r| <= 3 sqrt(se_f^2 + se_r^2), with a floor of one
    curve's worth of ratio resolution (1 / number of members).
    """
    rng = np.random.default_rng(seed)
    fwd = _ssp_one(table, t, delta, n_max, n_long, n_short, rng, False, res)
    if reverse:
        rng_r = np.random.default_rng([seed, 1])
        rev = _ssp_one(table, t, delta, n_max, n_long, n_short, rng_r, True, res)
        fwd.reversed = rev
        diff = np.abs(fwd.mean_ratio - rev.mean_ratio)
        se = np.sqrt(fwd.se_ratio**2 + rev.se_ratio**2)
        floor = 1.0 / np.maximum(1, np.minimum(fwd.counts.mean(axis=0), rev.counts.mean(axis=0)))
        z = diff / np.maximum(se, floor)
        fwd.max_z = float(np.nanmax(z))
        fwd.agree = bool(np.all(z <= 3.0))
    return fwd


def find_ssp_scale(table: BilliardTable, t: float, delta0: float | None = None, N_range=range(0, 8), **kw):
    """First delta = delta0 / 2^N at which ssp_check finds a finite n_t."""
    delta0 = delta0 or default_delta0(table)
    last = None
    for N in N_range:
        d = ssp_check(table, t, delta0 / 2**N, **kw)
        last = d
        if d.n_t is not None:
            return N, d
    return None, last
