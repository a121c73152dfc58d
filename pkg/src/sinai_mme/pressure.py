"""Weighted sums Q_n(t), the pressure P_*(t), its zero and the condition checks.

All quantities are computed from the itinerary class data produced by
:mod:`sinai_mme.symbolic`.  The class sup of exp(-t Sigma_n tau) is
exp(-t * min_tau) over sampled members, so Q_n(t) here is a lower bound on
the true sum and P_*(t) is estimated by the slope of log Q_n(t) in n.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import BadTheta, NonMonotoneEstimate, NoSignChange, OutOfGrid
from .symbolic import ClassData, CountResult, SlopeEstimate, _lsq_slope, estimate_slope, tail_drift

LOG2 = math.log(2.0)


# ---------------------------------------------------------------------------
# Q_n(t)


def log_qn(classes: ClassData, t: float) -> float:
    """log of sum over classes of exp(-t * min_tau)."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if classes.count == 0:
        return -math.inf
    if t == 0:
        return math.log(classes.count)
    return float(logsumexp(-t * classes.min_tau))


def qn(classes: ClassData, t: float) -> float:
    """Q_n(t) lower bound: sum over classes of the sampled class sup of exp(-t Sigma_n tau)."""
    if t == 0:
        return float(classes.count)
    return float(np.exp(-t * classes.min_tau).sum())


def class_weights(classes: ClassData, t: float) -> np.ndarray:
    """Raw per-class weights a_i = sup exp(-t Sigma_n tau)."""
    return np.exp(-t * classes.min_tau)


def forconv_holds(classes: ClassData, t: float, s: float, tau_min: float) -> bool:
    """Q_n(t) <= exp(n (s - t) tau_min) Q_n(s) for t > s, term by term.

    Each class satisfies min_tau >= n tau_min, so the comparison holds
    summand-wise; the check is done on the summands to stay exact.
    """
    if t < s:
        t, s = s, t
    n = classes.n
    lhs = np.exp(-t * classes.min_tau)
    rhs = np.exp(n * (s - t) * tau_min) * np.exp(-s * classes.min_tau)
    # exp(-t x) = exp(-(t-s) x) exp(-s x) <= exp(-(t-s) n tau_min) exp(-s x)
    return bool(np.all(classes.min_tau >= n * tau_min * (1 - 1e-12)) and lhs.sum() <= rhs.sum() * (1 + 1e-12))


def hoelder_holds(classes: ClassData, t: float, s: float, eta: float) -> tuple:
    """Check sum a^u <= (sum a^t)^eta (sum a^s)^(1-eta) with u = eta t + (1-eta) s.

    ``a_i = exp(-min_tau_i)``.  Returns ``(lhs, rhs, ok)`` in log form.
    """
    if not 0 < eta < 1:
        raise ValueError("eta must lie in (0, 1)")
    u = eta * t + (1 - eta) * s
    x = -classes.min_tau
    lhs = float(logsumexp(u * x))
    rhs = float(eta * logsumexp(t * x) + (1 - eta) * logsumexp(s * x))
    return lhs, rhs, lhs <= rhs + 1e-12 * max(1.0, abs(rhs))


# ---------------------------------------------------------------------------
# P_*(t)


def estimate_pstar(n_values, log_q, log_q_half=None, window=None, **fit) -> SlopeEstimate:
    """Slope of log Q_n(t) against n with an error bar.

    The error is the larger of the window spread (see
    :func:`symbolic.estimate_slope`) and the slope change between the full
    class data and the half-resolution data ``log_q_half`` on the same
    window.  ``window`` fixes (n1, n2) instead of choosing it.
    """
    n_values = list(n_values)
    log_q = np.asarray(log_q, float)
    if window is None:
        est = estimate_slope(n_values, log_q, **fit)
    else:
        a, b = n_values.index(window[0]), n_values.index(window[1]) + 1
        sl = _lsq_slope(n_values[a:b], log_q[a:b])[0]
        subs = {}
        if a >= 1:
            subs[(n_values[a - 1], n_values[b - 2])] = _lsq_slope(n_values[a - 1 : b - 1], log_q[a - 1 : b - 1])[0]
        err = max((abs(v - sl) for v in subs.values()), default=0.0)
        err = max(err, tail_drift(n_values[:b], log_q[:b]))
        est = SlopeEstimate(sl, err, tuple(window), True, subs)
    err = est.error
    if log_q_half is not None:
        a, b = n_values.index(est.window[0]), n_values.index(est.window[1]) + 1
        half = _lsq_slope(n_values[a:b], np.asarray(log_q_half, float)[a:b])[0]
        err = max(err, abs(half - est.value))
    return SlopeEstimate(est.value, err, est.window, est.converged, est.alternatives)


class PstarEstimator:
    """P_*(t) as a function of t on fixed class data.

    ``n_min`` drops the shallowest depths (the quadtree/line mix is least
    representative there).
    """

    def __init__(self, result: CountResult, n_min: int = 1, n_max: int | None = None, **fit):
        n_max = max(result.n_values) if n_max is None else n_max
        self.n_values = [n for n in result.n_values if n_min <= n <= n_max]
        self.full = [result.classes[n] for n in self.n_values]
        self.half = [result.classes_half[n] for n in self.n_values] if result.classes_half else None
        self.fit = fit

    def log_q(self, t):
        return np.array([log_qn(c, t) for c in self.full])

    def log_q_half(self, t):
        if self.half is None:
            return None
        return np.array([log_qn(c, t) for c in self.half])

    def __call__(self, t, window=None) -> SlopeEstimate:
        return estimate_pstar(self.n_values, self.log_q(t), self.log_q_half(t), window=window, **self.fit)


@dataclass
class PressureCurve:
    t_grid: np.ndarray
    n_values: list
    log_qn: np.ndarray  # shape (len(t_grid), len(n_values))
    pstar: np.ndarray
    err: np.ndarray
    windows: list
    pslope_left: np.ndarray  # nan at the first grid point
    slope_err: np.ndarray
    slope_violation: np.ndarray
    tau_min: float
    tau_max: float
    converged: np.ndarray = field(default=None)

    def index(self, t):
        k = np.flatnonzero(np.isclose(self.t_grid, t, rtol=0, atol=1e-12))
        if k.size == 0:
            raise OutOfGrid(f"t = {t} is not a grid point")
        return int(k[0])

    def convexity_defects(self):
        """Second differences normalised by grid spacing, with their tolerances.

        Returns ``(second_diff, tol)`` for interior points; convexity is
        violated only where second_diff < -tol.
        """
        t, p, e = self.t_grid, self.pstar, self.err
        d = []
        tol = []
        for k in range(1, len(t) - 1):
            h1, h2 = t[k] - t[k - 1], t[k + 1] - t[k]
            d.append((p[k + 1] - p[k]) / h2 - (p[k] - p[k - 1]) / h1)
            tol.append((e[k + 1] + e[k]) / h2 + (e[k] + e[k - 1]) / h1)
        return np.array(d), np.array(tol)


def pressure_curve(result: CountResult, t_grid, tau_min: float, tau_max: float,
                   n_min: int = 1, n_max: int | None = None, **fit) -> PressureCurve:
    """Estimate P_*(t) on ``t_grid`` from one counting run."""
    t_grid = np.asarray(sorted(t_grid), float)
    if np.any(t_grid < 0):
        raise ValueError("t grid must be nonnegative")
    est = PstarEstimator(result, n_min=n_min, n_max=n_max, **fit)
    logs, ps, errs, wins, conv = [], [], [], [], []
    for t in t_grid:
        logs.append(est.log_q(t))
        e = est(t)
        ps.append(e.value)
        errs.append(e.error)
        wins.append(e.window)
        conv.append(e.converged)
    ps, errs = np.array(ps), np.array(errs)
    slope = np.full(len(t_grid), np.nan)
    serr = np.full(len(t_grid), np.nan)
    viol = np.zeros(len(t_grid), dtype=bool)
    for k in range(1, len(t_grid)):
        h = t_grid[k] - t_grid[k - 1]
        slope[k] = (ps[k] - ps[k - 1]) / h
        serr[k] = (errs[k] + errs[k - 1]) / h
        tol = 2 * serr[k]
        viol[k] = not (-tau_max - tol <= slope[k] <= -tau_min + tol)
    return PressureCurve(t_grid, est.n_values, np.array(logs), ps, errs, wins, slope, serr, viol,
                         tau_min, tau_max, np.array(conv))


@dataclass(frozen=True)
class SlopeCheck:
    t: float
    slope: float
    tol: float
    lower: float
    upper: float
    violation: bool


def pressure_slope_left(curve: PressureCurve, t: float, tol: float | None = None) -> SlopeCheck:
    """Left difference slope of P_* at grid point t, checked against [-tau_max, -tau_min].

    The default tolerance is twice the propagated estimator error.  A
    violation is reported, never clamped.
    """
    k = curve.index(t)
    if k == 0:
        raise OutOfGrid("left slope needs a grid point to the left")
    s = float(curve.pslope_left[k])
    tol = 2 * float(curve.slope_err[k]) if tol is None else tol
    lo, hi = -curve.tau_max, -curve.tau_min
    return SlopeCheck(float(t), s, tol, lo, hi, not (lo - tol <= s <= hi + tol))


# ---------------------------------------------------------------------------
# root


@dataclass(frozen=True)
class HtopResult:
    root: float
    bracket: tuple
    p_at_root: float
    err_p: float
    err_t: float
    slope: float
    window: tuple
    evaluations: int


def find_htop(pstar, t_lo: float = 0.0, t_hi: float = 1.0, tol: float = 1e-3,
              max_extend: int = 12) -> HtopResult:
    """Zero of a decreasing pressure estimator by bisection.

    ``pstar(t, window=None)`` returns a :class:`SlopeEstimate` (or anything
    with ``value``/``error``/``window``).  The upper end is doubled until the
    estimator turns negative.  Each probe must fall between the bracket
    values; on the first violation the search restarts with the fit window
    frozen, and a second violation raises :class:`NonMonotoneEstimate`.
    The returned bracket has width <= ``tol``.
    """
    evals = 0

    def run(window):
        nonlocal evals
        lo, hi = t_lo, t_hi
        p_lo = pstar(lo, window=window)
        p_hi = pstar(hi, window=window)
        evals += 2
        if p_lo.value <= 0:
            raise NoSignChange(f"P_*({lo}) = {p_lo.value} is not positive")
        k = 0
        while p_hi.value > 0:
            if k >= max_extend:
                raise NoSignChange(f"P_* stays positive up to t = {hi}")
            lo, p_lo = hi, p_hi
            hi = 2 * hi if hi > 0 else 1.0
            p_hi = pstar(hi, window=window)
            evals += 1
            k += 1
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            p_mid = pstar(mid, window=window)
            evals += 1
            if not (p_hi.value <= p_mid.value <= p_lo.value):
                return None, (lo, hi)
            if p_mid.value > 0:
                lo, p_lo = mid, p_mid
            else:
                hi, p_hi = mid, p_mid
        return (lo, hi, p_lo, p_hi), None

    out, bad = run(None)
    if out is None:
        frozen = pstar(t_hi).window
        out, bad = run(frozen)
        if out is None:
            raise NonMonotoneEstimate(f"estimator not monotone on bracket {bad}", bracket=bad)
    lo, hi, p_lo, p_hi = out
    root = 0.5 * (lo + hi)
    p_root = pstar(root, window=p_hi.window)
    evals += 1
    h = max(hi - lo, 1e-6)
    slope = (p_hi.value - p_lo.value) / h
    # slope over a wider stencil is less noisy
    d = 0.05 * max(root, 1e-3)
    pa, pb = pstar(max(root - d, 0.0), window=p_hi.window), pstar(root + d, window=p_hi.window)
    evals += 2
    slope = (pb.value - pa.value) / (root + d - max(root - d, 0.0))
    err_p = max(p_lo.error, p_hi.error, p_root.error)
    err_t = err_p / abs(slope) if slope != 0 else math.inf
    return HtopResult(root, (lo, hi), p_root.value, err_p, err_t, slope, tuple(p_hi.window), evals)


# ---------------------------------------------------------------------------
# s_*, t_C, n_0


def theta0_interval(tau_min: float) -> tuple:
    return math.exp(-tau_min), math.exp(-tau_min / 2)


def default_theta0(tau_min: float) -> float:
    """Geometric midpoint exp(-3 tau_min / 4) of the admissible interval."""
    return math.exp(-0.75 * tau_min)


def validate_theta0(theta0: float, tau_min: float) -> None:
    lo, hi = theta0_interval(tau_min)
    if not lo < theta0 < hi:
        raise BadTheta(f"theta0 = {theta0} outside ({lo}, {hi})")


@dataclass(frozen=True)
class SStar:
    t: float
    value: float
    bound: float
    check_ok: bool


def s_star(t: float, slope_left: float, theta0: float, tau_min: float | None = None,
           tau_max: float | None = None) -> SStar:
    """s_*(t) = t |P'| / (|P'| + log(theta0) / 2).

    With ``tau_min`` given, theta0 must lie in (e^{-tau_min}, e^{-tau_min/2})
    and the returned record carries the check s_* > t (1 + tau_min / (4 tau_max)).
    """
    if tau_min is not None:
        validate_theta0(theta0, tau_min)
    elif not 0 < theta0 < 1:
        raise BadTheta(f"theta0 = {theta0} must lie in (0, 1)")
    a = abs(slope_left)
    half_log = 0.5 * math.log(theta0)
    if slope_left >= 0 or a <= -half_log:
        raise ValueError("need slope_left < 0 with |slope_left| > |log theta0| / 2")
    val = t * a / (a + half_log)
    if tau_min is not None and tau_max is not None:
        bound = t * (1 + tau_min / (4 * tau_max))
        ok = val > bound if t > 0 else val == 0
    else:
        bound, ok = math.nan, True
    return SStar(t, val, bound, ok)


def t_c(lam: float, tau_min: float, tau_max: float) -> float:
    """t_C = log(Lambda) / (tau_max - tau_min)."""
    return math.log(lam) / (tau_max - tau_min)


def n0_recipe(K: float, t0: float, theta0: float, tau_min: float, n_cap: int = 10**9) -> int:
    """Smallest n0 >= 2 with (K n0 + 1)^(1/n0) <= theta0^t0 e^(tau_min t0).

    Uses log form.  Since (Kn+1)^(1/n) decreases for n >= 2, a doubling
    search followed by bisection finds the threshold.  Raises ValueError if
    the right side is <= 1 (no n0 exists).
    """
    rhs = t0 * (math.log(theta0) + tau_min)
    if rhs <= 0:
        raise ValueError("theta0^t0 e^(tau_min t0) must exceed 1")

    def ok(n):
        return math.log(K * n + 1) / n <= rhs

    if ok(2):
        return 2
    hi = 4
    while not ok(hi):
        hi *= 2
        if hi > n_cap:
            raise ValueError(f"n0 exceeds cap {n_cap}")
    lo = hi // 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


# ---------------------------------------------------------------------------
# conditions


@dataclass
class Condition:
    name: str
    formula: str
    lhs: float
    rhs: float
    margin: float
    holds: bool
    empirical: bool
    note: str = ""


@dataclass
class ConditionReport:
    tau_min: float
    tau_max: float
    lambda_: float
    t_C: float
    hstar: float
    s0_est: float
    htop_est: float
    pstar_at_htop: float
    conditions: dict
    warnings: list
    s0_label: str = "lower bound (max over sampled orbits)"
    relation_note: str = "P_*(t) >= P(t), with equality under SSP; only P_* is estimated"

    @property
    def all_hold(self) -> bool:
        return all(c.holds for c in self.conditions.values())

    def to_dict(self) -> dict:
        d = {
            "tau_min": self.tau_min,
            "tau_max": self.tau_max,
            "lambda": self.lambda_,
            "t_C": self.t_C,
            "hstar": self.hstar,
            "s0_est": self.s0_est,
            "s0_label": self.s0_label,
            "htop_est": self.htop_est,
            "pstar_at_htop": self.pstar_at_htop,
            "relation_note": self.relation_note,
            "warnings": list(self.warnings),
            "conditions": {},
        }
        for k, c in self.conditions.items():
            d["conditions"][k] = {
                "formula": c.formula,
                "lhs": c.lhs,
                "rhs": c.rhs,
                "margin": c.margin,
                "holds": c.holds,
                "empirical": c.empirical,
                "note": c.note,
            }
        return d


def _cond(name, formula, lhs, rhs, empirical, note=""):
    m = lhs - rhs
    return Condition(name, formula, float(lhs), float(rhs), float(m), bool(m > 0), empirical, note)


def check_conditions(tau_min: float, tau_max: float, lam: float, hstar: float, s0_est: float,
                     htop_est: float, pstar_at_htop: float) -> ConditionReport:
    """Evaluate the sufficient conditions with margins (lhs - rhs).

    Every condition that consumes s_0 or a limit estimate is marked
    empirical.  The implication chain only' => only => sparse at h_top =>
    sparse0 is cross-checked; any broken link is an estimator inconsistency
    and is reported in ``warnings``.
    """
    tc = t_c(lam, tau_min, tau_max)
    s0l = s0_est * LOG2
    c = {}
    c["flows"] = _cond("flows", "h_top * tau_min > s0 * log 2", htop_est * tau_min, s0l, True)
    c["only"] = _cond("only", "h_top * tau_min > s0 * log 2 (sufficient for sparse at h_top)",
                      htop_est * tau_min, s0l, True)
    c["sparse0"] = _cond("sparse0", "h_* > s0 * log 2", hstar, s0l, True)
    c["only_prime"] = _cond("only_prime", "h_* * tau_min / tau_max > s0 * log 2",
                            hstar * tau_min / tau_max, s0l, True)
    c["sparse_at_htop"] = _cond("sparse_at_htop", "P_*(t) + t * tau_min > s0 * log 2 at t = h_top",
                                pstar_at_htop + htop_est * tau_min, s0l, True)
    c["hassle_at_htop"] = _cond("hassle_at_htop", "log Lambda > t * (tau_max - tau_min) at t = h_top",
                                math.log(lam), htop_est * (tau_max - tau_min), True,
                                "equivalent to h_top < t_C")
    warnings = []
    chain = [("only_prime", "only"), ("only", "sparse_at_htop"), ("sparse_at_htop", "sparse0")]
    for a, b in chain:
        if c[a].holds and not c[b].holds:
            warnings.append(f"estimator inconsistency: {a} holds but {b} fails")
    return ConditionReport(tau_min, tau_max, lam, tc, hstar, s0_est, htop_est, pstar_at_htop, c, warnings)


# ---------------------------------------------------------------------------
# CSV


def write_qn_csv(path, curve: PressureCurve):
    """Rows (t, n, Qn, log_Qn_over_n)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "n", "Qn", "log_Qn_over_n"])
        for i, t in enumerate(curve.t_grid):
            for j, n in enumerate(curve.n_values):
                lq = float(curve.log_qn[i, j])
                w.writerow([repr(float(t)), n, repr(math.exp(lq)), repr(lq / n if n else math.nan)])


def write_pstar_csv(path, curve: PressureCurve):
    """Rows (t, pstar, err, slope_left)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "pstar", "err", "slope_left"])
        for i, t in enumerate(curve.t_grid):
            w.writerow([repr(float(t)), repr(float(curve.pstar[i])), repr(float(curve.err[i])),
                        repr(float(curve.pslope_left[i]))])
