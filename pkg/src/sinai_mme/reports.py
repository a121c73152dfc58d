"""Experiment specs, the task graph, a content-addressed cache, and report files.

A run is described by an :class:`ExperimentSpec` (table, task, parameters,
output directory, seed).  Parameters are validated against one schema
before anything is computed.  Each task pulls the nodes it depends on
through :class:`Runner`, which memoizes them and, when a cache directory is
configured (``SINAI_MME_CACHE`` or ``cache_dir``), stores every node result
under a key hashed from the table fingerprint, the node name and the
parameters that node actually reads.

All JSON is canonical: sorted keys, floats written with 17 significant
digits, no timestamps.  Wall-clock times only enter the counts CSV when
``timing`` is requested, so repeated runs give byte-identical files.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import pickle
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .billiard import (
    BilliardTable,
    build_table,
    c1_theory,
    check_horizon,
    check_hyperbolicity,
    fit_c1,
    load_table_config,
    table_from_config,
)
from .curves import (
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
from .errors import BadTheta, BilliardError, CacheCorrupt, ConfigInvalid
from .pressure import (
    PstarEstimator,
    check_conditions,
    default_theta0,
    find_htop,
    log_qn,
    pressure_curve,
    s_star,
    theta0_interval,
    write_pstar_csv,
    write_qn_csv,
)
from .symbolic import complexity_counts, estimate_hstar, estimate_s0, write_s0_csv
from .ulam import (
    build_operator,
    equilibrium_measure,
    flow_mme,
    leading_eigen,
    sample_transitions,
    singularity_cloud,
    ulam_pressure_scan,
    write_measure_csv,
    write_operator,
)

TASKS = ("table-info", "check-horizon", "hstar", "s0", "pressure", "htop", "ssp-check", "growth-check",
         "ulam", "conditions", "full-report")

# name: (kind, default)
SCHEMA = {
    "n_rays": ("int", 20_000),
    "max_flight": ("float", 50.0),
    "n_max": ("int", 6),
    "budget": ("int", 300_000),
    "grid": ("int", 32),
    "n_lines": ("int", 32),
    "line_budget": ("int", 60_000_000),
    "phi0": ("floats", [1.3, 1.4, 1.45, 1.5]),
    "s0_n": ("ints", [10, 20]),
    "s0_samples": ("int", 100_000),
    "cond_phi0": ("float", 1.45),
    "cond_s0_n": ("int", 20),
    "t_grid": ("floats", None),
    "theta0": ("float", None),
    "delta_ladder": ("ints", [2, 3, 4]),
    "ssp_t": ("float", None),
    "ssp_n_max": ("int", 6),
    "ssp_curves": ("int", 10),
    "growth_samples": ("int", 40),
    "complexity_n_max": ("int", 8),
    "ulam_boxes": ("int", 128),
    "ulam_samples": ("int", 8),
    "ulam_t_points": ("int", 5),
    "dump_operator": ("bool", False),
    "timing": ("bool", False),
    "scan_scatterer": ("int", None),
    "scan_radii": ("floats", None),
}

# parameters read by each node (dependencies are added when keys are formed)
NODE_PARAMS = {
    "horizon": ("n_rays", "max_flight"),
    "counts": ("n_max", "budget", "grid", "n_lines", "line_budget"),
    "s0": ("phi0", "s0_n", "s0_samples"),
    "s0_cond": ("cond_phi0", "cond_s0_n", "s0_samples"),
    "pressure": ("t_grid",),
    "htop": (),
    "ssp": ("ssp_t", "delta_ladder", "ssp_n_max", "ssp_curves"),
    "growth": ("theta0", "delta_ladder", "growth_samples", "complexity_n_max"),
    "ulam": ("ulam_boxes", "ulam_samples", "ulam_t_points"),
    "conditions": (),
}
NODE_DEPS = {
    "horizon": (),
    "counts": (),
    "s0": (),
    "s0_cond": (),
    "pressure": ("counts",),
    "htop": ("counts",),
    "ssp": (),
    "growth": ("counts",),
    "ulam": ("counts", "htop"),
    "conditions": ("counts", "s0_cond", "htop"),
}


# ---------------------------------------------------------------------------
# canonical JSON


def _canon(obj):
    if isinstance(obj, dict):
        return {str(k): _canon(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canon(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_canon(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    if obj is None or isinstance(obj, str):
        return obj
    return str(obj)


def _is_special(x):
    return math.isnan(x) or math.isinf(x)


def canonical_json(obj) -> str:
    """Sorted keys, floats at 17 significant digits, nan/inf as null."""
    # json's float formatter cannot be told the precision, so format by hand
    return _dump(_canon(obj), 0) + "\n"


def _dump(o, level):
    pad = " " * level
    if isinstance(o, dict):
        if not o:
            return "{}"
        items = [f'{pad} {json.dumps(k)}: {_dump(o[k], level + 1)}' for k in sorted(o)]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(o, list):
        if not o:
            return "[]"
        if all(not isinstance(v, (dict, list)) for v in o):
            return "[" + ", ".join(_dump(v, level + 1) for v in o) + "]"
        items = [f"{pad} {_dump(v, level + 1)}" for v in o]
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    if isinstance(o, float):
        return "null" if _is_special(o) else format(o, ".17g")
    return json.dumps(o)


def write_json(path, obj) -> None:
    Path(path).write_text(canonical_json(obj))


# ---------------------------------------------------------------------------
# spec


@dataclass
class ExperimentSpec:
    table: object  # path to a JSON/TOML table config, or the config dict itself
    task: str
    params: dict = field(default_factory=dict)
    out: str = "out"
    seed: int = 0

    def table_config(self) -> dict:
        if isinstance(self.table, dict):
            return self.table
        path = Path(str(self.table))
        if not path.exists():
            raise ConfigInvalid(f"table config {path} not found")
        try:
            return load_table_config(path)
        except (OSError, ValueError) as exc:
            raise ConfigInvalid(f"cannot read table config {path}: {exc}") from exc

    def resolved(self) -> dict:
        p = {k: v[1] for k, v in SCHEMA.items()}
        p.update(self.params)
        return p


def _check_kind(name, kind, v):
    def num(x, ints=False):
        if isinstance(x, bool):
            return False
        return isinstance(x, (int, np.integer)) if ints else isinstance(x, (int, float, np.integer, np.floating))

    ok = {
        "int": lambda x: num(x, True),
        "float": lambda x: num(x),
        "bool": lambda x: isinstance(x, bool),
        "ints": lambda x: isinstance(x, (list, tuple)) and len(x) > 0 and all(num(y, True) for y in x),
        "floats": lambda x: isinstance(x, (list, tuple)) and len(x) > 0 and all(num(y) for y in x),
    }[kind](v)
    if not ok:
        raise ConfigInvalid(f"parameter {name} must be of kind {kind}, got {v!r}")


def validate_spec(spec: ExperimentSpec) -> tuple[dict, dict]:
    """Check an experiment spec against the schema; returns (table config, resolved params).

    Only cheap geometry is touched here: theta0 needs tau_min, which is the
    exact minimal gap and needs no ray sampling.
    """
    if spec.task not in TASKS:
        raise ConfigInvalid(f"unknown task {spec.task!r}; expected one of {', '.join(TASKS)}")
    if not isinstance(spec.seed, int) or isinstance(spec.seed, bool) or spec.seed < 0:
        raise ConfigInvalid("seed must be a nonnegative integer")
    unknown = sorted(set(spec.params) - set(SCHEMA))
    if unknown:
        raise ConfigInvalid(f"unknown parameters: {', '.join(unknown)}")
    p = spec.resolved()
    for k, v in p.items():
        if v is not None:
            _check_kind(k, SCHEMA[k][0], v)
    for k in ("n_rays", "n_max", "budget", "grid", "n_lines", "line_budget", "s0_samples", "cond_s0_n",
              "ssp_n_max", "ssp_curves", "growth_samples", "complexity_n_max", "ulam_boxes", "ulam_samples",
              "ulam_t_points"):
        if p[k] < 1:
            raise ConfigInvalid(f"{k} must be >= 1")
    if p["n_max"] < 3:
        raise ConfigInvalid("n_max must be >= 3 (slope fits need three depths)")
    if p["ulam_boxes"] % 2:
        raise ConfigInvalid("ulam_boxes must be even (the error bar halves the partition)")
    if p["ulam_t_points"] < 2:
        raise ConfigInvalid("ulam_t_points must be >= 2")
    if p["max_flight"] <= 0:
        raise ConfigInvalid("max_flight must be positive")
    if any(not 0 < x < math.pi / 2 for x in p["phi0"]) or not 0 < p["cond_phi0"] < math.pi / 2:
        raise ConfigInvalid("phi0 values must lie in (0, pi/2)")
    if any(x < 1 for x in p["s0_n"]):
        raise ConfigInvalid("s0_n values must be >= 1")
    if p["t_grid"] is not None:
        tg = list(p["t_grid"])
        if any(x < 0 for x in tg) or tg != sorted(set(tg)):
            raise ConfigInvalid("t_grid must be strictly increasing and nonnegative")
    if any(x < 0 for x in p["delta_ladder"]) or list(p["delta_ladder"]) != sorted(set(p["delta_ladder"])):
        raise ConfigInvalid("delta_ladder must be strictly increasing nonnegative exponents N (delta = delta0/2^N)")
    if p["ssp_t"] is not None and p["ssp_t"] < 0:
        raise ConfigInvalid("ssp_t must be >= 0")
    if (p["scan_scatterer"] is None) != (p["scan_radii"] is None):
        raise ConfigInvalid("scan_scatterer and scan_radii go together")
    cfg = spec.table_config()
    _validate_table_config(cfg)
    if p["scan_scatterer"] is not None:
        if not 0 <= p["scan_scatterer"] < len(cfg["scatterers"]):
            raise ConfigInvalid("scan_scatterer out of range")
        if any(x <= 0 for x in p["scan_radii"]):
            raise ConfigInvalid("scan_radii must be positive")
        return cfg, p
    gap = _gap(cfg)
    if p["theta0"] is not None:
        lo, hi = theta0_interval(gap)
        if not lo < p["theta0"] < hi:
            raise ConfigInvalid(f"theta0 = {p['theta0']} outside ({lo}, {hi})")
    return cfg, p


def _validate_table_config(cfg) -> None:
    if not isinstance(cfg, dict) or "scatterers" not in cfg:
        raise ConfigInvalid("table config needs a 'scatterers' list")
    sc = cfg["scatterers"]
    if not isinstance(sc, list) or not sc:
        raise ConfigInvalid("'scatterers' must be a nonempty list")
    for s in sc:
        if not isinstance(s, dict) or "center" not in s or "radius" not in s:
            raise ConfigInvalid("each scatterer needs 'center' and 'radius'")
        c = s["center"]
        if not (isinstance(c, (list, tuple)) and len(c) == 2):
            raise ConfigInvalid("center must be [x, y]")
        if not isinstance(s["radius"], (int, float)) or s["radius"] <= 0:
            raise ConfigInvalid("radius must be positive")


def _gap(cfg) -> float:
    from .billiard import _pair_gaps

    centers = np.array([s["center"] for s in cfg["scatterers"]], float) % 1.0
    radii = np.array([s["radius"] for s in cfg["scatterers"]], float)
    g = float(np.min(_pair_gaps(centers, radii)))
    if g <= 0:
        raise ConfigInvalid("scatterers overlap")
    return g


# ---------------------------------------------------------------------------
# cache


class Cache:
    """Pickled node results keyed by content hash, each with a sha256 check file."""

    def __init__(self, root):
        self.root = Path(root) if root else None
        if self.root:
            self.root.mkdir(parents=True, exist_ok=True)

    def _paths(self, key):
        return self.root / f"{key}.pkl", self.root / f"{key}.sha256"

    def load(self, key):
        if not self.root:
            return None
        data_p, sum_p = self._paths(key)
        if not data_p.exists():
            return None
        blob = data_p.read_bytes()
        expect = sum_p.read_text().strip() if sum_p.exists() else ""
        if hashlib.sha256(blob).hexdigest() != expect:
            raise CacheCorrupt(f"cache entry {key} fails its hash check")
        return pickle.loads(blob)

    def store(self, key, value) -> None:
        if not self.root:
            return
        blob = pickle.dumps(value, protocol=4)
        data_p, sum_p = self._paths(key)
        tmp = data_p.with_suffix(".tmp")
        tmp.write_bytes(blob)
        os.replace(tmp, data_p)
        sum_p.write_text(hashlib.sha256(blob).hexdigest() + "\n")


def default_cache_dir():
    return os.environ.get("SINAI_MME_CACHE") or None


# ---------------------------------------------------------------------------
# runner


class Runner:
    """Evaluates nodes of the task graph in dependency order with memoization."""

    def __init__(self, table: BilliardTable, params: dict, seed: int = 0, cache_dir=None, log=None):
        self.table = table
        self.p = params
        self.seed = seed
        self.cache = Cache(cache_dir)
        self.memo = {}
        self.log = log or (lambda msg: None)
        self.cache_hits = []

    def key(self, name) -> str:
        names, stack = set(), [name]
        while stack:
            x = stack.pop()
            if x not in names:
                names.add(x)
                stack.extend(NODE_DEPS[x])
        used = sorted({k for x in names for k in NODE_PARAMS[x]})
        payload = {"table": self.table.fingerprint(), "node": name, "seed": self.seed, "version": __version__,
                   "params": {k: self.p[k] for k in used}}
        return hashlib.sha256(canonical_json(payload).encode()).hexdigest()[:32]

    def get(self, name):
        if name in self.memo:
            return self.memo[name]
        for dep in NODE_DEPS[name]:
            self.get(dep)
        key = self.key(name)
        value = None
        try:
            value = self.cache.load(key)
        except CacheCorrupt as exc:
            warnings.warn(f"{exc}; recomputing", RuntimeWarning, stacklevel=2)
            value = None
        if value is not None:
            self.cache_hits.append(name)
            self.log(f"[cache] {name}")
        else:
            self.log(f"[run] {name}")
            value = getattr(self, "_node_" + name)()
            self.cache.store(key, value)
        self.memo[name] = value
        return value

    # -- nodes ------------------------------------------------------------

    def _node_horizon(self):
        return check_horizon(self.table, self.p["n_rays"], self.p["max_flight"], self.seed)

    def _node_counts(self):
        p = self.p
        return complexity_counts(self.table, p["n_max"], grid=p["grid"], budget=p["budget"], n_lines=p["n_lines"],
                                 line_budget=p["line_budget"])

    def _node_s0(self):
        p = self.p
        return [estimate_s0(self.table, phi0, n, p["s0_samples"], seed=self.seed) for phi0 in p["phi0"]
                for n in p["s0_n"]]

    def _node_s0_cond(self):
        p = self.p
        return estimate_s0(self.table, p["cond_phi0"], p["cond_s0_n"], p["s0_samples"], seed=self.seed)

    def t_grid(self):
        if self.p["t_grid"] is not None:
            return list(self.p["t_grid"])
        return None

    def _node_pressure(self):
        res = self.get("counts")
        grid = self.t_grid()
        if grid is None:
            h = self.get("htop")
            grid = list(np.round(np.linspace(0.0, 1.1 * h.root, 12), 10))
        return pressure_curve(res, grid, self.table.tau_min, self.table.tau_max)

    def _node_htop(self):
        return find_htop(PstarEstimator(self.get("counts")))

    def _node_conditions(self):
        res = self.get("counts")
        hs = estimate_hstar(res.n_values[1:], res.counts[1:])
        h = self.get("htop")
        s0 = self.get("s0_cond")
        est = PstarEstimator(res)
        rep = check_conditions(self.table.tau_min, self.table.tau_max, self.table.lam, hs.value, s0.estimate,
                               h.root, est(h.root).value)
        return rep

    def _node_ssp(self):
        p = self.p
        t = p["ssp_t"] if p["ssp_t"] is not None else self.table.t_c
        delta = default_delta0(self.table) / 2 ** p["delta_ladder"][0]
        return ssp_check(self.table, t, delta, n_max=p["ssp_n_max"], n_long=p["ssp_curves"],
                         n_short=max(1, p["ssp_curves"] // 2), seed=self.seed)

    def _node_growth(self):
        p = self.p
        tb = self.table
        theta0 = p["theta0"] if p["theta0"] is not None else default_theta0(tb.tau_min)
        c1 = fit_c1(tb, seed=self.seed)
        hyp = check_hyperbolicity(tb, c1, seed=self.seed + 1)
        comp = verify_complexity(tb, p["complexity_n_max"], samples=p["growth_samples"], seed=self.seed)
        t_list = [tb.t_c / 2, tb.t_c]
        nstep = n_step_expansion_check(tb, t_list[0], theta0, comp.K, samples=p["growth_samples"], seed=self.seed)
        # the lemma needs m1 >= n0(t0, theta0); I-lineages empty early, so the recipe value is affordable
        m1 = nstep.n0_recipe if nstep.n0_recipe is not None else 2 * nstep.n0
        res = self.get("counts")
        delta0 = default_delta0(tb)
        delta = delta0 / 2 ** p["delta_ladder"][0]
        growth = []
        for t in t_list:
            lq = {n: log_qn(res.classes[n], t) for n in res.n_values if n >= 1}
            growth.append(growth_lemma_check(tb, t, delta, m1, theta0, comp.K, c1, lq, samples=p["growth_samples"],
                                             n_g_max=min(4, max(res.n_values)), seed=self.seed))
        rng = np.random.default_rng(self.seed)
        seed_curve = sample_seeds(tb, 1, delta, rng)[0]
        ladder = scale_ladder(grow_family(tb, seed_curve, 5, delta), len(p["delta_ladder"]))
        nesting = [check_nesting(ladder[i + 1], ladder[i]) for i in range(len(ladder) - 1)]
        partition = []
        for fam in ladder:
            for rec in fam.history:
                for t in t_list:
                    G, L, S, _ = rec.exact_sums(t)
                    partition.append(G == L + S)
        return {"theta0": theta0, "c1": c1, "c1_theory": c1_theory(tb), "hyperbolicity": hyp,
                "complexity": comp, "n_step": nstep, "growth": growth, "nesting": nesting,
                "partition_exact": all(partition), "m1": m1, "delta0": delta0, "delta": delta}

    def _node_ulam(self):
        p = self.p
        tb = self.table
        h = self.get("htop")
        n_b = p["ulam_boxes"]
        grid = list(np.linspace(0.0, h.root, p["ulam_t_points"]))
        tr = sample_transitions(tb, n_b, n_b, p["ulam_samples"], self.seed)
        scan = ulam_pressure_scan(tb, grid, n_b, n_b, p["ulam_samples"], self.seed, transitions=tr)
        est = PstarEstimator(self.get("counts"))
        pst = [est(t) for t in grid]
        cloud = singularity_cloud(tb)
        op = build_operator(tb, h.root, transitions=tr)
        eig = leading_eigen(op)
        meas = equilibrium_measure(tb, op, eig, cloud)
        fl = flow_mme(tb, op, meas, h.root, h.bracket)
        tr2 = sample_transitions(tb, 2 * n_b, 2 * n_b, p["ulam_samples"], self.seed)
        op2 = build_operator(tb, h.root, transitions=tr2)
        meas2 = equilibrium_measure(tb, op2, leading_eigen(op2), cloud)
        fl2 = flow_mme(tb, op2, meas2, h.root, h.bracket)
        return {"scan": scan, "pstar": [e.value for e in pst], "pstar_err": [e.error for e in pst],
                "measure": meas, "flow": fl, "measure_fine": meas2, "flow_fine": fl2, "operator": op}


# ---------------------------------------------------------------------------
# artifacts


def _counts_csv(path, res, timing):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "count", "converged_flag", "wall_time"])
        for k, n in enumerate(res.n_values):
            w.writerow([n, res.counts[k], int(res.converged[k]), repr(float(res.wall_time)) if timing else ""])


def _emit_table(r: Runner, out: Path, summary: list):
    tb = r.table
    d = {"config": tb.config(), "fingerprint": tb.fingerprint(), "n_scatterers": tb.n_scatterers,
         "kmin": tb.kmin, "kmax": tb.kmax, "tau_min": tb.tau_min, "tau_max": tb.tau_max, "lambda": tb.lam,
         "t_C": tb.t_c, "horizon_ok": tb.horizon_ok, "perimeters": tb.perimeters}
    write_json(out / "table.json", d)
    summary.append(f"table {tb.fingerprint()[:12]}: tau_min={tb.tau_min:.6g} tau_max={tb.tau_max:.6g} "
                   f"Lambda={tb.lam:.6g} t_C={tb.t_c:.6g}")
    return d


def _emit_horizon(r, out, summary):
    h = r.get("horizon")
    d = {"horizon_ok": h.horizon_ok, "tau_max_estimate": h.tau_max_estimate, "n_rays": h.n_rays,
         "max_flight": h.max_flight, "longest_sampled": h.longest_sampled,
         "corridor_direction": h.corridor_direction, "corridor_clearance": h.corridor_clearance}
    write_json(out / "horizon.json", d)
    summary.append(f"horizon_ok={h.horizon_ok} tau_max_estimate={h.tau_max_estimate:.6g}")
    return d


def _emit_hstar(r, out, summary):
    res = r.get("counts")
    _counts_csv(out / "counts.csv", res, r.p["timing"])
    hs = estimate_hstar(res.n_values[1:], res.counts[1:])
    d = {"n_values": res.n_values, "counts": res.counts, "counts_half": res.counts_half,
         "converged": [bool(c) for c in res.converged], "budget_exceeded": res.budget_exceeded,
         "hstar": hs.value, "hstar_err": hs.error, "window": hs.window, "window_converged": hs.converged,
         "label": "lower-bound counts; slope estimate"}
    write_json(out / "hstar.json", d)
    summary.append(f"h_* = {hs.value:.4f} +- {hs.error:.4f} (window {hs.window})")
    return d


def _emit_s0(r, out, summary):
    ests = r.get("s0")
    write_s0_csv(out / "s0.csv", ests)
    d = {"estimates": [{"phi0": e.phi0, "n": e.n, "n_samples": e.n_samples, "estimate": e.estimate,
                        "discard_fraction": e.discard_fraction} for e in ests],
         "label": ests[0].label if ests else ""}
    write_json(out / "s0.json", d)
    summary.append("s0 (lower bounds): " + ", ".join(f"phi0={e.phi0:g},n={e.n}: {e.estimate:.3f}" for e in ests))
    return d


def _emit_pressure(r, out, summary):
    cur = r.get("pressure")
    write_qn_csv(out / "qn.csv", cur)
    write_pstar_csv(out / "pstar.csv", cur)
    d = {"t_grid": cur.t_grid, "pstar": cur.pstar, "err": cur.err, "slope_left": cur.pslope_left,
         "slope_err": cur.slope_err, "slope_violation": cur.slope_violation,
         "convexity_defects": cur.convexity_defects(), "windows": [list(w) for w in cur.windows]}
    write_json(out / "pressure.json", d)
    summary.append(f"P_* on {len(cur.t_grid)} grid points, P_*(0) = {cur.pstar[0]:.4f} +- {cur.err[0]:.4f}")
    return d


def _emit_htop(r, out, summary):
    h = r.get("htop")
    tb = r.table
    theta0 = r.p["theta0"] if r.p["theta0"] is not None else default_theta0(tb.tau_min)
    cur = r.get("pressure")
    ss = []
    for t, sl in zip(cur.t_grid, cur.pslope_left):
        if t <= 0 or not np.isfinite(sl):
            continue
        try:
            v = s_star(float(t), float(sl), theta0, tb.tau_min, tb.tau_max)
        except ValueError:
            continue
        ss.append({"t": v.t, "s_star": v.value, "bound": v.bound, "check": v.check_ok})
    d = {"root": h.root, "bracket": h.bracket, "p_at_root": h.p_at_root, "err_p": h.err_p, "err_t": h.err_t,
         "slope": h.slope, "window": h.window, "t_C": tb.t_c, "theta0": theta0, "s_star": ss}
    write_json(out / "htop.json", d)
    summary.append(f"h_top = {h.root:.4f} (bracket {h.bracket[0]:.5f}..{h.bracket[1]:.5f}, err_t {h.err_t:.3f})")
    return d


def _emit_conditions(r, out, summary):
    rep = r.get("conditions")
    d = rep.to_dict()
    write_json(out / "conditions.json", d)
    for c in rep.conditions.values():
        summary.append(f"cond {c.name}: {'TRUE' if c.holds else 'false'} (margin {c.margin:+.4g})")
    return d


def _emit_ssp(r, out, summary):
    dg = r.get("ssp")
    write_json(out / "ssp.json", dg.to_dict())
    with open(out / "ssp_summands.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "summand_sup", "summand_sup_reversed"])
        for k, n in enumerate(dg.n_values):
            rev = dg.reversed.summand_sup[k] if dg.reversed is not None else math.nan
            w.writerow([n, repr(float(dg.summand_sup[k])), repr(float(rev))])
    summary.append(f"SSP at t={dg.t:.4g}, delta={dg.delta:.4g}: n_t={dg.n_t}, decay rate {dg.decay_rate:.3f}, "
                   f"reversed agree={dg.agree}")
    return dg.to_dict()


def _emit_growth(r, out, summary):
    g = r.get("growth")
    comp, ns = g["complexity"], g["n_step"]

    def gc(x):
        return {"theta0": x.theta0, "n0": x.n0, "n0_recipe": x.n0_recipe, "delta_bar": x.delta_bar,
                "t_values": x.t_values, "passed": x.passed, "ratios": x.ratios, "notes": x.notes}

    d = {"theta0": g["theta0"], "c1": g["c1"], "c1_theory": g["c1_theory"],
         "hyperbolicity": {"min_ratio": g["hyperbolicity"].min_ratio, "violations": g["hyperbolicity"].violations,
                           "n_orbits": g["hyperbolicity"].n_orbits},
         "complexity": {"K": comp.K, "n_values": comp.n_values, "max_components": comp.max_components,
                        "passed": comp.passed},
         "n_step": gc(ns), "growth": [gc(x) for x in g["growth"]],
         "nesting": [{"checked": a, "ok": b} for a, b in g["nesting"]], "partition_exact": g["partition_exact"],
         "m1": g["m1"], "delta0": g["delta0"], "delta": g["delta"]}
    write_json(out / "growth.json", d)
    summary.append(f"growth: K={comp.K}, n0={ns.n0} (recipe {ns.n0_recipe}), delta_bar={ns.delta_bar}, "
                   f"growth lemma {'pass' if all(x.all_passed for x in g['growth']) else 'FAIL'}")
    return d


def _emit_ulam(r, out, summary):
    u = r.get("ulam")
    sc = u["scan"]
    write_measure_csv(out / "measure.csv", r.table, u["measure"])
    if r.p["dump_operator"]:
        write_operator(out / "operator", u["operator"], r.table)
    diff = np.abs(sc.log_lambda - np.asarray(u["pstar"]))
    tol = sc.err + np.asarray(u["pstar_err"])
    m, m2 = u["measure"], u["measure_fine"]
    d = {"t_grid": sc.t_grid, "log_lambda": sc.log_lambda, "log_lambda_err": sc.err,
         "log_lambda_coarse": sc.log_lambda_coarse, "log_lambda_reseeded": sc.log_lambda_reseeded,
         "pstar": u["pstar"], "pstar_err": u["pstar_err"], "agree": (diff <= tol).tolist(),
         "support_fraction": m.support_fraction, "tau_mean": m.tau_mean, "adapt_integral": m.adapt_integral,
         "adapt_integral_fine": m2.adapt_integral, "flad_integral": u["flow"].flad_integral,
         "flad_integral_fine": u["flow_fine"].flad_integral, "abramov_entropy": u["flow"].abramov_entropy,
         "boxes": sc.n_r}
    write_json(out / "ulam.json", d)
    summary.append(f"Ulam {sc.n_r}^2: log lambda vs P_* agree on {int(np.sum(diff <= tol))}/{len(diff)} t values, "
                   f"support {m.support_fraction:.3f}")
    return d


EMITTERS = {
    "table-info": [_emit_table],
    "check-horizon": [_emit_horizon],
    "hstar": [_emit_hstar],
    "s0": [_emit_s0],
    "pressure": [_emit_pressure],
    "htop": [_emit_pressure, _emit_htop],
    "conditions": [_emit_conditions],
    "ssp-check": [_emit_ssp],
    "growth-check": [_emit_growth],
    "ulam": [_emit_ulam],
    "full-report": [_emit_table, _emit_horizon, _emit_hstar, _emit_s0, _emit_pressure, _emit_htop,
                    _emit_conditions, _emit_ssp, _emit_growth, _emit_ulam],
}


@dataclass
class RunResult:
    exit_code: int
    out: Path
    artifacts: list
    summary: list
    cache_hits: list


def _scan(cfg, p, spec, out, cache_dir, log) -> RunResult:
    """Condition margins along a 1-D family of radii for one scatterer."""
    rows = []
    summary = []
    for rad in p["scan_radii"]:
        c = json.loads(json.dumps(cfg))
        c["scatterers"][p["scan_scatterer"]]["radius"] = float(rad)
        try:
            tb = table_from_config(c)
        except BilliardError as exc:
            rows.append([rad, "", "", "", "", "", "", "", type(exc).__name__])
            continue
        run = Runner(tb, p, spec.seed, cache_dir, log)
        rep = run.get("conditions")
        cd = rep.conditions
        rows.append([rad, tb.tau_min, tb.tau_max, rep.htop_est, rep.s0_est, cd["flows"].margin,
                     cd["sparse0"].margin, cd["hassle_at_htop"].margin, ""])
        summary.append(f"radius {rad}: flows margin {cd['flows'].margin:+.4g}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["radius", "tau_min", "tau_max", "htop", "s0", "margin_flows", "margin_sparse0",
                "margin_hassle_at_htop", "error"])
    for row in rows:
        w.writerow([format(x, ".17g") if isinstance(x, float) else x for x in row])
    (out / "scan.csv").write_text(buf.getvalue())
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    return RunResult(0, out, ["scan.csv", "summary.txt"], summary, [])


def run(spec: ExperimentSpec, cache_dir=None, log=None) -> RunResult:
    """Validate, evaluate the task graph, write artifacts.

    Exit code 0 on success, 2 when a condition report has a false
    condition, 1 is left to the caller for errors.
    """
    cfg, p = validate_spec(spec)
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    cache_dir = cache_dir if cache_dir is not None else default_cache_dir()
    if p["scan_scatterer"] is not None:
        return _scan(cfg, p, spec, out, cache_dir, log)
    table = table_from_config(cfg)
    runner = Runner(table, p, spec.seed, cache_dir, log)
    summary = []
    before = set(os.listdir(out))
    for emit in EMITTERS[spec.task]:
        emit(runner, out, summary)
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    artifacts = sorted(set(os.listdir(out)) - before | {"summary.txt"})
    code = 0
    if spec.task in ("conditions", "full-report") and not runner.get("conditions").all_hold:
        code = 2
    return RunResult(code, out, artifacts, summary, list(runner.cache_hits))


def load_spec(path) -> ExperimentSpec:
    """Experiment spec from a JSON or TOML file: {table, task, params, out, seed}."""
    try:
        d = load_table_config(path)
    except (OSError, ValueError) as exc:
        raise ConfigInvalid(f"cannot read spec {path}: {exc}") from exc
    for k in ("table", "task"):
        if k not in d:
            raise ConfigInvalid(f"spec needs '{k}'")
    table = d["table"]
    if isinstance(table, str) and not os.path.isabs(table):
        table = str(Path(path).parent / table)
    return ExperimentSpec(table, d["task"], dict(d.get("params", {})), d.get("out", "out"), int(d.get("seed", 0)))


__all__ = ["ExperimentSpec", "Runner", "RunResult", "Cache", "TASKS", "SCHEMA", "canonical_json", "load_spec",
           "run", "validate_spec", "write_json", "BadTheta"]
