import json
import math

import numpy as np
import pytest

from sinai_mme import __version__
from sinai_mme.cli import main
from sinai_mme.errors import ConfigInvalid
from sinai_mme.reports import Cache, ExperimentSpec, canonical_json, load_spec, run, validate_spec

REF = {"scatterers": [{"center": [0.0, 0.0], "radius": 0.42}, {"center": [0.5, 0.5], "radius": 0.27}]}
FAST = {"n_max": 3, "budget": 20_000, "n_lines": 4, "line_budget": 300_000, "s0_samples": 2000, "cond_s0_n": 5,
        "phi0": [1.4], "s0_n": [5]}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "table.json"
    p.write_text(json.dumps(REF))
    return p


def test_canonical_json():
    s = canonical_json({"b": 0.1, "a": [1, 2.5, float("nan")], "c": {"z": np.float64(1 / 3), "y": True}})
    assert s.index('"a"') < s.index('"b"') < s.index('"c"')
    assert "0.10000000000000001" in s and "null" in s and "0.33333333333333331" in s
    d = json.loads(s)
    assert d["c"]["z"] == 1 / 3 and d["a"][2] is None


@pytest.mark.parametrize("params, msg", [
    ({"n_max": 2}, "n_max"),
    ({"nope": 1}, "unknown"),
    ({"theta0": 0.5}, "theta0"),
    ({"t_grid": [1.0, 0.5]}, "t_grid"),
    ({"n_max": "5"}, "kind"),
    ({"ulam_boxes": 33}, "even"),
    ({"scan_radii": [0.4]}, "scan"),
])
def test_validation_errors(cfg_path, params, msg):
    with pytest.raises(ConfigInvalid, match=msg):
        validate_spec(ExperimentSpec(str(cfg_path), "hstar", params))


def test_validation_table_errors(tmp_path):
    with pytest.raises(ConfigInvalid):
        validate_spec(ExperimentSpec(str(tmp_path / "missing.json"), "hstar"))
    with pytest.raises(ConfigInvalid, match="overlap"):
        validate_spec(ExperimentSpec({"scatterers": [{"center": [0, 0], "radius": 0.4},
                                                     {"center": [0.5, 0.5], "radius": 0.4}]}, "table-info"))
    with pytest.raises(ConfigInvalid, match="task"):
        validate_spec(ExperimentSpec(REF, "fly"))


def test_theta0_checked_before_compute(cfg_path, tmp_path):
    lo = math.exp(-(math.sqrt(0.5) - 0.69))
    with pytest.raises(ConfigInvalid):
        run(ExperimentSpec(str(cfg_path), "htop", {"theta0": lo * 0.999}, str(tmp_path / "o")))
    assert not (tmp_path / "o").exists()


def test_hstar_artifacts_deterministic(cfg_path, tmp_path):
    a = run(ExperimentSpec(str(cfg_path), "hstar", dict(FAST), str(tmp_path / "a")), cache_dir="")
    b = run(ExperimentSpec(str(cfg_path), "hstar", dict(FAST), str(tmp_path / "b")), cache_dir="")
    assert a.exit_code == 0 and "counts.csv" in a.artifacts
    for name in a.artifacts:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = (tmp_path / "a" / "counts.csv").read_text().splitlines()
    assert rows[0] == "n,count,converged_flag,wall_time" and rows[1].endswith(",")


def test_timing_flag_fills_wall_time(cfg_path, tmp_path):
    run(ExperimentSpec(str(cfg_path), "hstar", dict(FAST, timing=True), str(tmp_path / "a")), cache_dir="")
    last = (tmp_path / "a" / "counts.csv").read_text().splitlines()[1].split(",")[-1]
    assert float(last) > 0


def test_cache_hits_are_bit_identical(cfg_path, tmp_path):
    cache = tmp_path / "cache"
    fresh = run(ExperimentSpec(str(cfg_path), "htop", dict(FAST), str(tmp_path / "f")), cache_dir=str(cache))
    served = run(ExperimentSpec(str(cfg_path), "htop", dict(FAST), str(tmp_path / "s")), cache_dir=str(cache))
    assert not fresh.cache_hits and set(served.cache_hits) >= {"counts", "htop"}
    for name in fresh.artifacts:
        assert (tmp_path / "f" / name).read_bytes() == (tmp_path / "s" / name).read_bytes()


def test_corrupt_cache_recomputes(cfg_path, tmp_path):
    cache = tmp_path / "cache"
    run(ExperimentSpec(str(cfg_path), "hstar", dict(FAST), str(tmp_path / "a")), cache_dir=str(cache))
    for p in cache.glob("*.pkl"):
        p.write_bytes(p.read_bytes()[:-3] + b"xyz")
    with pytest.warns(RuntimeWarning, match="hash check"):
        res = run(ExperimentSpec(str(cfg_path), "hstar", dict(FAST), str(tmp_path / "b")), cache_dir=str(cache))
    assert not res.cache_hits
    assert (tmp_path / "a" / "hstar.json").read_bytes() == (tmp_path / "b" / "hstar.json").read_bytes()


def test_cache_key_depends_on_params(tmp_path):
    c = Cache(tmp_path)
    c.store("k", {"x": 1})
    assert c.load("k") == {"x": 1} and c.load("other") is None
    assert Cache(None).load("k") is None


def test_cli_exit_codes(cfg_path, tmp_path, capsys):
    assert main(["table-info", "--table", str(cfg_path), "--out", str(tmp_path / "o"), "-q"]) == 0
    table = json.loads((tmp_path / "o" / "table.json").read_text())
    assert table["tau_min"] == pytest.approx(math.sqrt(0.5) - 0.69)
    assert main(["hstar", "--table", str(cfg_path), "--theta0", "0.1", "--out", str(tmp_path / "e")]) == 1
    assert "ConfigInvalid" in capsys.readouterr().err
    assert main(["hstar", "--out", str(tmp_path / "e")]) == 1


def test_cli_conditions_false_gives_two(tmp_path):
    spec = {"table": "table.json", "task": "conditions", "params": FAST, "out": str(tmp_path / "c"), "seed": 0}
    (tmp_path / "table.json").write_text(json.dumps(REF))
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    # h_top of the reference table is far above t_C, so the hassle condition fails
    assert main(["run", "--spec", str(tmp_path / "spec.json"), "-q"]) == 2
    cond = json.loads((tmp_path / "c" / "conditions.json").read_text())
    assert cond["conditions"]["hassle_at_htop"]["holds"] is False


def test_load_spec_toml(tmp_path):
    (tmp_path / "t.json").write_text(json.dumps(REF))
    (tmp_path / "s.toml").write_text('table = "t.json"\ntask = "hstar"\nseed = 3\n[params]\nn_max = 4\n')
    spec = load_spec(tmp_path / "s.toml")
    assert spec.seed == 3 and spec.params == {"n_max": 4} and spec.table.endswith("t.json")
    with pytest.raises(ConfigInvalid):
        (tmp_path / "bad.toml").write_text('task = "hstar"\n')
        load_spec(tmp_path / "bad.toml")


def test_radius_scan(cfg_path, tmp_path):
    params = dict(FAST, scan_scatterer=1, scan_radii=[0.2, 0.27, 0.3])
    res = run(ExperimentSpec(str(cfg_path), "conditions", params, str(tmp_path / "scan")), cache_dir="")
    rows = (tmp_path / "scan" / "scan.csv").read_text().splitlines()
    assert rows[0].startswith("radius,tau_min,tau_max,htop,s0,margin_flows")
    assert len(rows) == 4
    # R = 0.3 overlaps the big disk; the others are valid finite-horizon tables
    assert rows[3].endswith("OverlappingScatterers")
    assert float(rows[2].split(",")[1]) == pytest.approx(math.sqrt(0.5) - 0.69)
    assert res.exit_code == 0


def test_version():
    assert __version__.count(".") == 2
