import json
from pathlib import Path

import pytest

from spdelab.cli import main
from spdelab.config import ConfigError, loads, parse_floats
from spdelab.experiments import list_experiments

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

BASE = """
[experiment]
name = {name}
seed = 1

[model]
n_modes = 8

[solver]
dt = {dt}
n_steps = 20
u0 = 0.5

[drift]
coefficients = 0, 1, 0, -1
clamp = 10

[diffusion]
preset = affine_sine
value = 0.5
"""


def _write(tmp_path, text, name="c.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_nonpositive_dt_exits_2_with_key_and_line(tmp_path, capsys):
    path = _write(tmp_path, BASE.format(name="simulate", dt="-1e-3"))
    assert main(["run", path, "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "[solver] dt" in err and "line 10" in err


def test_config_errors():
    with pytest.raises(ConfigError, match="unknown experiment"):
        loads(BASE.format(name="nope", dt="1e-3"))
    with pytest.raises(ConfigError, match="preset"):
        loads(BASE.format(name="simulate", dt="1e-3").replace("affine_sine", "cosine"))
    with pytest.raises(ConfigError, match="x"):
        loads(BASE.format(name="simulate", dt="1e-3") + "\n[point]\nx = 1.5\n")
    with pytest.raises(ConfigError, match="n_steps"):
        loads(BASE.format(name="simulate", dt="1e-3").replace("n_steps = 20", "n_steps = 0"))


def test_additive_requirement_exits_2(tmp_path):
    path = _write(tmp_path, BASE.format(name="gaussian-check", dt="1e-3"))
    assert main(["run", path, "--out", str(tmp_path / "o")]) == 2


def test_parse_floats():
    assert parse_floats("1, 2;3") == (1.0, 2.0, 3.0)
    g = parse_floats("geom:1e-4:1e-1:4")
    assert g[0] == pytest.approx(1e-4) and g[-1] == pytest.approx(1e-1) and len(g) == 4


def test_overrides_and_out_precedence(tmp_path, monkeypatch):
    text = BASE.format(name="simulate", dt="1e-3")
    monkeypatch.setenv("SPDELAB_OUT", str(tmp_path / "env"))
    cfg = loads(text, seed=9, paths=3, strict=True)
    assert (cfg.seed, cfg.paths, cfg.out) == (9, 3, str(tmp_path / "env"))
    assert cfg.solver.transform == "dst"
    assert loads(text, out="explicit").out == "explicit"


def test_list_is_stable_and_complete(capsys):
    assert main(["list"]) == 0
    out = capsys.readouterr().out
    for name in ("simulate", "gaussian-check", "malliavin-check", "kernel-check", "scaling", "density", "localize"):
        assert name in out
    assert list_experiments() == list_experiments()


def test_localize_wild_datum(tmp_path):
    text = BASE.format(name="localize", dt="1e-3").replace("u0 = 0.5", "u0 = 5.0") + "\n[localize]\nlevels = 1, 1e6\n"
    out = tmp_path / "o"
    assert main(["run", _write(tmp_path, text), "--out", str(out)]) == 0
    doc = json.loads((out / "localize.json").read_text())
    assert doc["metrics"]["tau"] < doc["metrics"]["n_steps"]
    assert doc["flags"]["agreement_before_tau"]["passed"]
    assert (out / "stopping.csv").exists()


def test_bundle_reproducible_except_wall_clock(tmp_path):
    path = str(CONFIGS / "oracles.ini")
    docs = []
    for k in range(2):
        out = tmp_path / f"r{k}"
        assert main(["run", path, "--out", str(out)]) == 0
        doc = json.loads((out / "simulate.json").read_text())
        doc.pop("wall_clock_s")
        docs.append(json.dumps(doc, sort_keys=True))
        assert (out / "trajectory.csv").exists()
    assert docs[0] == docs[1]
    assert (tmp_path / "r0" / "trajectory.csv").read_bytes() == (tmp_path / "r1" / "trajectory.csv").read_bytes()


def test_strict_reproducible_workers(tmp_path):
    text = BASE.format(name="density", dt="1e-3") + "\n[density]\nnorms = false\nsynthetic_atom = false\n"
    path = _write(tmp_path, text)
    vals = []
    for w in (1, 2):
        out = tmp_path / f"w{w}"
        main(["run", path, "--paths", "120", "--workers", str(w), "--strict-reproducible", "--out", str(out)])
        doc = json.loads((out / "density.json").read_text())
        vals.append((doc["metrics"]["sample_mean"], doc["config"]["experiment"]["strict_reproducible"]))
    assert vals[0] == vals[1]
    assert vals[0][1] == "true"


def test_failing_flag_exits_1(tmp_path):
    text = BASE.format(name="localize", dt="1e-3").replace("u0 = 0.5", "u0 = 0.01")
    text += "\n[localize]\nlevels = 50, 1e6\nrequire_interior = true\n"
    assert main(["run", _write(tmp_path, text), "--out", str(tmp_path / "o")]) == 1


def test_shipped_configs_parse():
    files = sorted(CONFIGS.glob("*.ini"))
    assert len(files) == 10
    for f in files:
        loads(f.read_text())
