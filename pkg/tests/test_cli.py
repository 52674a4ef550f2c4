import json
import shutil
import subprocess

import pytest

from nelson_embed.cli import main
from nelson_embed.errors import ConfigInvalid
from nelson_embed.experiments import KINDS, blob_hash, describe, expression_hashes, list_experiments, validate

CONFIGS = {
    "simulate": {"kind": "simulate", "model": {"preset": "ou-stationary"},
                 "ensemble": {"grid": {"a": 0, "b": 0.5, "n_steps": 50}, "n_paths": 500}, "write_paths": True},
    "derivatives": {"kind": "derivatives", "target": {"preset": "brownian"}, "backend": "analytic",
                    "sites": {"t": 0.5, "x": [-1, 0, 1]}},
    "newton-check": {"kind": "newton-check", "target": {"preset": "ou-stationary"}, "potential": "x1^2/2",
                     "backend": "analytic"},
    "el-check": {"kind": "el-check", "target": {"preset": "ou-stationary"}, "lagrangian": "0.5*y1^2 - x1^2/2",
                 "compare_potential": "x1^2/2"},
    "schrodinger": {"kind": "schrodinger", "potential": "x1^2/2", "space": {"x_min": -8, "x_max": 8, "m": 801},
                    "evolve": {"dt": 0.01, "steps": 20}},
    "correspondence": {"kind": "correspondence", "potential": "x1^2/2",
                       "space": {"x_min": -8, "x_max": 8, "m": 801},
                       "ensemble": {"grid": {"a": 0, "b": 0.2, "n_steps": 20}, "n_paths": 2000},
                       "wrong_potential": "x1^2"},
    "functoriality": {"kind": "functoriality", "target": {"preset": "ou-stationary"}, "a": "x1^2"},
    "conjecture-probe": {"kind": "conjecture-probe", "target": {"preset": "ou-rotational", "rotation": 1.0}},
}


def write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def run(tmp_path, cfg, out="out", extra=()):
    return main(["run", write(tmp_path, cfg), "--out", str(tmp_path / out), *extra])


def report(tmp_path, out="out"):
    return json.loads((tmp_path / out / "report.json").read_text())


# ---------------------------------------------------------------- registry

def test_list_has_eight_kinds(capsys):
    assert main(["list"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 8 and len(list_experiments()) == 8
    assert [ln.split()[0] for ln in lines] == list(KINDS)


def test_describe_newton_check():
    text = describe("newton-check")
    assert '"potential"' in text and '"backend"' in text


def test_describe_unknown(capsys):
    assert main(["describe", "nope"]) == 2
    err = capsys.readouterr().err
    assert all(k in err for k in KINDS)


def test_every_config_validates():
    assert set(CONFIGS) == set(KINDS)
    for cfg in CONFIGS.values():
        validate(cfg)


# ---------------------------------------------------------------- runs

@pytest.mark.parametrize("kind", KINDS)
def test_each_kind_runs(tmp_path, kind):
    assert run(tmp_path, CONFIGS[kind]) == 0
    rep = report(tmp_path)
    assert rep["kind"] == kind
    assert len(rep["config_hash"]) == 64
    for name in rep["files"]:
        assert (tmp_path / "out" / name).stat().st_size > 0
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["config_hash"] == rep["config_hash"]
    assert {"numpy", "scipy", "python"} <= set(manifest["versions"])
    assert "timestamp" in manifest and "timestamp" not in json.dumps(rep)


def test_newton_check_report(tmp_path):
    assert run(tmp_path, CONFIGS["newton-check"]) == 0
    rep = report(tmp_path)
    assert rep["results"]["max_abs"] <= 1e-10
    assert "/potential" in rep["expression_hashes"]


def test_parse_error_exit_code(tmp_path, capsys):
    cfg = dict(CONFIGS["newton-check"], potential="x1^^2")
    assert run(tmp_path, cfg) == 2
    assert "offset 2" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_schema_error_reports_path(tmp_path, capsys):
    cfg = dict(CONFIGS["newton-check"], backend="magic")
    assert run(tmp_path, cfg) == 2
    assert "backend" in capsys.readouterr().err
    with pytest.raises(ConfigInvalid) as exc:
        validate({"kind": "schrodinger", "potential": "x1", "space": {"x_min": 0, "x_max": 1}})
    assert exc.value.path == ("space",)


def test_missing_required_field(tmp_path):
    cfg = {k: v for k, v in CONFIGS["newton-check"].items() if k != "potential"}
    assert run(tmp_path, cfg) == 2


def test_unknown_identifier_exit_code(tmp_path):
    assert run(tmp_path, dict(CONFIGS["functoriality"], a="x1*z")) == 2


def test_missing_file_and_bad_json(tmp_path):
    assert main(["run", str(tmp_path / "absent.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", str(bad)]) == 2


def test_numerical_failure_exit_code(tmp_path, capsys):
    cfg = {"kind": "simulate", "model": {"drift": ["x1^3"], "sigma": 0.1, "initial": {"point": [10]}},
           "ensemble": {"grid": {"a": 0, "b": 1, "n_steps": 100}, "n_paths": 4}}
    assert run(tmp_path, cfg) == 3
    err = capsys.readouterr().err
    assert "simulate" in err and "NonFinitePath" in err


def test_masked_everything_exit_code(tmp_path, capsys):
    cfg = {"kind": "derivatives", "target": {"preset": "excited-oscillator"}, "backend": "analytic",
           "sites": {"t": 0, "x": [0]}}
    assert run(tmp_path, cfg) == 3
    assert "MaskedSite" in capsys.readouterr().err


def test_node_in_domain_exit_code(tmp_path):
    cfg = dict(CONFIGS["correspondence"], state=1)
    cfg.pop("ensemble")
    assert run(tmp_path, cfg) == 3
    assert run(tmp_path, dict(cfg, restrict=True), out="restricted") == 0


# ---------------------------------------------------------------- hashes and reproducibility

def test_expression_hashes_match_git(tmp_path):
    cfg = CONFIGS["el-check"]
    hashes = expression_hashes(cfg)
    assert set(hashes) == {"/lagrangian", "/compare_potential"}
    if shutil.which("git"):
        out = subprocess.run(["git", "hash-object", "--stdin"], input=cfg["lagrangian"].encode(),
                             capture_output=True, check=True).stdout.decode().strip()
        assert hashes["/lagrangian"] == out
    assert blob_hash("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"


def test_custom_model_expression_hashes():
    cfg = {"kind": "simulate", "model": {"drift": ["-x1"], "sigma": 1, "density": "exp(-x1^2)",
                                         "initial": {"point": [0]}},
           "ensemble": {"grid": {"a": 0, "b": 1, "n_steps": 2}, "n_paths": 2}}
    assert set(expression_hashes(cfg)) == {"/model/drift/0", "/model/density"}


def test_runs_are_byte_identical(tmp_path):
    cfg = {"kind": "derivatives", "target": {"preset": "ou-stationary"}, "backend": "empirical",
           "ensemble": {"grid": {"a": 0, "b": 0.2, "n_steps": 40}, "n_paths": 5000},
           "estimator": {"h": 0.025}, "t_index": 20, "sites": {"range": [-1, 1, 5]}, "seed": 5}
    assert run(tmp_path, cfg, "a") == 0
    assert run(tmp_path, cfg, "b", ("--workers", "3")) == 0
    rep = report(tmp_path, "a")
    for name in rep["files"] + ["report.json"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert run(tmp_path, cfg, "c", ("--seed", "6")) == 0
    other = report(tmp_path, "c")
    assert other["seed"] == 6 and other["config_hash"] != rep["config_hash"]
    assert (tmp_path / "a" / "dmu.csv").read_bytes() != (tmp_path / "c" / "dmu.csv").read_bytes()
