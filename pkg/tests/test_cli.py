import csv
import json
import math
import subprocess
import sys
import time
from importlib import resources

import jsonschema
import numpy as np
import pytest

from mflow import cli
from mflow.distributions import Vmf, default_base
from mflow.dynamics import FieldParams, read_checkpoint
from mflow.flow import FlowModel, save_model
from mflow.geometry import Hyperboloid, Sphere

H, S = Hyperboloid(2), Sphere(2)


def _schema(name):
    return json.loads(resources.files("mflow").joinpath("schemas", name).read_text())


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def _identity_checkpoint(path, M):
    save_model(path, FlowModel(FieldParams.zeros(M), default_base(M)))
    return str(path)


def test_missing_target_is_usage_error(tmp_path, capsys):
    assert cli.main(["train", "--out", str(tmp_path), "--budget", "200"]) == 2
    err = capsys.readouterr().err
    assert "usage:" in err and "--target" in err


def test_bad_flag_and_no_command(tmp_path, capsys):
    assert cli.main(["train", "--budget", "many"]) == 2
    assert cli.main([]) == 2
    assert cli.main(["train", "--target", "c1-row1", "--manifold", "s2", "--out", str(tmp_path)]) == 2
    assert cli.main(["check", "--suite", "nope", "--out", str(tmp_path)]) == 2


def test_train_smoke_and_rerun(tmp_path):
    args = ["train", "--manifold", "s2", "--target", "c1-sph1", "--budget", "100", "--batch-size", "50",
            "--n-mc", "200", "--eval-every", "50", "--seed", "7", "--out", str(tmp_path), "-q"]
    assert cli.main(args) == 0
    names = ("checkpoint.bin", "loss.csv", "report.json", "train-config.json")
    first = {n: (tmp_path / n).read_bytes() for n in names}
    rows = _rows(tmp_path / "loss.csv")
    assert rows[0] == ["step", "samples", "nll", "kl", "stderr", "seconds"] and len(rows) == 3
    assert cli.main(args) == 0
    for n in names:
        assert (tmp_path / n).read_bytes() == first[n]
    cfg = json.loads((tmp_path / "train-config.json").read_text())
    assert cfg["seed"] == 7 and cfg["budget"] == 100 and cfg["command"] == "train"


def test_json_outputs_match_schemas(tmp_path):
    assert cli.main(["train", "--target", "c1-row2", "--budget", "40", "--batch-size", "20",
                     "--n-mc", "100", "--out", str(tmp_path), "-q"]) == 0
    assert cli.main(["sample", "--n", "5", "--out", str(tmp_path), "-q"]) == 0
    jsonschema.validate(json.loads((tmp_path / "report.json").read_text()), _schema("report.schema.json"))
    for name in ("train-config.json", "sample-config.json"):
        jsonschema.validate(json.loads((tmp_path / name).read_text()), _schema("config.schema.json"))
    header, _ = read_checkpoint(tmp_path / "checkpoint.bin")
    jsonschema.validate(header, _schema("checkpoint.schema.json"))


def test_identity_grid_integrates_to_one(tmp_path):
    ck = _identity_checkpoint(tmp_path / "id.bin", H)
    assert cli.main(["density-grid", "--checkpoint", ck, "--resolution", "300", "--out", str(tmp_path), "-q"]) == 0
    rows = _rows(tmp_path / "grid.csv")
    assert tuple(rows[0]) == cli.GRID_HEADER and len(rows) == 1 + 300 * 300
    total = sum(math.exp(float(r[2])) * float(r[3]) for r in rows[1:] if r[4] == "ok")
    assert abs(total - 1) < 5e-3
    outside = [r for r in rows[1:] if r[4] == "outside"]
    assert outside and all(r[2] == "" and float(r[3]) == 0 for r in outside)


def test_target_grid_passthrough(tmp_path):
    spec = tmp_path / "vmf.json"
    spec.write_text(json.dumps({"family": "vmf", "manifold": "s2", "mean": [1.0, 0.0, 0.0], "kappa": 1.0}))
    assert cli.main(["density-grid", "--target", str(spec), "--res-phi", "12", "--res-theta", "7",
                     "--out", str(tmp_path), "-q"]) == 0
    rows = _rows(tmp_path / "grid.csv")[1:]
    assert len(rows) == 12 * 7
    x, vol = cli.sphere_grid(12, 7)
    expected = Vmf(np.array([1.0, 0.0, 0.0]), 1.0).logpdf(x)
    assert [float(r[2]) for r in rows] == expected.tolist()
    np.testing.assert_allclose(S.mollweide(x), [[float(r[0]), float(r[1])] for r in rows], rtol=0, atol=0)
    assert sum(float(r[3]) for r in rows) == pytest.approx(4 * math.pi, rel=0.05)


def test_sphere_grid_row_count(tmp_path):
    ck = _identity_checkpoint(tmp_path / "id.bin", S)
    assert cli.main(["density-grid", "--checkpoint", ck, "--res-phi", "30", "--res-theta", "20",
                     "--out", str(tmp_path), "-q"]) == 0
    rows = _rows(tmp_path / "grid.csv")
    assert len(rows) == 1 + 30 * 20


@pytest.mark.parametrize("source", ["checkpoint", "target"])
def test_sample_rows(tmp_path, source):
    if source == "checkpoint":
        extra = ["--checkpoint", _identity_checkpoint(tmp_path / "id.bin", H)]
    else:
        extra = ["--target", "c1-sph3"]
    assert cli.main(["sample", "--n", "1000", "--out", str(tmp_path), "-q"] + extra) == 0
    rows = _rows(tmp_path / "samples.csv")
    assert rows[0] == ["x0", "x1", "x2", "proj_x", "proj_y", "logp"]
    assert len(rows) == 1001
    x = np.array([[float(v) for v in r[:3]] for r in rows[1:]])
    M = H if source == "checkpoint" else S
    assert M.membership_error(x).max() < 1e-8


def test_corrupted_checkpoint(tmp_path, capsys):
    ck = _identity_checkpoint(tmp_path / "id.bin", S)
    raw = bytearray(open(ck, "rb").read())
    raw[-1] ^= 0x10
    open(ck, "wb").write(bytes(raw))
    assert cli.main(["sample", "--checkpoint", ck, "--out", str(tmp_path)]) == 4
    assert "checkpoint" in capsys.readouterr().err


def test_config_precedence(tmp_path, monkeypatch):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"seed": 3, "sample.n": 7, "train.budget": 5, "out": str(tmp_path / "o")}))
    args = cli.build_parser().parse_args(["sample", "--config", str(conf), "--seed", "4"])
    cfg = cli.resolve_config(args, "sample")
    assert cfg["seed"] == 4 and cfg["n"] == 7 and cfg["out"] == str(tmp_path / "o")
    assert "budget" not in cfg
    monkeypatch.setenv("MFLOW_THREADS", "2")
    assert cli.resolve_config(args, "sample")["threads"] == 2
    args = cli.build_parser().parse_args(["--threads", "1", "sample"])
    assert cli.resolve_config(args, "sample")["threads"] == 1
    conf.write_text(json.dumps({"bogus": 1}))
    assert cli.main(["sample", "--config", str(conf), "--out", str(tmp_path)]) == 2


def test_output_lock(tmp_path):
    (tmp_path / ".mflow.lock").write_text("123")
    assert cli.main(["sample", "--target", "c1-row1", "--n", "3", "--out", str(tmp_path)]) == 5
    (tmp_path / ".mflow.lock").unlink()
    assert cli.main(["sample", "--target", "c1-row1", "--n", "3", "--out", str(tmp_path), "-q"]) == 0
    assert not (tmp_path / ".mflow.lock").exists()


def test_check_fast_under_a_minute(tmp_path):
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "mflow.cli", "check", "--fast", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    elapsed = time.perf_counter() - t0
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert elapsed < 60
    report = json.loads((tmp_path / "check.json").read_text())
    jsonschema.validate(report, _schema("check.schema.json"))
    assert report["passed"] and {r["suite"] for r in report["results"]} == set(cli_suites())
    assert "FAIL" not in proc.stdout


def cli_suites():
    from mflow.checks import SUITES

    return SUITES


def test_check_catches_broken_logdet_sign(tmp_path, monkeypatch, capsys):
    import mflow.solvers as solvers

    real = solvers._logdet
    monkeypatch.setattr(solvers, "_logdet", lambda M, y: -real(M, y))
    assert cli.main(["check", "--fast", "--suite", "flow", "--out", str(tmp_path)]) == 1
    out = capsys.readouterr().out
    assert any(line.startswith("FAIL") and "normalization" in line for line in out.splitlines())
