from __future__ import annotations

import csv
import io
import json

import pytest

from stagsynth import cli
from stagsynth.harness import DgpSpec, generate, write_panel


def _setup(tmp_path, lines, spec=None):
    ds, _ = generate(spec or DgpSpec(J=3, T0=20, N1=1, T_post=3, seed=2), 0)
    write_panel(ds, tmp_path / "panel.csv")
    cfg = tmp_path / "run.cfg"
    cfg.write_text("data.path = panel.csv\n" + "".join(f"{line}\n" for line in lines))
    return str(cfg), ds


def _run(capsys, *argv):
    code = cli.main(list(argv))
    return code, capsys.readouterr().out


def _exact(text):
    # keep numbers as the printed strings so comparisons are digit-exact
    return json.loads(text, parse_float=str, parse_int=str)


def test_estimate_single_donor(tmp_path, capsys):
    cfg, _ = _setup(tmp_path, ["predictand.unit = t00"], DgpSpec(J=1, T0=10, N1=1, seed=1))
    code, out = _run(capsys, "estimate", "--config", cfg)
    assert code == 0
    doc = json.loads(out)
    assert doc["schema_version"] == 1
    assert doc["units"]["t00"]["donors"] == {"d00": pytest.approx(1.0, abs=1e-9)}


def test_estimate_csv_rows(tmp_path, capsys):
    spec = DgpSpec(J=3, T0=12, N1=2, stagger=2, seed=4)
    cfg, _ = _setup(tmp_path, ["predictand.kind = att"], spec)
    code, out = _run(capsys, "estimate", "--config", cfg, "--format", "csv")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    pairs = {(r["unit"], r["donor"]) for r in rows}
    assert len(pairs) == len(rows)
    assert {u for u, _ in pairs} == {"t00", "t01"}


def test_invalid_alphas_exit_code(tmp_path, capsys):
    cfg, _ = _setup(tmp_path, ["predictand.unit = t00", "study.alpha1 = 0.6", "study.alpha2 = 0.5"])
    code, out = _run(capsys, "intervals", "--config", cfg)
    assert code == 2
    assert json.loads(out)["error"]["code"] == "InvalidAlphas"


def test_unknown_key_is_config_error(tmp_path, capsys):
    cfg, _ = _setup(tmp_path, ["predictand.unit = t00", "study.colour = blue"])
    code, out = _run(capsys, "estimate", "--config", cfg)
    assert code == 2
    assert json.loads(out)["error"]["code"] == "InvalidConfig"


def test_missing_data_file_is_data_error(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("data.path = nowhere.csv\npredictand.unit = t00\n")
    code, out = _run(capsys, "estimate", "--config", str(cfg))
    assert code == 3
    assert json.loads(out)["error"]["exit_code"] == 3


def test_simultaneous_rows_share_group(tmp_path, capsys):
    cfg, _ = _setup(tmp_path, ["predictand.unit = t00", "study.draws = 40", "study.horizon = 2",
                               "study.simultaneous = true"])
    code, out = _run(capsys, "intervals", "--config", cfg, "--format", "csv")
    assert code == 0
    joint = [r for r in csv.DictReader(io.StringIO(out)) if r["simultaneous"] == "true"]
    assert len(joint) == 3
    assert len({r["group"] for r in joint}) == 1


def test_noiseless_interval_at_effect(tmp_path, capsys):
    spec = DgpSpec(J=3, T0=20, N1=1, T_post=1, sigma=0.0, w0=(0.2, 0.5, 0.3), effect=1.0)
    cfg, _ = _setup(tmp_path, ["predictand.unit = t00", "study.draws = 40"], spec)
    code, out = _run(capsys, "intervals", "--config", cfg)
    assert code == 0
    (iv,) = json.loads(out)["intervals"]
    assert iv["lower"] == pytest.approx(1.0 - iv["eps_delta"], abs=1e-6)
    assert iv["upper"] == pytest.approx(1.0 + iv["eps_delta"], abs=1e-6)


def test_seed_precedence(tmp_path, capsys, monkeypatch):
    cfg, _ = _setup(tmp_path, ["predictand.unit = t00", "study.draws = 40", "study.seed = 1"])
    outs = {}
    for name, env, flag in (("env", "5", []), ("flag", None, ["--seed", "5"]), ("both", "9", ["--seed", "5"]),
                            ("config", None, [])):
        if env is None:
            monkeypatch.delenv("SEED", raising=False)
        else:
            monkeypatch.setenv("SEED", env)
        code, outs[name] = _run(capsys, "intervals", "--config", cfg, *flag)
        assert code == 0
    assert outs["env"] == outs["flag"] == outs["both"]
    assert outs["config"] != outs["flag"]


def test_plotdata_rows_and_round_trip(tmp_path, capsys):
    spec = DgpSpec(J=3, T0=15, N1=2, stagger=2, T_post=2, seed=6)
    cfg, ds = _setup(tmp_path, ["predictand.kind = att", "study.draws = 40"], spec)
    code, out = _run(capsys, "plotdata", "--config", cfg)
    assert code == 0
    rows = _exact(out)["rows"]
    post = [r for r in rows if "lower" in r]
    T = ds.t_max
    assert len(post) == sum(T - int(ds.adoption[u]) + 1 for u in ds.treated)
    assert all("lower" not in r and "joint_lower" not in r for r in rows if r not in post)
    for u in ds.treated:
        Ti = int(ds.adoption[u])
        cfg_u = tmp_path / f"{u}.cfg"
        cfg_u.write_text(f"data.path = panel.csv\npredictand.unit = {u}\nstudy.draws = 40\n"
                         f"study.horizon = {T - Ti}\nstudy.simultaneous = true\n")
        code, out = _run(capsys, "intervals", "--config", str(cfg_u))
        assert code == 0
        taus = [iv["tau_hat"] for iv in _exact(out)["intervals"] if not iv["simultaneous"]]
        effects = [r["effect"] for r in post if r["unit"] == u]
        assert effects == taus


def test_plotdata_csv_pre_rows_empty(tmp_path, capsys):
    cfg, ds = _setup(tmp_path, ["predictand.unit = t00", "study.draws = 40"])
    code, out = _run(capsys, "plotdata", "--config", cfg, "--format", "csv")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    Ti = int(ds.adoption["t00"])
    for r in rows:
        pre = int(r["period"]) < Ti
        assert (r["lower"] == "" and r["joint_upper"] == "") == pre
        assert r["synthetic"] != ""


def test_coverage_command(tmp_path, capsys):
    cfg = tmp_path / "cov.cfg"
    cfg.write_text("dgp.J = 3\ndgp.T0 = 12\ndgp.N1 = 1\ndgp.R = 2\ndgp.chunk = 2\nstudy.draws = 20\n")
    code, out = _run(capsys, "coverage", "--config", str(cfg))
    assert code == 0
    doc = json.loads(out)
    assert doc["command"] == "coverage" and doc["schema_version"] == 1
    assert all(0.0 <= v <= 1.0 for v in doc["coverage"].values())
