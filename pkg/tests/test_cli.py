import json

import numpy as np
import pytest

import ldcbf.verify
from ldcbf.cli import fmt, main, read_csv, resolve
from ldcbf.core import Ldcbf
from ldcbf.errors import ConfigError


def write_cfg(tmp_path, cfg):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    return str(p)


def run_json(capsys, argv):
    code = main(argv + ["--json"])
    out = capsys.readouterr().out
    return code, json.loads(out)


def test_verify_passes(capsys):
    code, rep = run_json(capsys, ["verify"])
    assert code == 0 and rep["ok"] and rep["first_failure"] is None
    assert {c["name"] for c in rep["checks"]} >= {"barrier_gradient", "duration_guarantee", "rk4_order"}


def test_verify_text_output(capsys):
    assert main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "barrier_gradient" in out and out.strip().endswith("PASS")


def test_injected_gradient_bug_fails(capsys, monkeypatch):
    good = ldcbf.verify.quadratic_barrier

    def broken(T=1.0, alpha=1.0):
        b = good(T, alpha)
        return Ldcbf(b.B, lambda x: 2.2 * np.asarray(x, float), b.L, b.beta, b.T, b.alpha, b.hess)

    monkeypatch.setattr(ldcbf.verify, "quadratic_barrier", broken)
    code, rep = run_json(capsys, ["verify"])
    assert code == 1
    assert rep["first_failure"] == "barrier_gradient"
    main(["verify"])
    assert "first failing invariant: barrier_gradient" in capsys.readouterr().out


@pytest.mark.parametrize("cfg", [
    {"toy": {"bogus": 1}},
    {"nosuchsection": {}},
    {"toy": {"nodes": "many"}},
    {"toy": {"nodes": 1.5}},
    {"seed": -1},
    {"experiment": "coverage"},
])
def test_config_errors_exit_2(tmp_path, capsys, cfg):
    code, rep = run_json(capsys, ["learn-ldcbf", "--config", write_cfg(tmp_path, cfg), "--out", str(tmp_path)])
    assert code == 2 and "error" in rep


def test_section_seed_rejected(tmp_path, capsys):
    code, _ = run_json(capsys, ["learn-ldcbf", "--config", write_cfg(tmp_path, {"toy": {"seed": 4}})])
    assert code == 2


def test_missing_and_malformed_config(tmp_path, capsys):
    assert main(["verify", "--config", str(tmp_path / "absent.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["verify", "--config", str(bad)]) == 2
    capsys.readouterr()


def test_usage_error_exit_2(capsys):
    assert main(["nosuchcommand"]) == 2
    assert main(["verify", "--seed", "x"]) == 2
    capsys.readouterr()


def test_zero_agents_config_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"coverage_run": {"n_agents": 0}})
    code, rep = run_json(capsys, ["coverage", "--config", cfg, "--out", str(tmp_path)])
    assert code == 2 and "n_agents" in rep["error"]


def test_coverage_short_horizon_warning(tmp_path, capsys, caplog):
    cfg = write_cfg(tmp_path, {"coverage": {"T": 40.0},
                               "coverage_run": {"n_seeds": 1, "horizon": 5.0, "grid": 30, "n_agents": 2}})
    code, rep = run_json(capsys, ["coverage", "--config", cfg, "--out", str(tmp_path)])
    assert code in (0, 1)
    assert any("45" in w for w in rep["warnings"])
    assert "energy guarantee does not apply" in caplog.text
    meta, header, rows = read_csv(tmp_path / "coverage_steps.csv")
    assert header[:3] == ["seed", "t", "agent_id"] and len(rows) == 51 * 2


def test_resolve_defaults():
    rc = resolve("transfer", {})
    assert rc.seed == 10 and set(rc.sections) == {"balance", "ldcbf", "durations", "move", "transfer"}
    assert resolve("coverage", {"seed": 3}, seed=5).seed == 5
    with pytest.raises(ConfigError):
        resolve("coverage", {"toy": {}})


def test_fmt():
    assert fmt(0.1) == "0.10000000000000001"
    assert fmt(True) == "1" and fmt(np.int64(3)) == "3"
    assert float(fmt(np.pi)) == np.pi


SMALL_TOY = {"toy": {"runs": 5, "verify_points": 200}}


def _learn(tmp_path, name):
    out = tmp_path / name
    code = main(["learn-ldcbf", "--config", write_cfg(tmp_path, SMALL_TOY), "--out", str(out), "--seed", "2"])
    return code, out / "barrier.csv"


def test_csv_format_and_reproducible(tmp_path, capsys):
    code1, p1 = _learn(tmp_path, "a")
    code2, p2 = _learn(tmp_path, "b")
    capsys.readouterr()
    assert code1 == code2 == 0
    raw = p1.read_bytes()
    assert raw == p2.read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")
    meta, header, rows = read_csv(p1)
    assert meta["seed"] == "2" and meta["command"] == "learn-ldcbf"
    assert "git_revision" in meta and json.loads(meta["toy"])["runs"] == 5
    assert header == ["x", "B", "in_initial_set", "in_safe_set"]
    for x, b, *_ in rows:
        for cell in (x, b):
            assert "%.17g" % float(cell) == cell
    assert any(len(r[1].lstrip("-").replace(".", "").lstrip("0").split("e")[0]) == 17 for r in rows)


def test_stochastic_check_small(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"ou": {"n_paths": 500, "pairs": [[0.2, 0.5]], "dt": 0.01}})
    code, rep = run_json(capsys, ["stochastic-check", "--config", cfg, "--out", str(tmp_path)])
    assert code in (0, 1)
    assert rep["pairs"][0]["bound_ok"]
    assert (tmp_path / "exit_probability.csv").exists()
