import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from regret_audit.cli import AuditConfig, _clean, build_report, load_logs, main, run_audit
from regret_audit.log_ingest import read_log

FAST = {"draws": 400, "solver": {"restarts": 4}}


def _write(path, obj):
    path.write_text(json.dumps(obj), encoding="utf-8")
    return str(path)


def _gen(tmp_path, name, cfg, *extra):
    out = tmp_path / name
    assert main(["gen", "--config", _write(tmp_path / f"{name}.json", cfg), "--out", str(out), *extra]) == 0
    return out


def _csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


LINEAR = {
    "seed": 0,
    "world": {"a": [[2.0, 1.0]], "b": [[0.0, 0.0]], "curve": "linear", "spend_domain": 10.0},
    "realized": {"kind": "explicit", "matrix": [[5.0, 5.0]]},
    "logging": {"n_obs": 1, "support": "around", "spread": 0.0},
    "truth": {"delta_grid": [0.2], "box_factor": 2.0},
}

# asset 1 saturates far later than asset 2, but the log splits spend the other way
GAP = {
    "seed": 3,
    "world": {"a": [[150.0, 40.0], [150.0, 40.0]], "b": [[0.08, 0.3], [0.08, 0.3]], "noise": [1.0, 0.0],
              "spend_domain": 40.0},
    "realized": {"kind": "explicit", "matrix": [[6.0, 14.0], [6.0, 14.0]]},
    "logging": {"n_obs": 15, "support": "around", "spread": 1.0},
    "truth": {"delta_grid": [0.2, 0.5]},
}

# symmetric assets, identical epochs: the oracle is (10, 10) per epoch and is
# reachable from the anchored first epoch once delta >= 0.25
SWEEP = {
    "seed": 1,
    "world": {"a": [[100.0, 100.0], [100.0, 100.0]], "b": [[0.1, 0.1], [0.1, 0.1]], "noise": [0.0, 0.0],
              "spend_domain": 40.0},
    "realized": {"kind": "explicit", "matrix": [[12.0, 8.0], [12.0, 8.0]]},
    "logging": {"n_obs": 12, "support": "around", "spread": 1.0},
    "truth": {"delta_grid": [0.1, 0.2, 0.3, 0.4, 0.5], "anchored": True},
}


# --- usage -----------------------------------------------------------------------------

@pytest.mark.parametrize("argv", [["--help"], ["audit", "--help"], ["sweep", "--help"], ["gen", "--help"],
                                  ["bench", "--help"]])
def test_help_exits_zero(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 0


@pytest.mark.parametrize("argv", [["audit", "--bogus"], ["gen", "--frobnicate", "1"], ["nope"], []])
def test_usage_errors_exit_64(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 64


def test_console_script_runs():
    proc = subprocess.run([sys.executable, "-m", "regret_audit", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "regret-audit" in proc.stdout


# --- gen ---------------------------------------------------------------------------------

def test_gen_deterministic(tmp_path):
    cfg = dict(GAP)
    a, b = _gen(tmp_path, "a", cfg), _gen(tmp_path, "b", cfg)
    for name in ("world.json", "log.csv", "truth.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    c = _gen(tmp_path, "c", cfg, "--seed", "4")
    assert (c / "log.csv").read_bytes() != (a / "log.csv").read_bytes()


def test_gen_noiseless_rows_on_curve(tmp_path):
    cfg = {"seed": 2, "world": {"K": 2, "E": 3, "drift": 0.0, "noise": [0.0, 0.0]},
           "logging": {"n_obs": 5, "support": "box"}}
    out = _gen(tmp_path, "w", cfg)
    world = json.loads((out / "world.json").read_text())
    a, b = np.array(world["a"]), np.array(world["b"])
    np.testing.assert_allclose(a, a[:1].repeat(3, axis=0), atol=1e-9)
    (plog,) = read_log(out / "log.csv")
    for r in plog.records:
        i = plog.asset_index(r.asset_id)
        expected = a[r.epoch - 1, i] * -np.expm1(-b[r.epoch - 1, i] * r.spend)
        assert r.return_value == pytest.approx(expected, abs=1e-12)


def test_gen_linear_truth_is_five(tmp_path):
    out = _gen(tmp_path, "lin", LINEAR)
    truth = json.loads((out / "truth.json").read_text())
    by_level = {t["delta"]: t["true_regret"] for t in truth["levels"]}
    assert by_level[None] == pytest.approx(5.0, abs=1e-9)
    assert by_level[0.2] == pytest.approx(5.0, abs=1e-9)


def test_gen_rejects_unknown_keys(tmp_path):
    assert main(["gen", "--config", _write(tmp_path / "bad.json", {"wrld": {}}), "--out", str(tmp_path)]) == 2


# --- audit ----------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def gap_dir(tmp_path_factory):
    return _gen(tmp_path_factory.mktemp("gap"), "gap", GAP)


def _audit(tmp_path, name, log, cfg, *extra):
    out = tmp_path / name
    code = main(["audit", str(log), "--config", _write(tmp_path / f"{name}.json", cfg), "--out", str(out), *extra])
    return code, out


def test_audit_outputs_and_columns(tmp_path, gap_dir):
    code, out = _audit(tmp_path, "r", gap_dir / "log.csv", {**FAST, "delta_grid": [0.2, 0.5]})
    assert code == 0
    rows = _csv(out / "summaries.csv")
    assert list(rows[0]) == ["portfolio_id", "horizon_id", "delta", "mean", "std", "ci_low", "ci_high", "median",
                             "prob_improve", "lift_percent", "n_draws"]
    assert [r["delta"] for r in rows] == ["0.2", "0.5", "unconstrained"]
    assert list(_csv(out / "detectability.csv")[0]) == ["delta", "epsilon", "fraction", "mean_lift", "std_lift"]
    draws = _csv(out / "draws.csv")
    assert len(draws) == 3 * 400
    report = json.loads((out / "report.json").read_text())
    assert report["schema"] == "audit-report/1" and not report["partial"]
    mean = float(rows[0]["mean"])
    assert mean == pytest.approx(np.mean([float(d["regret"]) for d in draws if d["delta"] == "0.2"]), rel=1e-12)


def test_audit_large_gap_certified(tmp_path, gap_dir):
    code, out = _audit(tmp_path, "r", gap_dir / "log.csv", {**FAST, "delta_grid": [0.2, 0.5]}, "--eps", "0.6")
    assert code == 0
    (pair,) = json.loads((out / "report.json").read_text())["pairs"]
    assert pair["selection"]["certified"] is True
    assert pair["selection"]["delta_star"] in (0.2, 0.5)


def test_audit_oracle_optimal_not_certified(tmp_path):
    cfg = {"seed": 0, "world": {"K": 2, "E": 2, "drift": 0.0, "noise": [2.0, 0.0]}, "budget": 40,
           "realized": {"kind": "oracle"}, "logging": {"n_obs": 20, "support": "around", "spread": 1.0}}
    d = _gen(tmp_path, "opt", cfg)
    code, out = _audit(tmp_path, "r", d / "log.csv", {}, "--eps", "0.9")
    assert code == 0
    (pair,) = json.loads((out / "report.json").read_text())["pairs"]
    assert pair["selection"]["certified"] is False


def test_audit_byte_identical_rerun(tmp_path, gap_dir):
    cfg = {**FAST, "delta_grid": [0.3]}
    _, a = _audit(tmp_path, "a", gap_dir / "log.csv", cfg)
    _, b = _audit(tmp_path, "b", gap_dir / "log.csv", cfg)
    for name in ("report.json", "summaries.csv", "draws.csv", "detectability.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_thread_count_does_not_change_report(tmp_path, monkeypatch):
    paths = [str(_gen(tmp_path, f"w{k}", {**GAP, "seed": k, "world": {**GAP["world"]}}) / "log.csv")
             for k in range(2)]
    # give each pair its own portfolio id
    for k, p in enumerate(paths):
        text = open(p, encoding="utf-8").read().replace("P1,", f"P{k + 1},")
        open(p, "w", encoding="utf-8").write(text)
    cfg = AuditConfig.from_mapping({**FAST, "delta_grid": [0.3]})
    logs = load_logs(paths)
    monkeypatch.setenv("REGRET_AUDIT_THREADS", "1")
    one = json.dumps(_clean(build_report(run_audit(logs, cfg), cfg)), sort_keys=True)
    monkeypatch.setenv("REGRET_AUDIT_THREADS", "2")
    two = json.dumps(_clean(build_report(run_audit(logs[::-1], cfg), cfg)), sort_keys=True)
    assert one == two


def test_config_echo_is_effective_config(tmp_path, gap_dir):
    cfg = {**FAST, "delta_grid": [0.2], "seed": 5, "out": "ignored"}
    code, out = _audit(tmp_path, "r", gap_dir / "log.csv", cfg, "--draws", "300", "--eps", "0.7")
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    expected = AuditConfig.from_mapping(cfg).override(inputs=(str(gap_dir / "log.csv"),), draws=300,
                                                      cert_epsilon=0.7).to_dict()
    assert report["config"] == expected
    assert report["config"]["draws"] == 300 and report["config"]["fit"]["seed"] == 5
    assert report["config"]["solver"]["restarts"] == 4


def test_seed_override_reseeds_everything(tmp_path, gap_dir):
    code, out = _audit(tmp_path, "r", gap_dir / "log.csv", {**FAST, "delta_grid": [0.2]}, "--seed", "9")
    config = json.loads((out / "report.json").read_text())["config"]
    assert config["seed"] == config["fit"]["seed"] == config["solver"]["seed"] == 9


@pytest.mark.parametrize("cfg", [{"delta_grid": [0.5, 0.2]}, {"draws": 0}, {"coupling": "x"}, {"unknown": 1},
                                 {"fit": {"restarts": -1}}])
def test_bad_config_exits_2(tmp_path, gap_dir, cfg):
    code, _ = _audit(tmp_path, "r", gap_dir / "log.csv", cfg)
    assert code == 2


def test_missing_or_bad_input_exits_2(tmp_path):
    assert main(["audit", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("portfolio_id,horizon_id\nP,H\n", encoding="utf-8")
    assert main(["audit", str(bad), "--out", str(tmp_path)]) == 2


# --- sweep ---------------------------------------------------------------------------------

def test_sweep_saturates(tmp_path):
    d = _gen(tmp_path, "sw", SWEEP)
    cfg = {"draws": 200, "anchored": True, "delta_grid": [0.1, 0.2, 0.3, 0.4, 0.5]}
    out = tmp_path / "out"
    code = main(["sweep", str(d / "log.csv"), "--config", _write(tmp_path / "c.json", cfg), "--out", str(out)])
    assert code == 0
    rows = _csv(out / "sweep.csv")
    assert list(rows[0])[:3] == ["portfolio_id", "horizon_id", "delta"]
    assert [c for c in rows[0] if c.startswith("p")][1:] == ["p1", "p5", "p25", "p50", "p75", "p95", "p99",
                                                           "prob_lift_positive"]
    lift = {r["delta"]: float(r["mean_lift"]) for r in rows}
    seq = [lift[k] for k in ("0.1", "0.2", "0.3", "0.4", "0.5")]
    assert all(b >= a - 1e-9 for a, b in zip(seq, seq[1:]))
    assert seq[0] < seq[2] - 1e-3
    for k in ("0.4", "0.5", "unconstrained"):
        assert lift[k] == pytest.approx(lift["0.3"], rel=1e-3)
    assert {r["certified"] for r in rows} <= {"0", "1"}


def test_sweep_single_level(tmp_path, gap_dir):
    out = tmp_path / "out"
    cfg = {**FAST, "include_unconstrained": False}
    code = main(["sweep", str(gap_dir / "log.csv"), "--config", _write(tmp_path / "c.json", cfg),
                 "--delta-grid", "0.3", "--out", str(out)])
    assert code == 0
    rows = _csv(out / "sweep.csv")
    assert len(rows) == 1 and rows[0]["delta"] == "0.3" and rows[0]["certified"] in ("0", "1")


# --- bench ---------------------------------------------------------------------------------

def test_bench_mismatch_exits_2(tmp_path, gap_dir):
    other = _gen(tmp_path, "other", {**GAP, "world": {"K": 3, "E": 2, "drift": 1.0}, "realized": {}})
    code = main(["bench", str(gap_dir), "--log", str(other / "log.csv"), "--out", str(tmp_path / "b")])
    assert code == 2


def test_bench_sparse_support_is_weak(tmp_path):
    cfg = {"seed": 4, "world": {"K": 2, "E": 2, "drift": 5.0, "noise": [8.0, 0.0]}, "budget": 40,
           "realized": {"kind": "perturbed", "scale": 0.6}, "logging": {"n_obs": 3, "support": "around",
                                                                        "spread": 0.2}}
    d = _gen(tmp_path, "sparse", cfg)
    out = tmp_path / "b"
    code = main(["bench", str(d), "--config", _write(tmp_path / "c.json", FAST), "--out", str(out)])
    result = json.loads((out / "bench.json").read_text())
    assert result["min_obs_per_cell"] == 3
    assert all(r["weak_support"] for r in result["levels"])
    assert all(r["status"] in ("pass", "weak-support") for r in result["levels"])
    assert code == 0


def test_bench_linear_fixture_passes(tmp_path):
    cfg = {**LINEAR, "logging": {"n_obs": 20, "support": "around", "spread": 1.0},
           "world": {**LINEAR["world"], "a": [[2.0, 1.0], [2.0, 1.0]], "b": [[0.0, 0.0], [0.0, 0.0]]},
           "realized": {"kind": "explicit", "matrix": [[5.0, 5.0], [5.0, 5.0]]},
           "truth": {"delta_grid": [0.2, 0.3]}}
    d = _gen(tmp_path, "lin2", cfg)
    out = tmp_path / "b"
    code = main(["bench", "--world", str(d / "world.json"), "--log", str(d / "log.csv"),
                 "--truth", str(d / "truth.json"), "--config", _write(tmp_path / "c.json", FAST), "--out", str(out)])
    result = json.loads((out / "bench.json").read_text())
    assert [r["delta"] for r in result["levels"]] == [0.2, 0.3]
    assert code in (0, 1) and result["passed"] == (code == 0)
