import filecmp
import json
import os

import numpy as np

from pulsebandit.cli import main


def write_tiny(tmp_path, **over):
    raw = {
        "schema_version": 1,
        "name": "cli_tiny",
        "base_seed": 555,
        "horizon": 30,
        "trials": 2,
        "gamma_scale": 0.02,
        "environment": {"kind": "synthetic", "nonlinearity": "linear"},
        "schedule": {"lambda": 1.0, "delta": 0.1, "sigma_eta": 0.05,
                     "sigma_eps": 1.0},
        "imputer": {"kind": "linear_ar", "lag": 1},
        "pretrain": {"n": 50, "t0": 15, "seed": 3},
        "agents": [
            {"name": "oful_full", "kind": "oful_full", "dt_source": "oracle"},
            {"name": "pulse_ucb", "kind": "pulse_ucb", "dt_source": "oracle"},
        ],
    }
    raw.update(over)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(raw))
    return str(p)


def test_validate_config_ok(tmp_path, capsys):
    cfg = write_tiny(tmp_path)
    assert main(["validate-config", "--config", cfg]) == 0
    out = capsys.readouterr().out
    assert "ok" in out.lower()


def test_validate_config_bad_field_exits_1(tmp_path, capsys):
    cfg = write_tiny(tmp_path, trials=0)
    assert main(["validate-config", "--config", cfg]) == 1
    err = capsys.readouterr().err
    assert "trials" in err


def test_missing_file_is_an_error(tmp_path, capsys):
    rc = main(["validate-config", "--config", str(tmp_path / "nope.json")])
    assert rc != 0
    assert "error" in capsys.readouterr().err.lower()


def test_simulate_writes_outputs(tmp_path, capsys):
    cfg = write_tiny(tmp_path)
    out = tmp_path / "run"
    rc = main(["simulate", "--config", cfg, "--out", str(out), "--quiet"])
    assert rc == 0
    for fname in ("raw_records.csv", "aggregate.csv", "metadata.json"):
        assert (out / fname).exists()


def test_set_and_trials_flags_apply(tmp_path):
    cfg = write_tiny(tmp_path)
    out = tmp_path / "run2"
    rc = main(["simulate", "--config", cfg, "--out", str(out), "--quiet",
               "--trials", "3", "--set", "horizon=12"])
    assert rc == 0
    meta = json.loads((out / "metadata.json").read_text())
    assert meta["config"]["trials"] == 3
    assert meta["config"]["horizon"] == 12
    raw = (out / "raw_records.csv").read_text().strip().splitlines()
    assert len(raw) == 1 + 3 * 12 * 2  # header + trials * steps * agents


def test_metadata_rerun_matches_bit_for_bit(tmp_path):
    cfg = write_tiny(tmp_path)
    first = tmp_path / "a"
    second = tmp_path / "b"
    assert main(["simulate", "--config", cfg, "--out", str(first), "--quiet"]) == 0
    assert main(["simulate", "--config", str(first / "metadata.json"),
                 "--out", str(second), "--quiet"]) == 0
    assert filecmp.cmp(first / "raw_records.csv", second / "raw_records.csv",
                       shallow=False)


def test_pretrain_saves_imputer(tmp_path):
    cfg = write_tiny(tmp_path)
    out = tmp_path / "pre"
    assert main(["pretrain", "--config", cfg, "--out", str(out), "--quiet"]) == 0
    files = os.listdir(out)
    assert any(f.endswith(".json") for f in files)


def test_sweep_emits_summary_table(tmp_path):
    cfg = write_tiny(tmp_path)
    out = tmp_path / "sw"
    rc = main(["sweep", "--config", cfg, "--out", str(out), "--quiet",
               "--param", "gamma_scale=[0.01, 0.05]"])
    assert rc == 0
    table = (out / "sweep_summary.csv").read_text().strip().splitlines()
    assert table[0] == "param,value,agent,mean_final_regret,se_final_regret"
    assert len(table) == 1 + 2 * 2  # two values x two agents
    assert (out / "gamma_scale=0.01" / "metadata.json").exists()


def test_sweep_rejects_malformed_param(tmp_path, capsys):
    cfg = write_tiny(tmp_path)
    rc = main(["sweep", "--config", cfg, "--out", str(tmp_path / "x"),
               "--param", "gamma_scale=oops", "--quiet"])
    assert rc == 1
    assert "param" in capsys.readouterr().err.lower()


def test_calibrate_writes_band(tmp_path):
    cfg = write_tiny(
        tmp_path,
        environment={"kind": "synthetic", "nonlinearity": 1.0},
        pretrain={"n": 200, "t0": 30, "seed": 11},
        calibration={"alpha": 0.1, "bootstrap_draws": 40, "grid_points": 9},
    )
    out = tmp_path / "cal"
    assert main(["calibrate", "--config", cfg, "--out", str(out), "--quiet"]) == 0
    band = json.loads((out / "band.json").read_text())
    assert band["dhat"] >= 0.0
    assert band["alpha"] == 0.1
    rows = np.genfromtxt(out / "band.csv", delimiter=",", names=True)
    assert rows.shape[0] == 9
    assert np.all(rows["half_width_0"] >= 0.0)


def test_replay_cli_roundtrip(tmp_path):
    import importlib.resources as ir
    import pulsebandit.configs as configs
    log_path = str(ir.files(configs) / "replay_demo_log.csv")
    raw = {
        "schema_version": 1,
        "name": "cli_replay",
        "base_seed": 9,
        "horizon": 25,
        "trials": 2,
        "gamma_scale": 0.05,
        "environment": {"kind": "replay", "path": log_path, "k": 8},
        "schedule": {"lambda": 1.0, "delta": 0.1, "sigma_eta": 0.5,
                     "sigma_eps": 1.0},
        "imputer": {"kind": "linear_ar", "lag": 0},
        "pretrain": {"fraction": 0.2},
        "agents": [
            {"name": "oful_full", "kind": "oful_full"},
            {"name": "uniform_random", "kind": "uniform_random"},
        ],
    }
    cfg = tmp_path / "replay.json"
    cfg.write_text(json.dumps(raw))
    out = tmp_path / "rep"
    assert main(["replay", "--config", str(cfg), "--out", str(out), "--quiet"]) == 0
    assert (out / "raw_replay.csv").exists()
    assert (out / "aggregate_replay.csv").exists()
