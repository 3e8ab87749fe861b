"""End-to-end tests of the command line interface (in-process)."""

import csv
import json

import numpy as np
import pytest

from gpmhe import benchmark as bm
from gpmhe import cli, dynamics

TINY = {
    "system": "reactor1",
    "offline_steps": 8,
    "online_steps": 6,
    "runs": 2,
    "horizon": 3,
    "train_starts": 1,
    "estimators": ["mhe-propagated", "ekf"],
    "grid_points": 3,
    "refinements": 20,
    "seed": 11,
}


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def read_stdout_json(capsys) -> dict:
    return json.loads(capsys.readouterr().out)


def strip_timing_columns(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [i for i, name in enumerate(rows[0]) if "time" not in name]
    return [[row[i] for i in keep] for row in rows]


def test_gen_data_matches_library_protocol(config_path, tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["gen-data", "--config", config_path,
                     "--out", str(out)]) == 0
    info = read_stdout_json(capsys)
    assert info["system"] == "reactor1" and info["trajectories"] == 3
    loaded = dynamics.load_trajectories_csv(out / "offline_data.csv")
    expected = bm.generate_offline_trajectories(bm.spec_from_config(TINY))
    assert len(loaded) == 3
    for got, want in zip(loaded, expected):
        assert np.array_equal(got.states, want.states)
        assert np.array_equal(got.outputs, want.outputs)


def test_gen_data_seed_flag_overrides_config(config_path, tmp_path, capsys):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    cli.main(["gen-data", "--config", config_path, "--out", str(out_a)])
    info = read_stdout_json(capsys)
    assert info["seed"] == 11
    cli.main(["gen-data", "--config", config_path, "--out", str(out_b),
              "--seed", "77"])
    info = read_stdout_json(capsys)
    assert info["seed"] == 77
    a = dynamics.load_trajectories_csv(out_a / "offline_data.csv")
    b = dynamics.load_trajectories_csv(out_b / "offline_data.csv")
    assert not np.array_equal(a[0].outputs, b[0].outputs)


def test_train_saves_loadable_model(config_path, tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["train", "--config", config_path,
                     "--out", str(out)]) == 0
    info = read_stdout_json(capsys)
    assert info["state_gps"] == 2 and info["training_rows"] == 21
    loaded = dynamics.load_dynamics(out / "model.json")
    fresh = bm.train_models(bm.spec_from_config(TINY))
    x = np.array([1.5, 1.5])
    assert np.allclose(loaded.mean_f(x, ()), fresh.mean_f(x, ()),
                       rtol=1e-12)
    assert np.allclose(loaded.mean_h(x, ()), fresh.mean_h(x, ()),
                       rtol=1e-12)


def test_estimate_writes_trajectory_csv(config_path, tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["estimate", "--config", config_path, "--out", str(out),
                     "--estimator", "ekf"]) == 0
    info = read_stdout_json(capsys)
    assert info["estimator"] == "ekf" and info["steps"] == 6
    with open(out / "trajectory_ekf.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "x_0", "x_1", "xhat_0", "xhat_1", "step_time"]
    assert len(rows) == 8  # header + online_steps + 1
    assert float(rows[1][5]) == 0.0  # no solve before the first measurement
    data = np.array([[float(v) for v in row] for row in rows[1:]])
    recomputed = np.mean((data[1:, 1:3] - data[1:, 3:5]) ** 2)
    assert np.isclose(info["mse"], recomputed, rtol=1e-12)


def test_estimate_defaults_to_first_roster_entry(config_path, tmp_path,
                                                 capsys):
    out = tmp_path / "out"
    cli.main(["estimate", "--config", config_path, "--out", str(out)])
    info = read_stdout_json(capsys)
    assert info["estimator"] == "mhe-propagated"
    assert (out / "trajectory_mhe-propagated.csv").exists()


def test_benchmark_runs_roster_and_reports(config_path, tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["benchmark", "--config", config_path,
                     "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "mhe-propagated:" in text and "ekf:" in text
    with open(out / "results.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert [row[0] for row in rows[1:]] == ["mhe-propagated", "ekf"]
    with open(out / "runs.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 1 + TINY["runs"] * 2


def test_benchmark_estimator_and_runs_flags(config_path, tmp_path, capsys):
    out = tmp_path / "out"
    cli.main(["benchmark", "--config", config_path, "--out", str(out),
              "--estimator", "ekf", "--runs", "3"])
    capsys.readouterr()
    with open(out / "runs.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 4
    assert {row[1] for row in rows[1:]} == {"ekf"}


def test_benchmark_deterministic_modulo_timing(config_path, tmp_path, capsys):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    cli.main(["benchmark", "--config", config_path, "--out", str(out_a),
              "--seed", "42"])
    cli.main(["benchmark", "--config", config_path, "--out", str(out_b),
              "--seed", "42"])
    capsys.readouterr()
    for name in ("results.csv", "runs.csv"):
        assert strip_timing_columns(out_a / name) \
            == strip_timing_columns(out_b / name)


def test_analyze_reports_constants_and_bound(config_path, tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["analyze", "--config", config_path,
                     "--out", str(out)]) == 0
    info = read_stdout_json(capsys)
    # default caps put the weight floor/ceiling ratio at 1e10, which needs
    # a 259-step window before the forgetting factor 0.91 wins
    assert np.isclose(info["contraction_lambda"], 1e10, rtol=1e-6)
    assert info["min_horizon"] == 259
    assert info["mu"] > 1.0 and info["applicable"] is False
    assert info["alpha_max"] >= max(info["alpha_state"],
                                    info["alpha_output"])
    with open(out / "pres_report.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:2] == ["t", "lhs"]
    assert len(rows) == 2 + TINY["online_steps"]  # header + times 0..T


def test_cli_rejects_bad_invocations(config_path):
    with pytest.raises(SystemExit):
        cli.main([])
    with pytest.raises(SystemExit):
        cli.main(["estimate", "--config", config_path,
                  "--estimator", "smoother"])
