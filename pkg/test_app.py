#!/usr/bin/env python3
"""
Tests for the command-line entry point: outputs, manifests and exit codes
"""

import logging
import math
import shutil

import pytest

from app import __version__, main
from file_formats import read_key_values

FAST_DRIVE = f"{math.sqrt(3000.0):.6f}"


@pytest.fixture(autouse=True)
def release_log_stream():
    yield
    logging.basicConfig(handlers=[logging.NullHandler()], force=True)


@pytest.fixture
def slow_run(tmp_path):
    out = tmp_path / "slow"
    code = main(["--out", str(out), "simulate", "--t-end", "2000", "--output-dt", "100"])
    assert code == 0
    return out


def test_version(capsys):
    assert main(["--version"]) == 0
    assert __version__ in capsys.readouterr().out


def test_simulate_writes_trajectory_and_manifest(slow_run):
    assert (slow_run / "trajectory.csv").exists()
    meta = read_key_values(slow_run / "trajectory.meta")
    assert meta["n_ref"] == pytest.approx(324.0)
    assert meta["mode"] == "meanfield-slow"
    manifest = read_key_values(slow_run / "simulate_manifest.txt")
    assert manifest["run.status"] == "ok"
    assert manifest["run.seed"] == 0
    assert manifest["flag.simulate.t_end"] == 2000.0
    assert manifest["kappa_mhz"] == pytest.approx(3.22)


def test_manifest_replays_the_run(slow_run, tmp_path):
    replay = tmp_path / "replay"
    assert main(["--config", str(slow_run / "simulate_manifest.txt"), "--out", str(replay), "simulate"]) == 0
    original = (slow_run / "trajectory.csv").read_text(encoding="utf-8")
    assert (replay / "trajectory.csv").read_text(encoding="utf-8") == original


def test_stochastic_simulation_is_seeded(tmp_path):
    outputs = []
    for name in ("first", "second"):
        out = tmp_path / name
        argv = ["--out", str(out), "--seed", "7", "simulate", "--mode", "stochastic", "--t-end", "2000",
                "--budget", "100", "--eta-over-kappa", FAST_DRIVE]
        assert main(argv) == 0
        outputs.append((out / "trajectory_counts.csv").read_text(encoding="utf-8"))
        assert (out / "trajectory_counts.meta").exists()
    assert outputs[0] == outputs[1]
    manifest = read_key_values(tmp_path / "first" / "simulate_manifest.txt")
    assert manifest["run.seed"] == 7


def test_analyze_reports_missing_transition(slow_run, tmp_path, capsys):
    out = tmp_path / "analysis"
    assert main(["--out", str(out), "analyze", str(slow_run / "trajectory.csv")]) == 0
    assert "no transition" in capsys.readouterr().out
    report = read_key_values(out / "trajectory_transition.txt")
    assert report["transition"] is False
    assert report["missing"] == "t10,t50,t90"


def test_analyze_count_record(tmp_path):
    sim = tmp_path / "sim"
    assert main(["--out", str(sim), "simulate", "--mode", "stochastic", "--t-end", "2000", "--budget", "100"]) == 0
    out = tmp_path / "analysis"
    assert main(["--out", str(out), "analyze", str(sim / "trajectory_counts.csv"), "--window", "500"]) == 0
    assert (out / "trajectory_counts_fluctuations.csv").exists()
    assert (out / "trajectory_counts_transition.txt").exists()
    manifest = read_key_values(out / "analyze_manifest.txt")
    assert manifest["run.input.0"].endswith("trajectory_counts.csv")


def test_analyze_missing_file_is_a_usage_error(tmp_path):
    out = tmp_path / "analysis"
    assert main(["--out", str(out), "analyze", str(tmp_path / "absent.csv")]) == 1
    manifest = read_key_values(out / "analyze_manifest.txt")
    assert manifest["run.status"] == "failed"
    assert manifest["run.error_type"] == "ConfigError"


def test_analyze_malformed_file_is_a_usage_error(tmp_path):
    path = tmp_path / "broken.csv"
    path.write_text("t_us,counts\n0,1\n1,many\n", encoding="utf-8")
    assert main(["--out", str(tmp_path / "analysis"), "analyze", str(path), "--n-ref", "324"]) == 1


def test_analyze_needs_a_reference_level(slow_run, tmp_path):
    bare = tmp_path / "bare.csv"
    shutil.copy(slow_run / "trajectory.csv", bare)
    assert main(["--out", str(tmp_path / "analysis"), "analyze", str(bare)]) == 1
    assert main(["--out", str(tmp_path / "analysis"), "analyze", str(bare), "--n-ref", "324"]) == 0


def test_fit_gamma_without_transition_is_a_numerical_failure(slow_run, tmp_path):
    out = tmp_path / "fit"
    assert main(["--out", str(out), "fit-gamma", str(slow_run / "trajectory.csv")]) == 2
    manifest = read_key_values(out / "fit-gamma_manifest.txt")
    assert manifest["run.status"] == "failed"
    assert manifest["run.error_type"] == "NoTransitionError"


def test_full_integrator_refuses_long_windows(tmp_path):
    out = tmp_path / "full"
    assert main(["--out", str(out), "simulate", "--mode", "meanfield-full", "--t-end", "300000"]) == 2
    manifest = read_key_values(out / "simulate_manifest.txt")
    assert manifest["run.error_type"] == "StepBudgetExceeded"


def test_sweep_with_too_few_points_skips_the_fit(tmp_path, capsys):
    out = tmp_path / "sweep"
    assert main(["--out", str(out), "sweep", "--mode", "meanfield", "--drives", "40,55"]) == 0
    assert "power-law fit skipped" in capsys.readouterr().out
    assert (out / "scaling.csv").exists()
    assert not (out / "power_law_fit.txt").exists()


def test_sweep_rejects_malformed_drives(tmp_path):
    assert main(["--out", str(tmp_path), "sweep", "--drives", "10,fast"]) == 1


def test_unknown_parameter_key_is_a_usage_error(tmp_path):
    config = tmp_path / "params.txt"
    config.write_text("kappa_mhz = 3.22\nbogus = 1\n", encoding="utf-8")
    assert main(["--config", str(config), "--out", str(tmp_path), "simulate"]) == 1
    manifest = read_key_values(tmp_path / "simulate_manifest.txt")
    assert manifest["run.status"] == "failed"
    assert manifest["run.error_type"] == "ConfigError"
    assert manifest["run.key"] == "bogus"
    assert manifest["run.input.0"] == str(config)


def test_invalid_choice_is_a_usage_error(tmp_path):
    assert main(["--out", str(tmp_path), "simulate", "--mode", "quantum"]) == 1


def test_analyze_manifest_replays_its_inputs(slow_run, tmp_path):
    first = tmp_path / "first"
    assert main(["--out", str(first), "analyze", str(slow_run / "trajectory.csv"), "--window", "500"]) == 0
    manifest = read_key_values(first / "analyze_manifest.txt")
    assert manifest["flag.analyze.paths"] == str(slow_run / "trajectory.csv")

    replay = tmp_path / "replay"
    assert main(["--config", str(first / "analyze_manifest.txt"), "--out", str(replay), "analyze"]) == 0
    original = (first / "trajectory_transition.txt").read_text(encoding="utf-8")
    assert (replay / "trajectory_transition.txt").read_text(encoding="utf-8") == original


def test_analyze_without_inputs_is_a_usage_error(tmp_path):
    assert main(["--out", str(tmp_path), "analyze"]) == 1
    assert read_key_values(tmp_path / "analyze_manifest.txt")["run.key"] == "paths"


def test_fit_gamma_writes_into_a_fresh_directory(tmp_path):
    sim = tmp_path / "sim"
    argv = ["--out", str(sim), "simulate", "--eta-over-kappa", FAST_DRIVE, "--t-end", "33000", "--output-dt", "50"]
    assert main(argv) == 0
    out = tmp_path / "fresh" / "fit"
    assert main(["--out", str(out), "fit-gamma", str(sim / "trajectory.csv")]) == 0
    report = read_key_values(out / "fit_gamma.txt")
    assert report["Gamma_over_gamma"] == pytest.approx(0.93e-3, rel=0.1)
    manifest = read_key_values(out / "fit-gamma_manifest.txt")
    assert manifest["run.status"] == "ok"
    assert manifest["flag.fit-gamma.reference_path"] == str(sim / "trajectory.csv")


def test_stochastic_ensemble_writes_members_and_mean(tmp_path):
    out = tmp_path / "ensemble"
    argv = ["--out", str(out), "--seed", "3", "simulate", "--mode", "stochastic", "--t-end", "2000",
            "--budget", "100", "--eta-over-kappa", FAST_DRIVE, "--n-traj", "3"]
    assert main(argv) == 0
    for i in range(3):
        assert (out / f"trajectory_{i:03d}.csv").exists()
        assert (out / f"trajectory_{i:03d}_counts.csv").exists()
    assert (out / "trajectory_mean.csv").read_text(encoding="utf-8").startswith("t_us,mean_photons,stderr_photons")
    assert read_key_values(out / "trajectory_mean.meta")["n_traj"] == 3
    manifest = read_key_values(out / "simulate_manifest.txt")
    assert manifest["flag.simulate.n_traj"] == 3
    assert not (out / "trajectory.csv").exists()


def test_stochastic_sweep_repeats_each_drive(tmp_path):
    out = tmp_path / "sweep"
    argv = ["--out", str(out), "sweep", "--drives", FAST_DRIVE, "--budget", "200", "--n-traj", "2"]
    assert main(argv) == 0
    rows = (out / "scaling.csv").read_text(encoding="utf-8").strip().splitlines()
    assert len(rows) == 3
