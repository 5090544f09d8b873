"""Tests for the command-line entry point and its exit codes."""

from __future__ import annotations

import numpy as np
import pytest

import app
from logic.geometry import Pose
from models.data_models import Trajectory
from storage.dataset import write_tum_trajectory


@pytest.fixture
def gt_file(tmp_path):
    angles = np.linspace(0, np.pi, 6)
    positions = np.stack([np.cos(angles), np.zeros(6), np.sin(angles)], axis=1)
    traj = Trajectory(list(range(6)), [Pose.from_rt(np.eye(3), p) for p in positions])
    return write_tum_trajectory(traj, tmp_path / "gt.txt")


@pytest.mark.integration
class TestCli:
    def test_eval_identical_trajectories(self, gt_file, capsys):
        assert app.main(["eval", "--est", str(gt_file), "--gt", str(gt_file)]) == app.EXIT_OK
        assert capsys.readouterr().out.strip() == "ate_rms 0.000000"

    def test_eval_writes_report(self, gt_file, tmp_path):
        report = tmp_path / "report.json"
        assert app.main(["eval", "--est", str(gt_file), "--gt", str(gt_file), "--report", str(report)]) == 0
        assert report.is_file()

    def test_eval_missing_file_is_a_data_error(self, gt_file, tmp_path):
        assert app.main(["eval", "--est", str(tmp_path / "none.txt"), "--gt", str(gt_file)]) == app.EXIT_DATA

    def test_eval_too_few_frames_is_a_data_error(self, gt_file, tmp_path):
        short = tmp_path / "short.txt"
        short.write_text("0 0 0 0 0 0 0 1\n1 1 0 0 0 0 0 1\n")
        assert app.main(["eval", "--est", str(short), "--gt", str(gt_file)]) == app.EXIT_DATA

    def test_no_command_is_a_usage_error(self, capsys):
        assert app.main([]) == app.EXIT_USAGE
        assert "usage error" in capsys.readouterr().err

    def test_unknown_flag_is_a_usage_error(self):
        assert app.main(["run", "--data", "x", "--bogus"]) == app.EXIT_USAGE

    def test_unknown_scene_is_a_usage_error(self, tmp_path):
        assert app.main(["simulate", "--scene", "nowhere", "--seed", "1", "--out", str(tmp_path)]) == app.EXIT_USAGE

    def test_run_on_missing_dataset(self, tmp_path):
        assert app.main(["run", "--data", str(tmp_path / "missing"), "--quiet"]) == app.EXIT_DATA

    def test_bad_config_is_a_data_error(self, tmp_path):
        config = tmp_path / "config.json"
        config.write_text('{"no_such_key": 1}')
        assert app.main(["run", "--data", str(tmp_path), "--config", str(config)]) == app.EXIT_DATA

    def test_simulate_writes_dataset(self, tmp_path, capsys):
        out = tmp_path / "sim"
        assert app.main(["simulate", "--scene", "static", "--seed", "3", "--frames", "3", "--out", str(out)]) == 0
        assert (out / "scene.json").is_file()
        assert (out / "depth_00002.raw").is_file()
        assert capsys.readouterr().out.strip() == str(out)

    def test_gradcheck_classifier(self, capsys):
        assert app.main(["gradcheck", "--module", "classifier"]) == app.EXIT_OK
        assert "classifier/bce" in capsys.readouterr().out

    def test_pretrain_prior(self, tmp_path):
        out = tmp_path / "prior"
        assert app.main(["pretrain-prior", "--out", str(out), "--seed", "0", "--steps", "3"]) == 0
        assert (tmp_path / "prior.bin").is_file()
