"""Tests for dataset directories, raster files, trajectories and checkpoints."""

from __future__ import annotations

import json

import numpy as np
import pytest

from logic.classifier import ReplayRecord, new_classifier, pretrain_prior
from logic.geometry import Pose
from logic.neural_map import initialize_map
from models.data_models import Trajectory
from models.exceptions import DatasetError
from storage import rasters
from storage.checkpoints import load_classifier, load_map, load_prior, save_classifier, save_map, save_prior
from storage.dataset import (
    depth_path,
    instances_path,
    load_dataset,
    read_tum_trajectory,
    write_dataset,
    write_tum_trajectory,
)
from tests.conftest import ROOM_MAX, ROOM_MIN


@pytest.fixture
def dataset_dir(tiny_static_script, tmp_path):
    return write_dataset(tiny_static_script, tmp_path / "data")


# ============================================================================
# Rasters
# ============================================================================

@pytest.mark.unit
class TestRasters:
    def test_color_quantized_to_8_bits(self, tmp_path, rng):
        color = rng.uniform(size=(6, 5, 3))
        back = rasters.read_color(rasters.write_color(tmp_path / "c.ppm", color))
        assert back.shape == (6, 5, 3)
        assert np.abs(back - color).max() <= 0.5 / 255 + 1e-12

    def test_mask_file(self, tmp_path):
        mask = np.array([[True, False], [False, True]])
        np.testing.assert_array_equal(rasters.read_mask(rasters.write_mask(tmp_path / "m.pgm", mask)), mask)

    def test_depth_is_float32(self, tmp_path):
        path = rasters.write_depth(tmp_path / "d.raw", np.full((3, 4), 1.25))
        assert path.stat().st_size == 3 * 4 * 4
        np.testing.assert_array_equal(rasters.read_depth(path, (3, 4)), 1.25)

    def test_wrong_size_raises(self, tmp_path):
        path = rasters.write_depth(tmp_path / "d.raw", np.ones((3, 4)))
        with pytest.raises(DatasetError):
            rasters.read_depth(path, (4, 4))

    def test_negative_depth_rejected(self, tmp_path):
        path = rasters.write_depth(tmp_path / "d.raw", -np.ones((2, 2)))
        with pytest.raises(DatasetError):
            rasters.read_depth(path, (2, 2))

    def test_missing_color_raises(self, tmp_path):
        with pytest.raises(DatasetError):
            rasters.read_color(tmp_path / "nope.ppm")


# ============================================================================
# Trajectories
# ============================================================================

@pytest.mark.unit
class TestTumTrajectory:
    def test_write_then_read(self, tmp_path, rng):
        poses = [Pose(rng.normal(size=4), rng.normal(size=3)) for _ in range(4)]
        path = write_tum_trajectory(Trajectory([0, 1, 5, 9], poses), tmp_path / "traj.txt")
        back = read_tum_trajectory(path)
        assert back.frames == [0, 1, 5, 9]
        for a, b in zip(poses, back.poses):
            np.testing.assert_allclose(a.matrix(), b.matrix(), atol=1e-8)

    def test_comments_ignored(self, tmp_path):
        path = tmp_path / "traj.txt"
        path.write_text("# t tx ty tz qx qy qz qw\n0 0 0 0 0 0 0 1\n1 1 0 0 0 0 0 1\n")
        assert len(read_tum_trajectory(path)) == 2

    def test_wrong_columns(self, tmp_path):
        path = tmp_path / "traj.txt"
        path.write_text("0 0 0 0 0 0 1\n")
        with pytest.raises(DatasetError):
            read_tum_trajectory(path)

    def test_non_increasing_frames(self, tmp_path):
        path = tmp_path / "traj.txt"
        path.write_text("1 0 0 0 0 0 0 1\n0 0 0 0 0 0 0 1\n")
        with pytest.raises(DatasetError):
            read_tum_trajectory(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetError):
            read_tum_trajectory(tmp_path / "none.txt")


# ============================================================================
# Datasets
# ============================================================================

@pytest.mark.unit
class TestDataset:
    def test_directory_layout(self, dataset_dir, tiny_frame):
        names = {p.name for p in dataset_dir.iterdir()}
        assert {"scene.json", "gt_traj.txt"} <= names
        for t in range(6):
            assert {f"color_{t:05d}.ppm", f"depth_{t:05d}.raw", f"ids_{t:05d}.raw", f"instances_{t:05d}.json"} <= names
        n_pixels = tiny_frame.depth.size
        assert depth_path(dataset_dir, 0).stat().st_size == 4 * n_pixels
        assert (dataset_dir / "ids_00000.raw").stat().st_size == 4 * n_pixels
        assert (dataset_dir / "color_00000.ppm").read_bytes()[:2] == b"P6"

    def test_frames_match_the_simulator(self, dataset_dir, tiny_frame):
        dataset = load_dataset(dataset_dir)
        frame = dataset.frame(0)
        assert len(dataset) == 6
        np.testing.assert_allclose(frame.depth, tiny_frame.depth, rtol=1e-6)
        np.testing.assert_array_equal(frame.instance_ids, tiny_frame.instance_ids)
        assert np.abs(frame.color - tiny_frame.color).max() <= 0.5 / 255 + 1e-12
        assert [o.instance_id for o in frame.observations] == [o.instance_id for o in tiny_frame.observations]
        np.testing.assert_allclose(frame.gt_pose.matrix(), tiny_frame.gt_pose.matrix(), atol=1e-8)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(tmp_path / "absent")

    def test_missing_scene_file(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(DatasetError):
            load_dataset(tmp_path / "empty")

    def test_truncated_depth_names_the_file(self, dataset_dir):
        path = depth_path(dataset_dir, 2)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(DatasetError) as excinfo:
            load_dataset(dataset_dir).frame(2)
        assert excinfo.value.path == path

    def test_instance_count_mismatch(self, dataset_dir):
        path = instances_path(dataset_dir, 1)
        records = json.loads(path.read_text())
        if not records:
            pytest.skip("no instance visible in frame 1")
        records[0]["pixel_count"] += 1
        path.write_text(json.dumps(records))
        with pytest.raises(DatasetError):
            load_dataset(dataset_dir).frame(1)

    def test_index_out_of_range(self, dataset_dir):
        with pytest.raises(IndexError):
            load_dataset(dataset_dir).frame(6)


# ============================================================================
# Checkpoints
# ============================================================================

@pytest.mark.unit
class TestCheckpoints:
    def test_map_restores_exactly(self, small_config, rng, tmp_path):
        params = initialize_map(small_config, ROOM_MIN, ROOM_MAX, rng)
        blob = save_map(params, tmp_path / "map_final")
        assert blob.name == "map_final.bin"
        restored = load_map(tmp_path / "map_final")
        assert restored.resolutions == params.resolutions
        np.testing.assert_array_equal(restored.box_min, params.box_min)
        for key, value in params.tree.items():
            np.testing.assert_array_equal(restored.tree[key], value)

    def test_corrupt_map_blob(self, small_config, rng, tmp_path):
        blob = save_map(initialize_map(small_config, ROOM_MIN, ROOM_MAX, rng), tmp_path / "map")
        blob.write_bytes(b"XXXXXXXX" + blob.read_bytes()[8:])
        with pytest.raises(DatasetError):
            load_map(tmp_path / "map")

    def test_classifier_with_buffer(self, small_config, rng, tmp_path):
        state = new_classifier(small_config, ROOM_MIN, ROOM_MAX, rng)
        state.buffer.add(ReplayRecord(np.ones(16) / 4.0, 1, frame=3, instance_id=4))
        state.update_count = 2
        save_classifier(state, tmp_path / "cls")
        restored = load_classifier(tmp_path / "cls", small_config)
        assert restored.update_count == 2
        assert [r.frame for r in restored.buffer] == [3]
        np.testing.assert_array_equal(restored.params.weights[0], state.params.weights[0])
        assert restored.prior is None

    def test_prior_round_trip_and_width_check(self, small_config, tmp_path):
        prior = pretrain_prior(small_config, ["person"], ["box"], seed=0, n_per_category=4, steps=2)
        path = save_prior(prior, tmp_path / "prior")
        loaded = load_prior(path, small_config.embedding_dim)
        np.testing.assert_array_equal(loaded.biases[-1], prior.biases[-1])
        with pytest.raises(DatasetError):
            load_prior(path, 8)

    def test_prior_absent_from_online_checkpoint(self, small_config, rng, tmp_path):
        save_classifier(new_classifier(small_config, ROOM_MIN, ROOM_MAX, rng), tmp_path / "cls")
        with pytest.raises(DatasetError):
            load_prior(tmp_path / "cls")
