"""Unit tests for per-frame motion evidence on synthetic observed and rendered images."""

from __future__ import annotations

import numpy as np
import pytest

from logic.classifier import LabeledObservation, ReplayRecord, RestTracker, new_classifier
from logic.geometry import Pose
from logic.motion_status import (
    apply_rest_rule,
    back_project,
    forward_labels,
    gather_evidence,
    merge_labels,
    nearest_stored_instance,
    reverse_labels,
)
from logic.renderer import RenderedImage
from models.data_models import Frame, InstanceObservation, Keyframe, MotionMask
from tests.conftest import ROOM_MAX, ROOM_MIN, TINY_INTRINSICS

H, W = TINY_INTRINSICS.height, TINY_INTRINSICS.width


def _block(rows: slice, cols: slice) -> np.ndarray:
    return np.arange(H * W).reshape(H, W)[rows, cols].ravel()


def _observation(instance_id: int, pixels: np.ndarray, center=(0.0, 0.0, 2.0), seed: int = 0) -> InstanceObservation:
    z = np.random.default_rng(seed).normal(size=16)
    return InstanceObservation(instance_id, pixels, z / np.linalg.norm(z), np.asarray(center, dtype=float))


def _frame(depth: np.ndarray, observations, t: int = 3) -> Frame:
    return Frame(t, np.full((H, W, 3), 0.5), depth, TINY_INTRINSICS,
                 np.zeros((H, W), dtype=np.uint32), observations, Pose.identity())


def _rendered(depth: np.ndarray) -> RenderedImage:
    return RenderedImage(np.full((H, W, 3), 0.5), depth, depth > 0)


@pytest.fixture
def wall() -> np.ndarray:
    return np.full((H, W), 2.0)


@pytest.mark.unit
class TestForwardLabels:
    def test_instance_in_front_of_map_is_dynamic(self, wall, small_config):
        mover = _block(slice(2, 6), slice(2, 6))
        still = _block(slice(10, 14), slice(10, 14))
        depth = wall.copy()
        depth.reshape(-1)[mover] = 1.0
        frame = _frame(depth, [_observation(4, mover), _observation(2, still, seed=1)])
        labels, insufficient = forward_labels(frame, _rendered(wall), small_config)
        assert {lab.instance_id: lab.label for lab in labels} == {4: 1, 2: 0}
        assert insufficient == 0
        assert all(lab.source == "forward" and lab.frame == 3 for lab in labels)

    def test_segment_without_rendered_depth_is_skipped(self, wall, small_config):
        pixels = _block(slice(2, 6), slice(2, 6))
        rendered = wall.copy()
        rendered.reshape(-1)[pixels] = 0.0
        labels, insufficient = forward_labels(_frame(wall, [_observation(4, pixels)]), _rendered(rendered), small_config)
        assert labels == [] and insufficient == 1


@pytest.mark.unit
class TestReverseLabels:
    @pytest.fixture
    def stored(self):
        pixels = _block(slice(10, 15), slice(20, 25))
        obs = _observation(6, pixels, center=(0.25, 0.0, 1.0), seed=6)
        kf_frame = _frame(np.full((H, W), 2.0), [obs], t=0)
        return pixels, [Keyframe(kf_frame, Pose.identity(), MotionMask.all_static((H, W)))]

    def test_vanished_object_attributed_to_stored_instance(self, wall, stored, small_config):
        pixels, keyframes = stored
        rendered = wall.copy()
        rendered.reshape(-1)[pixels] = 1.0
        labels = reverse_labels(_frame(wall, []), Pose.identity(), _rendered(rendered), keyframes, small_config)
        assert [(lab.instance_id, lab.label, lab.source) for lab in labels] == [(6, 1, "reverse")]

    def test_no_stored_instance_nearby(self, wall, stored, small_config):
        pixels, keyframes = stored
        keyframes[0].frame.observations[0].center = np.array([-1.5, 0.0, 1.0])
        rendered = wall.copy()
        rendered.reshape(-1)[pixels] = 1.0
        assert reverse_labels(_frame(wall, []), Pose.identity(), _rendered(rendered), keyframes, small_config) == []

    def test_consistent_map_flags_nothing(self, wall, stored, small_config):
        _, keyframes = stored
        assert reverse_labels(_frame(wall, []), Pose.identity(), _rendered(wall), keyframes, small_config) == []


@pytest.mark.unit
class TestHelpers:
    def test_back_project_principal_point(self):
        frame = _frame(np.ones((H, W)), [])
        pixel = np.array([int(TINY_INTRINSICS.cy) * W + int(TINY_INTRINSICS.cx)])
        pose = Pose.from_rt(np.eye(3), np.array([1.0, 0.0, 0.0]))
        np.testing.assert_allclose(back_project(pose, frame, pixel, np.array([2.0])), [[1.0, 0.0, 2.0]])

    def test_nearest_prefers_recent_keyframe_on_ties(self):
        old = _observation(1, np.array([0]), center=(0.0, 0.0, 1.0))
        new = _observation(2, np.array([0]), center=(0.0, 0.0, 1.0))
        keyframes = [
            Keyframe(_frame(np.ones((H, W)), [old], t=0), Pose.identity(), MotionMask.all_static((H, W))),
            Keyframe(_frame(np.ones((H, W)), [new], t=5), Pose.identity(), MotionMask.all_static((H, W))),
        ]
        assert nearest_stored_instance(np.array([0.0, 0.0, 1.1]), keyframes, 0.5).instance_id == 2
        assert nearest_stored_instance(np.array([3.0, 0.0, 1.0]), keyframes, 0.5) is None

    def test_merge_dynamic_wins(self):
        z = np.ones(16) / 4.0
        labels = [LabeledObservation(z, 0, 3, 4), LabeledObservation(z, 1, 3, 4, source="reverse")]
        merged = merge_labels(labels, position_mode=False)
        assert len(merged) == 1 and merged[0].label == 1

    def test_merge_keeps_positions_apart_in_position_mode(self):
        z = np.ones(16) / 4.0
        labels = [
            LabeledObservation(z, 0, 3, 6, position=np.zeros(3)),
            LabeledObservation(z, 1, 3, 6, position=np.ones(3)),
        ]
        assert len(merge_labels(labels, position_mode=True)) == 2


@pytest.mark.unit
class TestRestRule:
    def test_resting_instance_labeled_static_and_retired(self, small_config, rng):
        config = small_config.model_copy(update={"position_mode": True})
        classifier = new_classifier(config, ROOM_MIN, ROOM_MAX, rng)
        obs = _observation(6, np.array([0, 1]), center=(0.6, 0.0, 0.8))
        classifier.buffer.add(ReplayRecord(obs.embedding, 1, 0, 6, np.array([0.6, 0.0, 0.8])))
        classifier.buffer.add(ReplayRecord(obs.embedding, 1, 0, 6, np.array([-0.6, 0.0, 1.0])))
        labels = [LabeledObservation(obs.embedding, 1, 9, 6, obs.center, "forward")]
        out = apply_rest_rule(labels, _frame(np.ones((H, W)), [obs], t=9), {6}, classifier, 0.05)
        assert [(lab.instance_id, lab.label, lab.source) for lab in out] == [(6, 0, "rest")]
        assert len(classifier.buffer) == 1

    def test_reverse_labels_near_rest_position_dropped(self, small_config, rng):
        config = small_config.model_copy(update={"position_mode": True})
        classifier = new_classifier(config, ROOM_MIN, ROOM_MAX, rng)
        obs = _observation(6, np.array([0, 1]), center=(0.6, 0.0, 0.8))
        labels = [
            LabeledObservation(obs.embedding, 1, 9, 6, np.array([0.62, 0.0, 0.8]), "reverse"),
            LabeledObservation(obs.embedding, 1, 9, 6, np.array([-0.6, 0.0, 1.0]), "reverse"),
            LabeledObservation(obs.embedding, 1, 9, 3, np.array([0.6, 0.0, 0.8]), "reverse"),
        ]
        out = apply_rest_rule(labels, _frame(np.ones((H, W)), [obs], t=9), {6}, classifier, 0.05)
        kept = [(lab.instance_id, lab.source, tuple(lab.position)) for lab in out]
        assert kept == [
            (6, "reverse", (-0.6, 0.0, 1.0)),
            (3, "reverse", (0.6, 0.0, 0.8)),
            (6, "rest", (0.6, 0.0, 0.8)),
        ]


@pytest.mark.unit
class TestGatherEvidence:
    def test_forward_only_when_reverse_off(self, wall, small_config, rng):
        mover = _block(slice(2, 6), slice(2, 6))
        depth = wall.copy()
        depth.reshape(-1)[mover] = 1.0
        frame = _frame(depth, [_observation(4, mover)])
        classifier = new_classifier(small_config, ROOM_MIN, ROOM_MAX, rng)
        evidence = gather_evidence(frame, Pose.identity(), _rendered(wall), [], classifier, small_config, reverse=False)
        assert evidence.flagged_forward == [4]
        assert evidence.flagged_reverse == []
        assert [lab.label for lab in evidence.labels] == [1]

    def test_rest_tracker_only_in_position_mode(self, wall, small_config, rng):
        frame = _frame(wall, [_observation(4, _block(slice(2, 6), slice(2, 6)))])
        classifier = new_classifier(small_config, ROOM_MIN, ROOM_MAX, rng)
        tracker = RestTracker(radius=0.05, frames=1)
        evidence = gather_evidence(frame, Pose.identity(), _rendered(wall), [], classifier, small_config, tracker)
        assert evidence.resting == set()
