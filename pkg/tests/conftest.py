"""Pytest configuration and shared fixtures.

Fixtures cover:
- Tiny intrinsics and scene scripts that render in milliseconds
- Small map configurations
- Seeded random generators
"""

from __future__ import annotations

import numpy as np
import pytest

from logic.scenarios import ROOM_MAX, ROOM_MIN, static_scene
from logic.scene_sim import render_ground_truth
from models.config import SlamConfig
from models.scene import Intrinsics, Keypose, ObjectSpec, Room, SceneScript

TINY_INTRINSICS = Intrinsics(fx=24.0, fy=24.0, cx=16.0, cy=12.0, width=32, height=24)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_intrinsics() -> Intrinsics:
    return TINY_INTRINSICS


@pytest.fixture
def small_config() -> SlamConfig:
    """A map and classifier small enough for unit tests."""
    return SlamConfig(
        n_samples=16,
        n_surface_samples=4,
        pixels_track=64,
        pixels_ba=128,
        grid_resolutions=[6, 10],
        grid_features=2,
        blob_bins=4,
        geo_hidden=16,
        geo_feature_dim=4,
        color_hidden=16,
        smooth_samples=32,
        chunk_size=128,
        motion_check_samples=16,
        probe_samples=32,
        iters_track=3,
        iters_map=3,
        iters_first_map=5,
        classifier_hidden=8,
        classifier_steps=30,
        embedding_dim=16,
        n_report_probes=1,
    )


@pytest.fixture
def tiny_static_script() -> SceneScript:
    return static_scene(n_frames=6, seed=0, intrinsics=TINY_INTRINSICS)


@pytest.fixture
def tiny_frame(tiny_static_script):
    return render_ground_truth(tiny_static_script, 0)


@pytest.fixture
def empty_room_script() -> SceneScript:
    """Camera at the room center looking down +z at the far wall 2 m away."""
    return SceneScript(
        name="empty",
        room=Room(box_min=(-2.0, -2.0, -2.0), box_max=(2.0, 2.0, 2.0)),
        camera=[Keypose(t=0, translation=(0.0, 0.0, 0.0))],
        n_frames=3,
        intrinsics=Intrinsics(fx=20.0, fy=20.0, cx=10.0, cy=10.0, width=21, height=21),
    )


def make_object(object_id: int, center, size=(0.4, 0.4, 0.4), shape="box", category="box", **kwargs) -> ObjectSpec:
    return ObjectSpec(
        id=object_id, shape=shape, size=size, color=(0.8, 0.2, 0.2), category=category,
        track=[Keypose(t=0, translation=tuple(center))], **kwargs,
    )


__all__ = ["ROOM_MAX", "ROOM_MIN", "TINY_INTRINSICS", "make_object"]
