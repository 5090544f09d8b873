"""Standard scenario library, named after the dynamic RGB-D sequences they mimic.

Every builder takes the frame count and scales its event times with it, so short test
sequences replay the same story as the default 200-frame ones.

Room convention: x right, y down (floor at +y), z forward from the starting camera.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from pathlib import Path

import numpy as np

from logic.geometry import look_at
from models.exceptions import ConfigurationError
from models.scene import Intrinsics, Keypose, ObjectSpec, Room, SceneScript

logger = logging.getLogger(__name__)

ROOM_MIN = (-2.0, -1.2, -2.0)
ROOM_MAX = (2.0, 1.2, 2.0)
FLOOR_Y = ROOM_MAX[1]

DEFAULT_INTRINSICS = Intrinsics(fx=120.0, fy=120.0, cx=80.0, cy=60.0, width=160, height=120)


def _on_floor(x: float, z: float, height: float) -> tuple[float, float, float]:
    return (x, FLOOR_Y - height / 2, z)


def _camera_track(n_frames: int, sweep: float = 0.5) -> list[Keypose]:
    """Slow lateral sweep with a gentle pan, about 1 cm per frame at 200 frames."""
    last = max(n_frames - 1, 1)
    stops = [
        (0.0, (-sweep, -0.1, -1.5), (0.0, 0.2, 1.5)),
        (0.5, (sweep, -0.15, -1.3), (0.2, 0.2, 1.5)),
        (1.0, (0.0, -0.1, -1.4), (-0.1, 0.2, 1.5)),
    ]
    keys = []
    for frac, eye, target in stops:
        pose = look_at(np.array(eye), np.array(target))
        keys.append(Keypose(t=frac * last, translation=tuple(pose.translation), quat=tuple(pose.quat)))
    return keys


def _furniture() -> list[ObjectSpec]:
    return [
        ObjectSpec(
            id=1, shape="box", size=(0.8, 0.6, 0.6), color=(0.55, 0.35, 0.20),
            category="furniture", track=[Keypose(t=0, translation=_on_floor(-1.4, 1.5, 0.6))],
        ),
        ObjectSpec(
            id=2, shape="box", size=(0.6, 1.4, 0.5), color=(0.25, 0.40, 0.60),
            category="furniture", track=[Keypose(t=0, translation=_on_floor(1.5, 1.6, 1.4))],
        ),
        ObjectSpec(
            id=3, shape="sphere", size=(0.25, 0.25, 0.25), color=(0.85, 0.75, 0.20),
            category="furniture", track=[Keypose(t=0, translation=_on_floor(0.4, 1.4, 0.5))],
        ),
    ]


def _person(object_id: int, color, keys: list[tuple[float, float, float]], **kwargs) -> ObjectSpec:
    """A walking person proxy: a tall flat box sliding along the floor."""
    return ObjectSpec(
        id=object_id, shape="box", size=(0.45, 1.5, 0.3), color=color, category="person",
        track=[Keypose(t=t, translation=_on_floor(x, z, 1.5)) for t, x, z in keys],
        **kwargs,
    )


def _script(name: str, objects: list[ObjectSpec], n_frames: int, seed: int,
            intrinsics: Intrinsics | None) -> SceneScript:
    return SceneScript(
        name=name,
        room=Room(box_min=ROOM_MIN, box_max=ROOM_MAX),
        objects=objects,
        camera=_camera_track(n_frames),
        n_frames=n_frames,
        intrinsics=intrinsics or DEFAULT_INTRINSICS,
        seed=seed,
    )


# ============================================================================
# Scenarios
# ============================================================================

def static_scene(n_frames: int = 200, seed: int = 0, intrinsics: Intrinsics | None = None) -> SceneScript:
    return _script("static", _furniture(), n_frames, seed, intrinsics)


def walking(n_frames: int = 200, seed: int = 0, intrinsics: Intrinsics | None = None) -> SceneScript:
    """Two people. A crosses the room, leaves view, and comes back near the end; B walks in
    from the middle of the sequence on."""
    last = n_frames - 1
    a_leave = int(0.5 * n_frames)
    a_back = int(0.85 * n_frames)
    b_enter = int(0.3 * n_frames)
    mover_a = _person(
        4, (0.80, 0.15, 0.15),
        [(0, -1.3, 0.4), (a_leave - 1, 1.2, 0.4), (a_back, 1.2, 0.6), (last, -0.3, 0.6)],
        gaps=[(a_leave, a_back)] if a_back > a_leave else [],
    )
    mover_b = _person(
        5, (0.15, 0.65, 0.25),
        [(b_enter, 1.3, 0.9), (int(0.65 * n_frames), -1.3, 0.9), (last, 0.9, 0.9)],
        t_appear=b_enter,
    )
    return _script("walking", _furniture() + [mover_a, mover_b], n_frames, seed, intrinsics)


def kidnapping_box(n_frames: int = 200, seed: int = 0, intrinsics: Intrinsics | None = None) -> SceneScript:
    """A box sits still and is removed halfway through."""
    box = ObjectSpec(
        id=6, shape="box", size=(0.45, 0.45, 0.45), color=(0.90, 0.45, 0.10), category="box",
        track=[Keypose(t=0, translation=_on_floor(-0.3, 0.8, 0.45))],
        t_vanish=int(0.5 * n_frames),
    )
    return _script("kidnapping_box", _furniture() + [box], n_frames, seed, intrinsics)


REPLACE_OLD = (-0.6, 1.0)
REPLACE_NEW = (0.6, 0.8)


def replace_box(n_frames: int = 200, seed: int = 0, intrinsics: Intrinsics | None = None) -> SceneScript:
    """A box is picked up and put down at a new rest position at 40% of the sequence."""
    t_move = int(0.4 * n_frames)
    keys = [Keypose(t=0, translation=_on_floor(*REPLACE_OLD, 0.45))]
    if t_move > 0:
        keys.append(Keypose(t=t_move - 1, translation=_on_floor(*REPLACE_OLD, 0.45)))
        keys.append(Keypose(t=t_move, translation=_on_floor(*REPLACE_NEW, 0.45)))
    box = ObjectSpec(
        id=6, shape="box", size=(0.45, 0.45, 0.45), color=(0.90, 0.45, 0.10), category="box",
        track=keys,
    )
    return _script("replace_box", _furniture() + [box], n_frames, seed, intrinsics)


def crowd(n_frames: int = 200, seed: int = 0, intrinsics: Intrinsics | None = None) -> SceneScript:
    """Three wide movers close to the camera, covering well over 40% of the first frame."""
    last = n_frames - 1
    size = (0.8, 1.8, 0.4)

    def mover(object_id, color, xs, z):
        return ObjectSpec(
            id=object_id, shape="box", size=size, color=color, category="person",
            track=[Keypose(t=t, translation=_on_floor(x, z, size[1])) for t, x in zip((0, last // 2, last), xs)],
        )

    movers = [
        mover(7, (0.75, 0.20, 0.30), (-0.8, -0.2, -1.2), 0.0),
        mover(8, (0.20, 0.30, 0.75), (0.1, 0.9, 0.2), 0.2),
        mover(9, (0.30, 0.70, 0.30), (0.9, 1.5, 0.7), 0.45),
    ]
    return _script("crowd", _furniture() + movers, n_frames, seed, intrinsics)


SCENARIOS: dict[str, Callable[..., SceneScript]] = {
    "static": static_scene,
    "walking": walking,
    "kidnapping_box": kidnapping_box,
    "replace_box": replace_box,
    "crowd": crowd,
}


def build_scenario(
    name_or_file: str,
    seed: int = 0,
    n_frames: int | None = None,
    intrinsics: Intrinsics | None = None,
) -> SceneScript:
    """Build a named scenario, or load a scene script from a JSON file.

    Raises:
        ConfigurationError: unknown scenario name and no such file
    """
    if name_or_file in SCENARIOS:
        kwargs = {"seed": seed, "intrinsics": intrinsics}
        if n_frames is not None:
            kwargs["n_frames"] = n_frames
        script = SCENARIOS[name_or_file](**kwargs)
        logger.info("Built scenario %s (%d frames, %d objects)", script.name, script.n_frames,
                    len(script.objects))
        return script
    path = Path(name_or_file)
    if not path.is_file():
        raise ConfigurationError(
            f"unknown scenario {name_or_file!r}; expected one of {sorted(SCENARIOS)} or a scene file"
        )
    script = SceneScript.model_validate_json(path.read_text())
    return script.model_copy(update={"seed": seed})
