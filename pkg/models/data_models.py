from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from logic.geometry import Pose
from models.exceptions import ContractViolationError
from models.scene import Intrinsics


@dataclass
class InstanceObservation:
    """One segmented instance in one frame.

    ``pixels`` holds flat pixel indices (v * width + u).
    """

    instance_id: int
    pixels: np.ndarray
    embedding: np.ndarray
    center: np.ndarray

    @property
    def pixel_count(self) -> int:
        return int(self.pixels.size)


@dataclass
class Frame:
    t: int
    color: np.ndarray           # (H, W, 3) in [0, 1]
    depth: np.ndarray           # (H, W) meters, 0 = invalid
    intrinsics: Intrinsics
    instance_ids: np.ndarray    # (H, W) uint32, 0 = background
    observations: list[InstanceObservation] = field(default_factory=list)
    gt_pose: Pose | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape  # type: ignore[return-value]

    def observation(self, instance_id: int) -> InstanceObservation:
        for obs in self.observations:
            if obs.instance_id == instance_id:
                return obs
        raise KeyError(instance_id)


@dataclass
class MotionMask:
    """Per-pixel static mask R^t (True = static) and the per-segment probabilities that
    produced it."""

    static: np.ndarray
    probabilities: dict[int, float] = field(default_factory=dict)

    @classmethod
    def all_static(cls, shape: tuple[int, int]) -> MotionMask:
        return cls(np.ones(shape, dtype=bool))

    @property
    def static_fraction(self) -> float:
        return float(self.static.mean())


@dataclass
class Keyframe:
    frame: Frame
    pose: Pose
    mask: MotionMask

    @property
    def index(self) -> int:
        return self.frame.t


@dataclass
class Trajectory:
    """Ordered (frame index, pose) pairs with strictly increasing indices."""

    frames: list[int] = field(default_factory=list)
    poses: list[Pose] = field(default_factory=list)

    def __post_init__(self):
        if len(self.frames) != len(self.poses):
            raise ContractViolationError("trajectory frames and poses differ in length")
        if any(b <= a for a, b in zip(self.frames, self.frames[1:])):
            raise ContractViolationError("trajectory frame indices must strictly increase")

    def append(self, t: int, pose: Pose) -> None:
        if self.frames and t <= self.frames[-1]:
            raise ContractViolationError(f"frame {t} does not follow {self.frames[-1]}")
        self.frames.append(t)
        self.poses.append(pose)

    def __len__(self) -> int:
        return len(self.frames)

    def as_dict(self) -> dict[int, Pose]:
        return dict(zip(self.frames, self.poses))

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)
