"""Serialized scene description for the synthetic dynamic RGB-D simulator."""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from models.exceptions import ConfigurationError


class Intrinsics(BaseModel):
    """Pinhole intrinsics. The principal point is given in pixel-center coordinates, so
    pixel (u, v) looks along ((u - cx) / fx, (v - cy) / fy, 1)."""

    model_config = ConfigDict(frozen=True)

    fx: float
    fy: float
    cx: float
    cy: float
    width: int = Field(..., ge=1)
    height: int = Field(..., ge=1)

    def validate_focal(self) -> None:
        """Raises ConfigurationError for degenerate focal lengths."""
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigurationError(f"degenerate intrinsics fx={self.fx}, fy={self.fy}")

    @property
    def n_pixels(self) -> int:
        return self.width * self.height


class Keypose(BaseModel):
    """A pose at a frame time. ``quat`` uses (x, y, z, w) ordering."""

    t: float
    translation: tuple[float, float, float]
    quat: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 1.0)


class ObjectSpec(BaseModel):
    """A rigid flat-colored primitive with a scripted track.

    ``size`` holds full extents (sx, sy, sz) for boxes; for spheres its first entry is the
    radius. Boxes stay axis-aligned in world coordinates; only keypose translations move
    them.
    """

    id: int = Field(..., ge=1)
    shape: Literal["box", "sphere"]
    size: tuple[float, float, float]
    color: tuple[float, float, float]
    category: str = "box"
    track: list[Keypose]
    t_appear: int = 0
    t_vanish: int | None = None
    gaps: list[tuple[int, int]] = Field(
        default_factory=list, description="[start, end) frame intervals during which the object is absent"
    )

    @field_validator("track")
    @classmethod
    def _track_sorted(cls, track: list[Keypose]) -> list[Keypose]:
        if not track:
            raise ValueError("an object needs at least one keypose")
        times = [k.t for k in track]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("keypose times must be strictly increasing")
        return track

    def half_extents(self) -> tuple[float, float, float]:
        if self.shape == "sphere":
            r = self.size[0]
            return (r, r, r)
        return (self.size[0] / 2, self.size[1] / 2, self.size[2] / 2)

    def exists_at(self, t: int) -> bool:
        if any(start <= t < end for start, end in self.gaps):
            return False
        return self.t_appear <= t and (self.t_vanish is None or t < self.t_vanish)


class Room(BaseModel):
    box_min: tuple[float, float, float]
    box_max: tuple[float, float, float]
    wall_colors: list[tuple[float, float, float]] = Field(
        default_factory=lambda: [
            (0.80, 0.75, 0.70),  # -x
            (0.70, 0.78, 0.82),  # +x
            (0.92, 0.92, 0.90),  # -y ceiling
            (0.55, 0.45, 0.35),  # +y floor
            (0.75, 0.82, 0.70),  # -z
            (0.85, 0.80, 0.65),  # +z
        ]
    )

    @model_validator(mode="after")
    def _ordered(self) -> Room:
        if any(hi <= lo for lo, hi in zip(self.box_min, self.box_max)):
            raise ValueError("room box_max must exceed box_min on every axis")
        if len(self.wall_colors) != 6:
            raise ValueError("room needs six wall colors")
        return self


class SceneScript(BaseModel):
    """Complete description of a synthetic sequence (stored as ``scene.json``)."""

    name: str = "custom"
    room: Room
    objects: list[ObjectSpec] = Field(default_factory=list)
    camera: list[Keypose]
    n_frames: int = Field(200, ge=1)
    intrinsics: Intrinsics
    seed: int = Field(0, ge=0)
    embedding_dim: int = Field(16, ge=2)
    embedding_noise: float = Field(0.0, ge=0)
    encoder_seed: int = Field(0, ge=0, description="seeds the embedding basis shared by every scene")
    depth_noise: float = Field(0.0, ge=0, description="std of optional Gaussian depth noise (m)")
    light_dir: tuple[float, float, float] = (0.3, -1.0, -0.5)  # toward the light; y points down
    ambient: float = Field(0.35, ge=0, le=1)
    movable_categories: list[str] = Field(default_factory=lambda: ["person", "balloon"])

    @model_validator(mode="after")
    def _check_consistency(self) -> SceneScript:
        times = [k.t for k in self.camera]
        if not times or any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("camera keypose times must be strictly increasing")
        ids = [o.id for o in self.objects]
        if len(ids) != len(set(ids)):
            raise ValueError("object ids must be unique")
        lo, hi = self.room.box_min, self.room.box_max
        for obj in self.objects:
            if obj.t_appear < 0 or obj.t_appear >= self.n_frames:
                raise ValueError(f"object {obj.id}: t_appear outside [0, n_frames)")
            if obj.t_vanish is not None and not obj.t_appear < obj.t_vanish <= self.n_frames:
                raise ValueError(f"object {obj.id}: bad existence interval")
            if any(not 0 <= start < end <= self.n_frames for start, end in obj.gaps):
                raise ValueError(f"object {obj.id}: absence gaps must lie in [0, n_frames)")
            half = obj.half_extents()
            for key in obj.track:
                for axis in range(3):
                    if key.translation[axis] - half[axis] < lo[axis] - 1e-9 or (
                        key.translation[axis] + half[axis] > hi[axis] + 1e-9
                    ):
                        raise ValueError(f"object {obj.id} leaves the room at t={key.t}")
        return self

    def object_by_id(self, object_id: int) -> ObjectSpec:
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        raise KeyError(object_id)
