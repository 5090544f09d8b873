"""Serialized evaluation results."""

from __future__ import annotations

from pathlib import Path

from pydantic import BaseModel, Field


class RenderErrorStats(BaseModel):
    """Error statistics of rendered images against ground truth.

    Depth errors are in meters, color errors are mean absolute RGB differences in [0, 1].
    ``no_surface`` is set when no compared pixel rendered a valid surface; the statistics
    are then absent.
    """

    n_pixels: int = Field(0, ge=0, description="ground-truth pixels compared")
    coverage: float = Field(0.0, ge=0, le=1, description="fraction that rendered valid")
    no_surface: bool = True
    depth_mean: float | None = Field(None, ge=0)
    depth_median: float | None = Field(None, ge=0)
    depth_p95: float | None = Field(None, ge=0)
    color_mean: float | None = Field(None, ge=0)
    color_median: float | None = Field(None, ge=0)
    color_p95: float | None = Field(None, ge=0)


class RunReport(BaseModel):
    """Trajectory and map quality of one run."""

    ate_rms: float | None = Field(None, ge=0, description="meters")
    frame_errors: dict[int, float] = Field(default_factory=dict, description="translational error per frame")
    render_error: RenderErrorStats | None = None
    classifier_updates: int = Field(0, ge=0)
    map_rounds: int = Field(0, ge=0)
    flagged_forward: dict[int, list[int]] = Field(
        default_factory=dict, description="instance ids the forward test flagged, per frame")
    flagged_reverse: dict[int, list[int]] = Field(
        default_factory=dict, description="stored instance ids the reverse test flagged, per frame")
    stage_ms: dict[str, float] = Field(default_factory=dict, description="mean run-time per stage")
    n_frames: int = Field(0, ge=0)
    n_keyframes: int = Field(0, ge=0)

    def to_json_file(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2))
        return path

    @classmethod
    def from_json_file(cls, path: str | Path) -> RunReport:
        return cls.model_validate_json(Path(path).read_text())
