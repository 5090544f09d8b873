"""Configuration: run hyperparameters (JSON file) and process settings (environment).

``SlamConfig`` holds every hyperparameter of a SLAM run. It is read from a JSON file whose
keys must all be known; ``Settings`` holds process-level knobs read from the environment or a
``.env`` file.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from models.exceptions import ConfigurationError


class SlamConfig(BaseModel):
    """All hyperparameters of tracking, mapping and motion classification.

    Sampling counts, truncation, motion thresholds, loss weights, keyframe interval, replay
    count and prune ratio hold the reference values; everything else is sized for
    desk-scale runs.
    """

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    # Sampling
    n_samples: int = Field(128, ge=2, description="uniform samples per ray (N)")
    n_surface_samples: int = Field(16, ge=0, description="depth-guided samples per ray")
    pixels_track: int = Field(1024, ge=1, description="H_t")
    pixels_ba: int = Field(2048, ge=1, description="H_b")
    near: float = Field(0.05, gt=0)
    motion_check_samples: int = Field(48, ge=2)
    probe_samples: int = Field(256, ge=2)
    chunk_size: int = Field(256, ge=1, description="rays per rendering chunk")

    # Truncation and rendering
    truncation: float = Field(0.10, gt=0, description="tr in meters")
    render_bandwidth: float | None = Field(
        None, gt=0, description="lambda_tr of the two-sigmoid weight; the truncation unless set")
    w_min: float = Field(1e-4, gt=0)
    sdf_target: Literal["sample", "rendered"] = "sample"

    # Loss weights
    lambda_geo: float = Field(0.1, ge=0)
    lambda_sdf: float = Field(5000.0, ge=0)
    lambda_free: float = Field(10.0, ge=0)
    lambda_smooth: float = Field(1e-8, ge=0)
    smooth_samples: int = Field(256, ge=1)

    # Map architecture
    grid_resolutions: list[int] = Field(default_factory=lambda: [16, 32])
    grid_features: int = Field(2, ge=1)
    grid_margin: float = Field(0.2, gt=0)
    blob_bins: int = Field(8, ge=2)
    geo_hidden: int = Field(32, ge=1)
    geo_feature_dim: int = Field(8, ge=1)
    color_hidden: int = Field(32, ge=1)

    # Optimization
    iters_track: int = Field(15, ge=0)
    iters_map: int = Field(30, ge=0)
    iters_first_map: int = Field(100, ge=0, description="mapping iterations on frame 0")
    lr_pose: float = Field(1e-3, ge=0)
    lr_grid: float = Field(1e-2, ge=0)
    lr_decoder: float = Field(1e-3, ge=0)
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)

    # Keyframes and mapping cadence
    keyframe_interval: int = Field(5, ge=1)
    mapping_every: int = Field(5, ge=1)
    ba_refine_keyframes: bool = True

    # Motion status
    use_classifier: bool = True
    use_replay: bool = True
    position_mode: bool = False
    prior_path: str | None = None
    t_d: float = Field(0.3, gt=0)
    t_p: float = Field(0.05, gt=0)
    prune_ratio: float = Field(0.9, gt=0, le=1, description="T_R")
    edge_threshold: float = Field(0.1, gt=0, description="t_edge")
    color_edge_threshold: float | None = Field(
        0.1, gt=0, description="rendered-color edge test for segmentation, None = depth only"
    )
    min_segment_area: int = Field(20, ge=1, description="A_min")
    bidirectional_every: int = Field(1, ge=1)
    n_replay: int = Field(5, ge=0, description="n_c")
    buffer_capacity: int = Field(512, ge=1)
    classifier_hidden: int = Field(32, ge=1)
    classifier_steps: int = Field(50, ge=1, description="K_cls")
    classifier_lr: float = Field(1e-2, gt=0)
    match_radius: float = Field(0.5, gt=0)
    rest_frames: int = Field(5, ge=1)
    rest_radius: float = Field(0.05, gt=0)

    # Bookkeeping
    seed: int = Field(0, ge=0)
    embedding_dim: int = Field(16, ge=2)
    forget_rounds: int = Field(10, ge=1, description="F_forget used by probes")
    dump_every: int = Field(0, ge=0, description="debug dump cadence in frames, 0 = off")
    checkpoint_every_round: bool = False
    n_report_probes: int = Field(3, ge=0, description="held-out frames rendered for the run report")

    @model_validator(mode="before")
    @classmethod
    def _bandwidth_from_truncation(cls, data):
        if isinstance(data, dict) and data.get("render_bandwidth") is None:
            truncation = data.get("truncation", cls.model_fields["truncation"].default)
            data = {**data, "render_bandwidth": truncation}
        return data

    @model_validator(mode="after")
    def _check_ranges(self) -> SlamConfig:
        if not 0 < self.t_p < 1:
            raise ValueError("t_p must lie in (0, 1)")
        if not self.grid_resolutions or any(r < 2 for r in self.grid_resolutions):
            raise ValueError("grid_resolutions needs at least one level with >= 2 vertices")
        return self

    @classmethod
    def from_json_file(cls, path: str | Path) -> SlamConfig:
        """Load a config file, rejecting unknown keys.

        Raises:
            ConfigurationError: unreadable file, bad JSON, unknown key or invalid value
        """
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"{path}: cannot read config ({e})") from e
        try:
            return cls.model_validate(raw)
        except ValidationError as e:
            raise ConfigurationError(f"{path}: {e}") from e

    def to_json_file(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.model_dump_json(indent=2))
        return path


class Settings(BaseSettings):
    """Process settings from environment.

    All settings can be overridden via ``NEURODYN_*`` environment variables or a ``.env``
    file in the working directory.
    """

    LOG_LEVEL: str = "INFO"
    LOG_JSON_EVENTS: bool = True
    OUTPUT_ROOT: str = "runs"

    model_config = SettingsConfigDict(
        env_prefix="NEURODYN_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore",
    )


settings = Settings()
