"""Dataset directories and TUM trajectory files.

Layout of a dataset directory::

    scene.json             SceneScript
    color_00000.ppm        binary P6 color
    depth_00000.raw        little-endian float32 z-depth, row-major, 0 = invalid
    ids_00000.raw          little-endian uint32 instance ids, 0 = background
    instances_00000.json   instance observations (id, pixel count, embedding, center)
    gt_traj.txt            t tx ty tz qx qy qz qw per line

Frames are loaded lazily; every load failure raises DatasetError naming the file.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import ValidationError

from logic.geometry import Pose
from logic.scene_sim import render_ground_truth
from models.data_models import Frame, InstanceObservation, Trajectory
from models.exceptions import ContractViolationError, DatasetError
from models.scene import SceneScript
from storage import rasters

logger = logging.getLogger(__name__)

SCENE_FILE = "scene.json"
GT_TRAJECTORY_FILE = "gt_traj.txt"


def color_path(root: Path, t: int) -> Path:
    return root / f"color_{t:05d}.ppm"


def depth_path(root: Path, t: int) -> Path:
    return root / f"depth_{t:05d}.raw"


def ids_path(root: Path, t: int) -> Path:
    return root / f"ids_{t:05d}.raw"


def instances_path(root: Path, t: int) -> Path:
    return root / f"instances_{t:05d}.json"


# ============================================================================
# TUM trajectories
# ============================================================================

def write_tum_trajectory(trajectory: Trajectory, path: str | Path) -> Path:
    """Write one ``t tx ty tz qx qy qz qw`` line per pose."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [
        np.concatenate([[t], pose.translation, pose.quat])
        for t, pose in zip(trajectory.frames, trajectory.poses)
    ]
    data = np.array(rows).reshape(-1, 8)
    np.savetxt(path, data, fmt=["%d"] + ["%.9f"] * 7, delimiter=" ")
    return path


def read_tum_trajectory(path: str | Path) -> Trajectory:
    """Read a TUM trajectory file; ``#`` lines are comments.

    Timestamps are taken as frame indices (rounded to the nearest integer).

    Raises:
        DatasetError: missing file, wrong column count or non-increasing indices
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(path, "trajectory file not found")
    try:
        df = pd.read_csv(path, sep=r"\s+", comment="#", header=None)
    except pd.errors.EmptyDataError:
        return Trajectory()
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise DatasetError(path, f"unparseable trajectory ({e})") from e
    if df.shape[1] != 8:
        raise DatasetError(path, f"expected 8 columns, found {df.shape[1]}")
    values = df.to_numpy(dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise DatasetError(path, "trajectory holds non-finite values")
    try:
        return Trajectory(
            frames=[int(round(v)) for v in values[:, 0]],
            poses=[Pose(row[4:8], row[1:4]) for row in values],
        )
    except ContractViolationError as e:
        raise DatasetError(path, str(e)) from e


# ============================================================================
# Dataset directories
# ============================================================================

def _observations_to_json(frame: Frame) -> list[dict]:
    return [
        {
            "instance_id": obs.instance_id,
            "pixel_count": obs.pixel_count,
            "embedding": obs.embedding.tolist(),
            "center": obs.center.tolist(),
        }
        for obs in frame.observations
    ]


def write_frame(root: Path, frame: Frame) -> None:
    rasters.write_color(color_path(root, frame.t), frame.color)
    rasters.write_depth(depth_path(root, frame.t), frame.depth)
    rasters.write_ids(ids_path(root, frame.t), frame.instance_ids)
    instances_path(root, frame.t).write_text(json.dumps(_observations_to_json(frame)))


def write_dataset(script: SceneScript, out_dir: str | Path) -> Path:
    """Render every frame of a script and write the dataset directory.

    Returns:
        Path: the dataset directory
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / SCENE_FILE).write_text(script.model_dump_json(indent=2))
    gt = Trajectory()
    for t in range(script.n_frames):
        frame = render_ground_truth(script, t)
        write_frame(root, frame)
        gt.append(t, frame.gt_pose)
    write_tum_trajectory(gt, root / GT_TRAJECTORY_FILE)
    logger.info("Wrote %d frames of %s to %s", script.n_frames, script.name, root)
    return root


@dataclass
class Dataset:
    """A dataset directory opened for reading."""

    root: Path
    script: SceneScript
    gt: Trajectory

    def __len__(self) -> int:
        return self.script.n_frames

    def __iter__(self) -> Iterator[Frame]:
        for t in range(len(self)):
            yield self.frame(t)

    def frame(self, t: int) -> Frame:
        """Load frame t.

        Raises:
            DatasetError: a frame file is missing or inconsistent
        """
        if not 0 <= t < len(self):
            raise IndexError(f"frame {t} outside [0, {len(self)})")
        K = self.script.intrinsics
        shape = (K.height, K.width)
        color = rasters.read_color(color_path(self.root, t))
        if color.shape != (*shape, 3):
            raise DatasetError(color_path(self.root, t), f"expected {shape} image, found {color.shape[:2]}")
        depth = rasters.read_depth(depth_path(self.root, t), shape)
        ids = rasters.read_ids(ids_path(self.root, t), shape)
        observations = self._load_observations(t, ids)
        gt_pose = self.gt.as_dict().get(t)
        return Frame(t, color, depth, K, ids, observations, gt_pose)

    def _load_observations(self, t: int, ids: np.ndarray) -> list[InstanceObservation]:
        path = instances_path(self.root, t)
        try:
            records = json.loads(path.read_text())
        except FileNotFoundError as e:
            raise DatasetError(path, "missing instance file") from e
        except json.JSONDecodeError as e:
            raise DatasetError(path, f"invalid JSON ({e})") from e
        flat = ids.ravel()
        observations = []
        try:
            for rec in records:
                pixels = np.flatnonzero(flat == rec["instance_id"])
                if pixels.size != rec["pixel_count"] or pixels.size == 0:
                    raise DatasetError(path, f"instance {rec['instance_id']} disagrees with the id raster")
                embedding = np.asarray(rec["embedding"], dtype=np.float64)
                if abs(np.linalg.norm(embedding) - 1.0) > 1e-6:
                    raise DatasetError(path, f"instance {rec['instance_id']} embedding is not unit-norm")
                observations.append(InstanceObservation(
                    instance_id=int(rec["instance_id"]),
                    pixels=pixels,
                    embedding=embedding,
                    center=np.asarray(rec["center"], dtype=np.float64),
                ))
        except (KeyError, TypeError) as e:
            raise DatasetError(path, f"malformed instance record ({e})") from e
        listed = {obs.instance_id for obs in observations}
        present = set(np.unique(flat).tolist()) - {0}
        if present != listed:
            raise DatasetError(path, f"ids {sorted(present ^ listed)} lack a matching observation")
        return observations


def load_dataset(path: str | Path) -> Dataset:
    """Open a dataset directory.

    Raises:
        DatasetError: missing directory, unreadable scene.json or ground-truth trajectory
    """
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(root, "dataset directory not found")
    scene_file = root / SCENE_FILE
    try:
        script = SceneScript.model_validate_json(scene_file.read_text())
    except FileNotFoundError as e:
        raise DatasetError(scene_file, "missing scene description") from e
    except ValidationError as e:
        raise DatasetError(scene_file, f"invalid scene description ({e.error_count()} errors)") from e
    gt_file = root / GT_TRAJECTORY_FILE
    gt = read_tum_trajectory(gt_file) if gt_file.is_file() else Trajectory()
    logger.info("Opened dataset %s: %s, %d frames", root, script.name, script.n_frames)
    return Dataset(root, script, gt)
