"""Trajectory and map quality metrics."""

from __future__ import annotations

import logging
from collections.abc import Iterable

import numpy as np
import pandas as pd

from logic.classifier import ClassifierState, is_dynamic
from logic.neural_map import NeuralMapParams
from logic.renderer import render_image, render_pixels
from logic.scene_sim import camera_pose, cast_rays, pixel_directions, render_ground_truth
from models.config import SlamConfig
from models.data_models import Frame, Trajectory
from models.exceptions import InsufficientDataError
from models.reports import RenderErrorStats
from models.scene import SceneScript

logger = logging.getLogger(__name__)


# ============================================================================
# Absolute trajectory error
# ============================================================================

def associate(est: Trajectory, gt: Trajectory) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Positions of the frames present in both trajectories.

    Returns:
        tuple: (frame indices, est positions (n, 3), gt positions (n, 3))
    """
    est_map, gt_map = est.as_dict(), gt.as_dict()
    frames = np.array(sorted(set(est_map) & set(gt_map)), dtype=np.int64)
    est_xyz = np.array([est_map[t].translation for t in frames]).reshape(-1, 3)
    gt_xyz = np.array([gt_map[t].translation for t in frames]).reshape(-1, 3)
    return frames, est_xyz, gt_xyz


def align_rigid(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation R and translation t minimizing sum ||target_i - (R source_i + t)||^2.

    Closed-form SVD solution with the reflection case excluded (unit scale).
    """
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    W = (target - mu_t).T @ (source - mu_s)
    U, _, Vt = np.linalg.svd(W)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return R, mu_t - R @ mu_s


def ate_errors(est: Trajectory, gt: Trajectory) -> dict[int, float]:
    """Per-frame translational residuals after rigid alignment of est onto gt.

    Raises:
        InsufficientDataError: fewer than 3 common frames
    """
    frames, est_xyz, gt_xyz = associate(est, gt)
    if frames.size < 3:
        raise InsufficientDataError(f"ATE needs at least 3 common frames, found {frames.size}")
    R, t = align_rigid(est_xyz, gt_xyz)
    residual = gt_xyz - (est_xyz @ R.T + t)
    return dict(zip(frames.tolist(), np.linalg.norm(residual, axis=1).tolist()))


def ate_rms(est: Trajectory, gt: Trajectory) -> float:
    """Root-mean-square absolute trajectory error (meters) after rigid alignment."""
    errors = np.fromiter(ate_errors(est, gt).values(), dtype=np.float64)
    return float(np.sqrt(np.mean(errors**2)))


# ============================================================================
# Map quality
# ============================================================================

def _percentiles(values: np.ndarray) -> tuple[float, float, float]:
    s = pd.Series(values)
    return float(s.mean()), float(s.median()), float(s.quantile(0.95))


def render_error_stats(
    depth_err: np.ndarray,
    color_err: np.ndarray,
    n_pixels: int,
) -> RenderErrorStats:
    if n_pixels == 0 or depth_err.size == 0:
        return RenderErrorStats(n_pixels=n_pixels, coverage=0.0, no_surface=True)
    d_mean, d_med, d_p95 = _percentiles(depth_err)
    c_mean, c_med, c_p95 = _percentiles(color_err)
    return RenderErrorStats(
        n_pixels=n_pixels,
        coverage=depth_err.size / n_pixels,
        no_surface=False,
        depth_mean=d_mean, depth_median=d_med, depth_p95=d_p95,
        color_mean=c_mean, color_median=c_med, color_p95=c_p95,
    )


def _dynamic_ids(frame: Frame, classifier: ClassifierState | None, exclude: set[int]) -> set[int]:
    ids = set(exclude)
    if classifier is not None:
        for obs in frame.observations:
            pos = obs.center if classifier.position_mode else None
            if is_dynamic(classifier, obs.embedding, pos):
                ids.add(obs.instance_id)
    return ids


def map_render_error(
    params: NeuralMapParams,
    script: SceneScript,
    probe_frames: Iterable[int],
    config: SlamConfig,
    classifier: ClassifierState | None = None,
    exclude: set[int] | None = None,
) -> RenderErrorStats:
    """Render the map at ground-truth camera poses and compare with the simulator.

    Pixels of instances the classifier labels dynamic (and of ``exclude`` ids) are left
    out, as are pixels without ground-truth depth. Pixels that render no surface reduce
    ``coverage`` but do not enter the error statistics.
    """
    exclude = exclude or set()
    depth_errs, color_errs = [], []
    n_pixels = 0
    for t in probe_frames:
        gt = render_ground_truth(script, t)
        dynamic = _dynamic_ids(gt, classifier, exclude)
        keep = (gt.depth > 0) & ~np.isin(gt.instance_ids, list(dynamic))
        n_pixels += int(keep.sum())
        image = render_image(params, gt.gt_pose, script.intrinsics, config, n_samples=config.probe_samples)
        ok = keep & image.valid
        depth_errs.append(np.abs(image.depth[ok] - gt.depth[ok]))
        color_errs.append(np.abs(image.color[ok] - gt.color[ok]).mean(axis=-1))
    stats = render_error_stats(
        np.concatenate(depth_errs) if depth_errs else np.zeros(0),
        np.concatenate(color_errs) if color_errs else np.zeros(0),
        n_pixels,
    )
    if stats.no_surface:
        logger.warning("Map renders no surface at the probe poses")
    return stats


def ground_truth_depth(script: SceneScript, t_scene: int, t_camera: int, pixels: np.ndarray) -> np.ndarray:
    """Z-depth of the scene state at ``t_scene`` seen from the camera of ``t_camera``."""
    pose = camera_pose(script, t_camera)
    raw = pixel_directions(script.intrinsics)[pixels]
    scale = np.linalg.norm(raw, axis=1)
    dist, _, _, _ = cast_rays(script, t_scene, pose.translation, (raw / scale[:, None]) @ pose.rotation.T)
    return np.where(np.isfinite(dist), dist / scale, 0.0)


def object_region_error(
    params: NeuralMapParams,
    script: SceneScript,
    t: int,
    object_id: int,
    config: SlamConfig,
    include_object: bool,
    silhouette_frame: int | None = None,
) -> float:
    """Median depth error of the map inside one object's silhouette.

    The silhouette is the object's pixel set in frame ``silhouette_frame`` (default ``t``),
    viewed from that frame's camera. The target is the ground truth of the scene state at
    frame ``t`` with (``include_object``) or without the object. Pixels the map renders
    invalid count with an error equal to their target depth.

    Raises:
        InsufficientDataError: the object covers no pixel of the silhouette frame
    """
    t_sil = t if silhouette_frame is None else silhouette_frame
    ids = render_ground_truth(script, t_sil).instance_ids.ravel()
    pixels = np.flatnonzero(ids == object_id)
    if pixels.size == 0:
        raise InsufficientDataError(f"object {object_id} is not visible in frame {t_sil}")

    target_script = script
    if not include_object:
        target_script = script.model_copy(update={"objects": [o for o in script.objects if o.id != object_id]})
    target = ground_truth_depth(target_script, t, t_sil, pixels)
    _, depth, valid = render_pixels(params, camera_pose(script, t_sil), script.intrinsics, pixels, config,
                                    n_samples=config.probe_samples)
    err = np.where(valid, np.abs(depth - target), target)[target > 0]
    return float(np.median(err)) if err.size else float("inf")


def dynamic_mask_iou(static: np.ndarray, frame: Frame, object_ids: set[int]) -> float:
    """IoU between the pixels a mask marks dynamic and the pixels of ``object_ids``."""
    predicted = ~np.asarray(static, dtype=bool)
    truth = np.isin(frame.instance_ids, list(object_ids))
    union = np.count_nonzero(predicted | truth)
    if union == 0:
        return 1.0
    return float(np.count_nonzero(predicted & truth) / union)
