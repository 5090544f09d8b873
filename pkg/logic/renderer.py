"""Ray generation, sampling, SDF-weighted volume rendering and the training objective.

Conventions:
- Observed depth images hold z-depth; rays work in distance along the unit direction.
  ``z_scale`` (the norm of the unnormalized pixel direction) converts one into the other.
- The rendering weight of a sample is the product of two sigmoids of its signed distance.
  Only samples up to ``truncation`` behind the first +/- sign change of s along the ray
  take part in the weighted average; a ray without a sign change renders invalid.
- Pose gradients are taken with respect to a left twist exp(delta) * pose at delta = 0.
  Sample distances stay fixed under the perturbation, so sample points move rigidly.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from logic.diff_core import ParamTree
from logic.geometry import Pose, twist_gradient
from logic.neural_map import NeuralMapParams, field_backward, field_query, smoothness_at
from models.config import SlamConfig
from models.data_models import Frame
from models.exceptions import ContractViolationError, EmptyStaticSetError
from models.scene import Intrinsics

logger = logging.getLogger(__name__)

# Sample points stop this far short of the grid box exit.
_FAR_EPS = 1e-4


# ============================================================================
# Rays
# ============================================================================

@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple[int, int]
    near: float
    far: float


@dataclass
class RayBatch:
    """Structure-of-arrays form of many rays."""

    origins: np.ndarray     # (n, 3)
    directions: np.ndarray  # (n, 3) unit, world frame
    near: np.ndarray        # (n,)
    far: np.ndarray         # (n,)

    def __len__(self) -> int:
        return self.origins.shape[0]


def camera_directions(intrinsics: Intrinsics, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit camera-frame directions of flat pixel indices (v * width + u).

    Returns:
        tuple: (unit directions (n, 3), z_scale (n,) = norm of ((u-cx)/fx, (v-cy)/fy, 1))
    """
    intrinsics.validate_focal()
    pixels = np.asarray(pixels, dtype=np.int64).ravel()
    u = pixels % intrinsics.width
    v = pixels // intrinsics.width
    raw = np.stack(
        [(u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy, np.ones(pixels.size)],
        axis=1,
    )
    scale = np.linalg.norm(raw, axis=1)
    return raw / scale[:, None], scale


def box_exit(origins: np.ndarray, directions: np.ndarray, box_min, box_max) -> np.ndarray:
    """Distance at which rays starting inside the box leave it."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t_hi = np.where(directions > 0, (np.asarray(box_max) - origins) / directions, np.inf)
        t_lo = np.where(directions < 0, (np.asarray(box_min) - origins) / directions, np.inf)
    return np.minimum(t_hi, t_lo).min(axis=1)


def generate_ray(
    pose: Pose,
    intrinsics: Intrinsics,
    pixel: tuple[int, int],
    box: tuple[np.ndarray, np.ndarray] | None = None,
    near: float = 0.05,
    far: float = 10.0,
) -> Ray:
    """Back-project pixel (u, v) through a pinhole camera at ``pose``.

    When ``box`` is given the far clip is where the ray leaves it.
    """
    u, v = pixel
    if not (0 <= u < intrinsics.width and 0 <= v < intrinsics.height):
        raise ContractViolationError(f"pixel {pixel} outside {intrinsics.width}x{intrinsics.height}")
    dirs, _ = camera_directions(intrinsics, np.array([v * intrinsics.width + u]))
    direction = pose.rotation @ dirs[0]
    if box is not None:
        far = float(box_exit(pose.translation[None, :], direction[None, :], *box)[0]) - _FAR_EPS
    return Ray(pose.translation.copy(), direction, (u, v), near, far)


def rays_for_pixels(
    pose: Pose,
    cam_dirs: np.ndarray,
    box: tuple[np.ndarray, np.ndarray],
    near: float,
) -> RayBatch:
    directions = cam_dirs @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, directions.shape).copy()
    far = box_exit(origins, directions, *box) - _FAR_EPS
    near_arr = np.full(len(directions), near)
    if np.any(far <= near_arr):
        raise ContractViolationError("camera too close to the map boundary: near >= far")
    return RayBatch(origins, directions, near_arr, far)


# ============================================================================
# Sampling
# ============================================================================

@dataclass
class RaySamples:
    """Sample distances along each ray, sorted ascending.

    ``active`` is False for padding entries of rays that have no depth-guided samples;
    padding sits at the far clip and takes no part in rendering or losses.
    """

    distances: np.ndarray  # (n, M)
    active: np.ndarray     # (n, M) bool

    def points(self, rays: RayBatch) -> np.ndarray:
        return rays.origins[:, None, :] + self.distances[..., None] * rays.directions[:, None, :]

    def subset(self, idx) -> RaySamples:
        return RaySamples(self.distances[idx], self.active[idx])


def sample_along_ray(
    rays: RayBatch,
    depth: np.ndarray | None,
    n_samples: int,
    n_surface: int,
    truncation: float,
    rng: np.random.Generator | None = None,
) -> RaySamples:
    """Stratified uniform samples in [near, far], plus depth-guided samples in
    [D - tr, D + tr] (clamped) for rays with a valid observed ray distance D.

    With ``rng=None`` the midpoint of every stratum is used (deterministic mode).
    """
    if n_samples < 2:
        raise ContractViolationError("need at least two samples per ray")
    n = len(rays)
    span = (rays.far - rays.near)[:, None]
    offsets = np.full((n, n_samples), 0.5) if rng is None else rng.uniform(size=(n, n_samples))
    uniform = rays.near[:, None] + (np.arange(n_samples)[None, :] + offsets) / n_samples * span

    if depth is None or n_surface == 0:
        return RaySamples(uniform, np.ones_like(uniform, dtype=bool))

    depth = np.asarray(depth, dtype=np.float64).reshape(n)
    has_depth = depth > 0
    lo = np.clip(depth - truncation, rays.near, rays.far)[:, None]
    hi = np.clip(depth + truncation, rays.near, rays.far)[:, None]
    if rng is None:
        frac = (np.arange(n_surface)[None, :] + 0.5) / n_surface
    else:
        frac = rng.uniform(size=(n, n_surface))
    surface = lo + frac * (hi - lo)
    surface = np.where(has_depth[:, None], surface, rays.far[:, None])

    distances = np.concatenate([uniform, surface], axis=1)
    active = np.concatenate(
        [np.ones_like(uniform, dtype=bool), np.broadcast_to(has_depth[:, None], surface.shape)],
        axis=1,
    )
    order = np.argsort(distances, axis=1, kind="stable")
    return RaySamples(
        np.take_along_axis(distances, order, axis=1),
        np.take_along_axis(active, order, axis=1),
    )


# ============================================================================
# Weights and compositing
# ============================================================================

def render_weight(s: np.ndarray, bandwidth: float) -> np.ndarray:
    """w = sigmoid(s / bandwidth) * sigmoid(-s / bandwidth); maximum 0.25 at s = 0."""
    if bandwidth <= 0:
        raise ContractViolationError("render bandwidth must be positive")
    a = np.asarray(s, dtype=np.float64) / bandwidth
    return expit(a) * expit(-a)


def render_weight_grad(s: np.ndarray, bandwidth: float) -> np.ndarray:
    a = np.asarray(s, dtype=np.float64) / bandwidth
    pos, neg = expit(a), expit(-a)
    return pos * neg * (neg - pos) / bandwidth


def surface_mask(sdf: np.ndarray, distances: np.ndarray, active: np.ndarray, truncation: float) -> np.ndarray:
    """Keep samples up to ``truncation`` behind the first +/- sign change of s per ray.

    Rays without a sign change keep nothing.
    """
    s = np.where(active, sdf, np.nan)
    crossing = (s[:, :-1] > 0) & (s[:, 1:] <= 0)
    has_crossing = crossing.any(axis=1)
    first = np.argmax(crossing, axis=1) + 1
    z_min = np.take_along_axis(distances, first[:, None], axis=1)
    keep = active & (distances <= z_min + truncation) & has_crossing[:, None]
    return keep


@dataclass
class PixelRender:
    """Rendered color and ray distance per pixel with the weight sum and validity."""

    color: np.ndarray        # (n, 3)
    depth: np.ndarray        # (n,) ray distance, 0 where invalid
    weight_sum: np.ndarray   # (n,)
    valid: np.ndarray        # (n,) bool
    weights: np.ndarray      # (n, M) masked per-sample weights


def volume_render(
    colors: np.ndarray,
    sdf: np.ndarray,
    distances: np.ndarray,
    bandwidth: float,
    w_min: float = 1e-4,
    keep: np.ndarray | None = None,
) -> PixelRender:
    """Normalized weighted sums of sample colors and distances.

    Args:
        colors: (n, M, 3) sample colors
        sdf: (n, M) sample signed distances
        distances: (n, M) sample distances
        bandwidth: lambda of the two-sigmoid weight
        w_min: validity floor on the weight sum
        keep: (n, M) samples allowed to contribute; all when None
    """
    w = render_weight(sdf, bandwidth)
    if keep is not None:
        w = w * keep
    W = w.sum(axis=1)
    valid = W >= w_min
    safe = np.where(valid, W, 1.0)
    color = np.einsum("nm,nmc->nc", w, colors) / safe[:, None]
    depth = (w * distances).sum(axis=1) / safe
    color = np.where(valid[:, None], color, 0.0)
    depth = np.where(valid, depth, 0.0)
    return PixelRender(color, depth, W, valid, w)


# ============================================================================
# Losses
# ============================================================================

@dataclass
class LossTerms:
    """Unweighted term values and the weighted total of one evaluation."""

    pho: float = 0.0
    geo: float = 0.0
    sdf: float = 0.0
    free: float = 0.0
    smooth: float = 0.0
    total: float = 0.0

    def as_row(self, step: int) -> dict[str, float]:
        return {
            "step": step, "L_pho": self.pho, "L_geo": self.geo, "L_sdf": self.sdf,
            "L_free": self.free, "L_smooth": self.smooth, "L": self.total,
        }

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite([self.pho, self.geo, self.sdf, self.free, self.smooth, self.total])))


def combine_losses(pho: float, geo: float, sdf: float, free: float, smooth: float, config: SlamConfig) -> float:
    """L = L_pho + lambda_geo L_geo + lambda_sdf L_sdf + lambda_free L_free + lambda_smooth L_smooth."""
    return (
        pho
        + config.lambda_geo * geo
        + config.lambda_sdf * sdf
        + config.lambda_free * free
        + config.lambda_smooth * smooth
    )


@dataclass
class PixelLossTerms:
    """Per-pixel loss contributions and their gradients w.r.t. render outputs and samples."""

    pho: np.ndarray          # (n,)
    geo: np.ndarray          # (n,)
    sdf: np.ndarray          # (n,)
    free: np.ndarray         # (n,)
    d_color: np.ndarray      # (n, 3)  d/d rendered color of sum_k lambda_k term_k
    d_depth: np.ndarray      # (n,)    d/d rendered depth
    d_sdf: np.ndarray        # (n, M)  direct d/d sample sdf


def pixel_losses(
    pred: PixelRender,
    obs_color: np.ndarray,
    obs_depth: np.ndarray,
    sdf: np.ndarray,
    distances: np.ndarray,
    active: np.ndarray,
    config: SlamConfig,
) -> PixelLossTerms:
    """Per-pixel photometric, depth, SDF and free-space terms.

    ``obs_depth`` is ray distance, 0 where invalid. Color and depth terms need a valid
    render; SDF and free-space terms need only a valid observed depth. The SDF term averages
    (s - target)^2 over samples within ``truncation`` of the observed surface; the free-space
    term averages (s - truncation)^2 over samples more than ``truncation`` in front of it.
    """
    tr = config.truncation
    n, M = sdf.shape
    obs_valid = obs_depth > 0
    rendered = pred.valid

    color_res = obs_color - pred.color
    pho = np.where(rendered, np.abs(color_res).mean(axis=1), 0.0)
    d_color = np.where(rendered[:, None], -np.sign(color_res) / 3.0, 0.0)

    both = rendered & obs_valid
    depth_res = obs_depth - pred.depth
    geo = np.where(both, np.abs(depth_res), 0.0)
    d_depth = np.where(both, -np.sign(depth_res), 0.0) * config.lambda_geo

    D = obs_depth[:, None]
    band = active & obs_valid[:, None] & (np.abs(D - distances) <= tr)
    if config.sdf_target == "rendered":
        band = band & rendered[:, None]
        target = D - pred.depth[:, None]
    else:
        target = D - distances
    n_band = band.sum(axis=1)
    denom = np.maximum(n_band, 1)[:, None]
    res = np.where(band, sdf - target, 0.0)
    sdf_term = (res * res).sum(axis=1) / denom[:, 0]
    d_sdf = config.lambda_sdf * 2.0 * res / denom
    if config.sdf_target == "rendered":
        d_depth = d_depth + config.lambda_sdf * (2.0 * res / denom).sum(axis=1)

    free_mask = active & obs_valid[:, None] & (distances < D - tr)
    n_free = np.maximum(free_mask.sum(axis=1), 1)[:, None]
    free_res = np.where(free_mask, sdf - tr, 0.0)
    free = (free_res * free_res).sum(axis=1) / n_free[:, 0]
    d_sdf = d_sdf + config.lambda_free * 2.0 * free_res / n_free

    return PixelLossTerms(pho, geo, sdf_term, free, d_color, d_depth, d_sdf)


# ============================================================================
# Batches and the total objective
# ============================================================================

@dataclass
class PixelBatch:
    """Pixels drawn from one or more frames, each tied to a pose key."""

    keys: np.ndarray        # (n,) pose key per pixel (frame index)
    pixels: np.ndarray      # (n,) flat pixel indices
    cam_dirs: np.ndarray    # (n, 3) unit camera-frame directions
    z_scale: np.ndarray     # (n,)
    color: np.ndarray       # (n, 3) observed color
    depth: np.ndarray       # (n,) observed ray distance, 0 = invalid

    def __len__(self) -> int:
        return self.keys.size

    @classmethod
    def from_frames(cls, frames: Mapping[int, Frame], pixels: Mapping[int, np.ndarray]) -> PixelBatch:
        """Gather observations of ``pixels[key]`` from ``frames[key]`` for every key."""
        keys, pix, dirs, scales, colors, depths = [], [], [], [], [], []
        for key in sorted(pixels):
            idx = np.asarray(pixels[key], dtype=np.int64)
            if idx.size == 0:
                continue
            frame = frames[key]
            d, scale = camera_directions(frame.intrinsics, idx)
            keys.append(np.full(idx.size, key, dtype=np.int64))
            pix.append(idx)
            dirs.append(d)
            scales.append(scale)
            colors.append(frame.color.reshape(-1, 3)[idx])
            depths.append(frame.depth.reshape(-1)[idx] * scale)
        if not keys:
            raise EmptyStaticSetError("pixel batch is empty")
        return cls(
            np.concatenate(keys), np.concatenate(pix), np.concatenate(dirs),
            np.concatenate(scales), np.concatenate(colors), np.concatenate(depths),
        )


def batch_rays(batch: PixelBatch, poses: Mapping[int, Pose], params: NeuralMapParams, near: float) -> RayBatch:
    origins = np.empty((len(batch), 3))
    directions = np.empty((len(batch), 3))
    for key in np.unique(batch.keys):
        sel = batch.keys == key
        pose = poses[int(key)]
        directions[sel] = batch.cam_dirs[sel] @ pose.rotation.T
        origins[sel] = pose.translation
    far = box_exit(origins, directions, params.box_min, params.box_max) - _FAR_EPS
    if np.any(far <= near):
        raise ContractViolationError("camera too close to the map boundary: near >= far")
    return RayBatch(origins, directions, np.full(len(batch), near), far)


def draw_samples(
    batch: PixelBatch,
    poses: Mapping[int, Pose],
    params: NeuralMapParams,
    config: SlamConfig,
    rng: np.random.Generator | None,
) -> RaySamples:
    rays = batch_rays(batch, poses, params, config.near)
    return sample_along_ray(rays, batch.depth, config.n_samples, config.n_surface_samples, config.truncation, rng)


@dataclass
class LossResult:
    terms: LossTerms
    map_grads: ParamTree
    pose_grads: dict[int, np.ndarray]
    n_valid: int


def total_loss(
    batch: PixelBatch,
    samples: RaySamples,
    params: NeuralMapParams,
    poses: Mapping[int, Pose],
    config: SlamConfig,
    smooth_vertices: list[np.ndarray] | None = None,
    map_grads: bool = True,
    pose_keys: set[int] | None = None,
) -> LossResult:
    """Weighted five-term objective over a pixel batch with gradients.

    Term values are means over the batch. Rays are processed in chunks of
    ``config.chunk_size`` in a fixed order.

    Args:
        batch: pixels and observations
        samples: sample distances per pixel (kept fixed for the evaluation)
        params: map parameters
        poses: camera-to-world pose per batch key
        smooth_vertices: lattice vertices for the smoothness term; skipped when None
        map_grads: whether to compute map parameter gradients
        pose_keys: keys whose twist gradient is returned; all batch keys when None

    Raises:
        EmptyStaticSetError: empty batch
    """
    n = len(batch)
    if n == 0:
        raise EmptyStaticSetError("total_loss needs a nonempty pixel batch")
    rays = batch_rays(batch, poses, params, config.near)
    keys_out = set(int(k) for k in np.unique(batch.keys)) if pose_keys is None else set(pose_keys)

    sums = np.zeros(4)
    grads: ParamTree = {k: np.zeros_like(v) for k, v in params.tree.items()} if map_grads else {}
    pose_grads = {k: np.zeros(6) for k in keys_out}
    n_valid = 0
    chunk = config.chunk_size
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        rays_c = RayBatch(rays.origins[sl], rays.directions[sl], rays.near[sl], rays.far[sl])
        samp_c = samples.subset(sl)
        points = samp_c.points(rays_c)
        m, M = samp_c.distances.shape
        query = field_query(params, points.reshape(-1, 3))
        colors = query.color.reshape(m, M, 3)
        sdf = query.sdf.reshape(m, M)
        keep = surface_mask(sdf, samp_c.distances, samp_c.active, config.truncation)
        pred = volume_render(colors, sdf, samp_c.distances, config.render_bandwidth, config.w_min, keep)
        terms = pixel_losses(pred, batch.color[sl], batch.depth[sl], sdf, samp_c.distances, samp_c.active, config)
        sums += [terms.pho.sum(), terms.geo.sum(), terms.sdf.sum(), terms.free.sum()]
        n_valid += int(pred.valid.sum())

        safe_W = np.where(pred.valid, pred.weight_sum, 1.0)
        d_colors = pred.weights[..., None] * terms.d_color[:, None, :] / safe_W[:, None, None]
        d_w = (
            np.einsum("nc,nmc->nm", terms.d_color, colors - pred.color[:, None, :])
            + terms.d_depth[:, None] * (samp_c.distances - pred.depth[:, None])
        ) / safe_W[:, None]
        d_w = np.where(pred.valid[:, None], d_w, 0.0)
        d_sdf = terms.d_sdf + d_w * keep * render_weight_grad(sdf, config.render_bandwidth)

        chunk_grads, d_points = field_backward(
            params, query.cache, d_colors.reshape(-1, 3) / n, d_sdf.reshape(-1) / n, map_grads
        )
        for key, g in chunk_grads.items():
            grads[key] += g
        d_points = d_points.reshape(m, M, 3)
        keys_c = batch.keys[sl]
        for key in keys_out:
            sel = keys_c == key
            if sel.any():
                pose_grads[key] += twist_gradient(points[sel], d_points[sel])

    pho, geo, sdf_v, free = (sums / n).tolist()
    smooth = 0.0
    if smooth_vertices is not None:
        smooth, smooth_grads = smoothness_at(params, smooth_vertices)
        if map_grads:
            for key, g in smooth_grads.items():
                grads[key] += config.lambda_smooth * g
    total = combine_losses(pho, geo, sdf_v, free, smooth, config)
    return LossResult(LossTerms(pho, geo, sdf_v, free, smooth, total), grads, pose_grads, n_valid)


# ============================================================================
# Full-image rendering
# ============================================================================

@dataclass
class RenderedImage:
    color: np.ndarray   # (H, W, 3)
    depth: np.ndarray   # (H, W) z-depth, 0 where invalid
    valid: np.ndarray   # (H, W) bool
    stats: dict[str, float] = field(default_factory=dict)


def render_pixels(
    params: NeuralMapParams,
    pose: Pose,
    intrinsics: Intrinsics,
    pixels: np.ndarray,
    config: SlamConfig,
    n_samples: int | None = None,
    depth_guide: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render selected pixels with deterministic midpoint sampling.

    Args:
        depth_guide: optional observed z-depth per pixel for depth-guided samples

    Returns:
        tuple: (color (n, 3), z-depth (n,), valid (n,))
    """
    n_samples = n_samples or config.n_samples
    cam_dirs, z_scale = camera_directions(intrinsics, pixels)
    rays = rays_for_pixels(pose, cam_dirs, (params.box_min, params.box_max), config.near)
    guide = None if depth_guide is None else np.asarray(depth_guide).ravel() * z_scale
    n_surface = 0 if guide is None else config.n_surface_samples
    samples = sample_along_ray(rays, guide, n_samples, n_surface, config.truncation, rng=None)

    n = len(rays)
    color = np.zeros((n, 3))
    depth = np.zeros(n)
    valid = np.zeros(n, dtype=bool)
    for start in range(0, n, config.chunk_size):
        sl = slice(start, min(start + config.chunk_size, n))
        rays_c = RayBatch(rays.origins[sl], rays.directions[sl], rays.near[sl], rays.far[sl])
        samp_c = samples.subset(sl)
        m, M = samp_c.distances.shape
        query = field_query(params, samp_c.points(rays_c).reshape(-1, 3))
        sdf = query.sdf.reshape(m, M)
        keep = surface_mask(sdf, samp_c.distances, samp_c.active, config.truncation)
        pred = volume_render(query.color.reshape(m, M, 3), sdf, samp_c.distances,
                             config.render_bandwidth, config.w_min, keep)
        color[sl], depth[sl], valid[sl] = pred.color, pred.depth, pred.valid
    return color, np.where(valid, depth / z_scale, 0.0), valid


def render_image(
    params: NeuralMapParams,
    pose: Pose,
    intrinsics: Intrinsics,
    config: SlamConfig,
    n_samples: int | None = None,
    depth_guide: np.ndarray | None = None,
) -> RenderedImage:
    """Render a full color and z-depth image from ``pose``."""
    H, W = intrinsics.height, intrinsics.width
    pixels = np.arange(H * W)
    color, depth, valid = render_pixels(params, pose, intrinsics, pixels, config, n_samples, depth_guide)
    image = RenderedImage(color.reshape(H, W, 3), depth.reshape(H, W), valid.reshape(H, W))
    image.stats["valid_fraction"] = float(valid.mean())
    logger.debug("Rendered %dx%d image, %.1f%% valid", W, H, 100 * image.stats["valid_fraction"])
    return image
