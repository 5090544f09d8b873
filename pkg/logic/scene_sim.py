"""Synthetic dynamic RGB-D world.

Renders scripted rigid primitives inside a box room by exact ray casting and plays the part
of the instance segmenter and visual encoder: it reports per-pixel instance ids and one
embedding per visible instance. Depth images hold z-depth along the optical axis (0 where no
geometry is hit), as RGB-D sensors do.

Key properties:
1. Deterministic: a script and its seed fully determine every frame.
2. Stateless per frame: frames can be rendered in any order or in parallel.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field

import numpy as np

from logic.geometry import Pose, interpolate_pose
from models.data_models import Frame, InstanceObservation
from models.scene import Intrinsics, Keypose, ObjectSpec, SceneScript

logger = logging.getLogger(__name__)

# Category directions occupy the first basis columns of the embedding space; the rest hold
# one instance direction per object id.
CATEGORIES = ("person", "box", "furniture", "balloon")
CATEGORY_WEIGHT = 1.0
INSTANCE_WEIGHT = 1.5


# ============================================================================
# Embedding oracle
# ============================================================================

def _category_index(category: str, n_categories: int) -> int:
    if category in CATEGORIES[:n_categories]:
        return CATEGORIES.index(category)
    return zlib.crc32(category.encode()) % n_categories


@dataclass
class EmbeddingNoiseModel:
    """Per-instance unit embeddings with controllable view-to-view noise.

    The base vector of an instance mixes its category direction with an instance direction
    orthogonal to every category and to the other instance directions, so two distinct ids
    have cosine similarity 1/3.25 (same category) or 0 (different categories) as long as
    there are at most ``dim - n_categories`` ids.
    """

    seed: int
    dim: int = 16
    sigma: float = 0.0
    renormalize: bool = True
    categories: dict[int, str] = field(default_factory=dict)
    encoder_seed: int = 0

    def __post_init__(self):
        if self.sigma < 0 or not np.isfinite(self.sigma):
            raise ValueError("embedding noise sigma must be finite and >= 0")
        rng = np.random.default_rng([self.encoder_seed, 0x5EED])
        q, r = np.linalg.qr(rng.normal(size=(self.dim, self.dim)))
        self._basis = q * np.sign(np.diag(r))
        self._n_categories = min(len(CATEGORIES), self.dim // 2)

    @property
    def n_categories(self) -> int:
        return self._n_categories

    def category_vector(self, category: str) -> np.ndarray:
        return self._basis[:, _category_index(category, self._n_categories)].copy()

    def instance_vector(self, instance_id: int) -> np.ndarray:
        n_inst = self.dim - self._n_categories
        return self._basis[:, self._n_categories + (instance_id - 1) % n_inst].copy()

    def base(self, instance_id: int, category: str | None = None) -> np.ndarray:
        category = category or self.categories.get(instance_id, "box")
        z = CATEGORY_WEIGHT * self.category_vector(category) + INSTANCE_WEIGHT * self.instance_vector(
            instance_id
        )
        return z / np.linalg.norm(z)

    def random_instance_direction(self, rng: np.random.Generator) -> np.ndarray:
        """Random unit vector in the instance subspace (used for prior augmentation)."""
        coeffs = rng.normal(size=self.dim - self._n_categories)
        v = self._basis[:, self._n_categories:] @ coeffs
        return v / np.linalg.norm(v)


def make_embedding(model: EmbeddingNoiseModel, instance_id: int, t: int) -> np.ndarray:
    """Embedding of an instance observed at frame t: base + Gaussian noise, re-normalized.

    Deterministic in (seed, id, t).
    """
    z = model.base(instance_id)
    if model.sigma > 0:
        rng = np.random.default_rng([model.seed, instance_id, t, 7919])
        z = z + model.sigma * rng.normal(size=model.dim)
    if model.renormalize:
        z = z / np.linalg.norm(z)
    return z


def noise_model_for(script: SceneScript) -> EmbeddingNoiseModel:
    return EmbeddingNoiseModel(
        seed=script.seed,
        dim=script.embedding_dim,
        sigma=script.embedding_noise,
        categories={o.id: o.category for o in script.objects},
        encoder_seed=script.encoder_seed,
    )


# ============================================================================
# Trajectories
# ============================================================================

def _keypose_to_pose(k: Keypose) -> Pose:
    return Pose(np.asarray(k.quat), np.asarray(k.translation))


def interpolate_keyposes(keyposes: list[Keypose], t: float) -> Pose:
    """Piecewise-linear translation / slerp rotation, clamped outside the keypose span."""
    if t <= keyposes[0].t:
        return _keypose_to_pose(keyposes[0])
    if t >= keyposes[-1].t:
        return _keypose_to_pose(keyposes[-1])
    times = np.array([k.t for k in keyposes])
    i = int(np.searchsorted(times, t, side="right")) - 1
    a, b = keyposes[i], keyposes[i + 1]
    alpha = (t - a.t) / (b.t - a.t)
    return interpolate_pose(_keypose_to_pose(a), _keypose_to_pose(b), alpha)


def camera_pose(script: SceneScript, t: float) -> Pose:
    """Ground-truth camera-to-world pose at frame time t."""
    return interpolate_keyposes(script.camera, t)


def object_center(obj: ObjectSpec, t: float) -> np.ndarray:
    return interpolate_keyposes(obj.track, t).translation


# ============================================================================
# Ray casting
# ============================================================================

def pixel_directions(intrinsics: Intrinsics) -> np.ndarray:
    """Unnormalized camera-frame directions ((u - cx)/fx, (v - cy)/fy, 1), shape (H*W, 3)."""
    intrinsics.validate_focal()
    v, u = np.mgrid[0:intrinsics.height, 0:intrinsics.width]
    d = np.stack(
        [
            (u.ravel() - intrinsics.cx) / intrinsics.fx,
            (v.ravel() - intrinsics.cy) / intrinsics.fy,
            np.ones(u.size),
        ],
        axis=1,
    )
    return d


def _intersect_room(origin, dirs, lo, hi):
    """Exit distance of rays starting inside the room, plus the wall index hit."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t_hi = np.where(dirs > 0, (hi - origin) / dirs, np.inf)
        t_lo = np.where(dirs < 0, (lo - origin) / dirs, np.inf)
    t_axis = np.minimum(t_hi, t_lo)
    axis = np.argmin(t_axis, axis=1)
    rows = np.arange(dirs.shape[0])
    dist = t_axis[rows, axis]
    positive = dirs[rows, axis] > 0
    wall = axis * 2 + positive.astype(np.int64)
    normals = np.zeros_like(dirs)
    normals[rows, axis] = np.where(positive, -1.0, 1.0)
    return dist, wall, normals


def _intersect_box(origin, dirs, center, half):
    lo = center - half
    hi = center + half
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / dirs
        t2 = (hi - origin) / dirs
    t_min = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    t_max = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
    t_near = t_min.max(axis=1)
    t_far = t_max.min(axis=1)
    hit = (t_near <= t_far) & (t_near > 1e-9)
    dist = np.where(hit, t_near, np.inf)
    axis = np.argmax(t_min, axis=1)
    rows = np.arange(dirs.shape[0])
    normals = np.zeros_like(dirs)
    normals[rows, axis] = -np.sign(dirs[rows, axis])
    return dist, normals


def _intersect_sphere(origin, dirs, center, radius):
    oc = origin - center
    b = dirs @ oc
    c = oc @ oc - radius * radius
    disc = b * b - c
    root = np.sqrt(np.maximum(disc, 0.0))
    t = -b - root
    hit = (disc >= 0) & (t > 1e-9)
    dist = np.where(hit, t, np.inf)
    points = origin + dirs * np.where(hit, t, 0.0)[:, None]
    normals = (points - center) / radius
    return dist, normals


def cast_rays(
    script: SceneScript,
    t: int,
    origin: np.ndarray,
    dirs: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Nearest hit per ray among the room walls and every object alive at frame t.

    Args:
        dirs: (n, 3) unit world directions

    Returns:
        tuple: (distance, instance id (0 = room), surface normal, base color)
    """
    lo = np.asarray(script.room.box_min, dtype=np.float64)
    hi = np.asarray(script.room.box_max, dtype=np.float64)
    dist, wall, normals = _intersect_room(origin, dirs, lo, hi)
    ids = np.zeros(dirs.shape[0], dtype=np.uint32)
    colors = np.asarray(script.room.wall_colors, dtype=np.float64)[wall]

    for obj in script.objects:
        if not obj.exists_at(t):
            continue
        center = object_center(obj, t)
        if obj.shape == "box":
            d_obj, n_obj = _intersect_box(origin, dirs, center, np.asarray(obj.half_extents()))
        else:
            d_obj, n_obj = _intersect_sphere(origin, dirs, center, obj.size[0])
        closer = d_obj < dist
        dist = np.where(closer, d_obj, dist)
        ids = np.where(closer, np.uint32(obj.id), ids)
        normals = np.where(closer[:, None], n_obj, normals)
        colors = np.where(closer[:, None], np.asarray(obj.color, dtype=np.float64), colors)
    return dist, ids, normals, colors


def render_ground_truth(script: SceneScript, t: int) -> Frame:
    """Render frame t of a script: color, z-depth, instance ids and instance observations.

    Raises:
        ConfigurationError: degenerate intrinsics
        ValueError: t outside [0, n_frames)
    """
    if not 0 <= t < script.n_frames:
        raise ValueError(f"frame {t} outside [0, {script.n_frames})")
    K = script.intrinsics
    raw = pixel_directions(K)
    scale = np.linalg.norm(raw, axis=1)
    pose = camera_pose(script, t)
    dirs = (raw / scale[:, None]) @ pose.rotation.T
    dist, ids, normals, colors = cast_rays(script, t, pose.translation, dirs)

    light = np.asarray(script.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    lambert = np.clip(normals @ light, 0.0, None)
    shade = script.ambient + (1.0 - script.ambient) * lambert
    color = np.clip(colors * shade[:, None], 0.0, 1.0)

    depth = np.where(np.isfinite(dist), dist / scale, 0.0)
    if script.depth_noise > 0:
        rng = np.random.default_rng([script.seed, t, 104729])
        noisy = depth + script.depth_noise * rng.normal(size=depth.shape)
        depth = np.where(depth > 0, np.maximum(noisy, 1e-3), 0.0)

    H, W = K.height, K.width
    id_image = ids.reshape(H, W)
    model = noise_model_for(script)
    observations = []
    for instance_id in np.unique(ids):
        if instance_id == 0:
            continue
        obj = script.object_by_id(int(instance_id))
        observations.append(InstanceObservation(
            instance_id=int(instance_id),
            pixels=np.flatnonzero(ids == instance_id),
            embedding=make_embedding(model, int(instance_id), t),
            center=object_center(obj, t),
        ))
    return Frame(
        t=t,
        color=color.reshape(H, W, 3),
        depth=depth.reshape(H, W),
        intrinsics=K,
        instance_ids=id_image,
        observations=observations,
        gt_pose=pose,
    )


def moving_object_ids(script: SceneScript, t: int, window: int = 1) -> set[int]:
    """Ids of objects whose position changes within [t - window, t + window] or that
    appear/vanish in that window (ground truth for mask checks)."""
    moving = set()
    for obj in script.objects:
        if not obj.exists_at(t):
            continue
        lo_t, hi_t = max(0, t - window), min(script.n_frames - 1, t + window)
        if np.linalg.norm(object_center(obj, hi_t) - object_center(obj, lo_t)) > 1e-6:
            moving.add(obj.id)
    return moving
