"""The continually learned map f(x) -> (color, signed distance).

A multi-resolution stack of dense feature grids is interpolated at the query point and,
together with a one-blob coordinate encoding, fed to a geometry decoder that outputs the
signed distance s (meters) and a geometry feature h. A color decoder maps (h, encoding) to
RGB through a sigmoid.

All learnable arrays live in one flat parameter tree so that the optimizer, checkpoints and
gradient checks treat them uniformly:

    grid{level}           (r, r, r, F) lattice values
    geo.W{i}, geo.b{i}    geometry decoder
    col.W{i}, col.b{i}    color decoder
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from logic.diff_core import (
    FeatureGrid,
    GridSample,
    MlpCache,
    MlpParams,
    ParamTree,
    grid_backward,
    grid_interpolate,
    mlp_backward,
    mlp_forward,
)
from models.config import SlamConfig
from models.exceptions import ContractViolationError

logger = logging.getLogger(__name__)

GEO_ACTIVATIONS = ["relu", "relu", "none"]
COLOR_ACTIVATIONS = ["relu", "relu", "sigmoid"]
GRID_INIT_SCALE = 1e-4


# ============================================================================
# Coordinate encoding
# ============================================================================

@dataclass(frozen=True)
class CoordinateEncoding:
    """Per-axis one-blob encoding: B Gaussian bumps over the normalized coordinate.

    Bin centers sit at (b + 0.5) / B with standard deviation 1 / B, so the encoding is a
    smooth deterministic function of position. Output layout is axis-major: x bins, then y,
    then z.
    """

    box_min: np.ndarray
    box_max: np.ndarray
    bins: int = 8

    @property
    def width(self) -> int:
        return 3 * self.bins

    def encode(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Encode (n, 3) points.

        Returns:
            tuple: (encoding (n, 3B), per-axis derivative d enc / d x_axis, shape (n, 3, B))
        """
        extent = np.asarray(self.box_max) - np.asarray(self.box_min)
        u = (points - np.asarray(self.box_min)) / extent  # (n, 3)
        centers = (np.arange(self.bins) + 0.5) / self.bins
        sigma = 1.0 / self.bins
        diff = u[:, :, None] - centers[None, None, :]  # (n, 3, B)
        value = np.exp(-0.5 * (diff / sigma) ** 2)
        d_value = value * (-diff / sigma**2) / extent[None, :, None]
        return value.reshape(points.shape[0], -1), d_value


# ============================================================================
# Parameters
# ============================================================================

@dataclass
class NeuralMapParams:
    """Encoder grids and decoder weights of the map, plus the fixed architecture."""

    tree: ParamTree
    box_min: np.ndarray
    box_max: np.ndarray
    resolutions: list[int]
    n_features: int
    blob_bins: int
    geo_feature_dim: int
    geo_activations: list[str] = field(default_factory=lambda: list(GEO_ACTIVATIONS))
    color_activations: list[str] = field(default_factory=lambda: list(COLOR_ACTIVATIONS))

    @property
    def grid_keys(self) -> list[str]:
        return [f"grid{level}" for level in range(len(self.resolutions))]

    @property
    def decoder_keys(self) -> list[str]:
        return sorted(k for k in self.tree if not k.startswith("grid"))

    @property
    def encoding(self) -> CoordinateEncoding:
        return CoordinateEncoding(self.box_min, self.box_max, self.blob_bins)

    def grid(self, level: int) -> FeatureGrid:
        return FeatureGrid(self.tree[f"grid{level}"], self.box_min, self.box_max)

    def geo_mlp(self) -> MlpParams:
        return MlpParams.from_tree(self.tree, "geo", self.geo_activations)

    def color_mlp(self) -> MlpParams:
        return MlpParams.from_tree(self.tree, "col", self.color_activations)

    def with_tree(self, tree: ParamTree) -> NeuralMapParams:
        return replace(self, tree=dict(tree))

    def copy(self) -> NeuralMapParams:
        return self.with_tree({k: v.copy() for k, v in self.tree.items()})

    def n_params(self) -> int:
        return int(sum(v.size for v in self.tree.values()))

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points).reshape(-1, 3)
        return np.all((pts >= self.box_min) & (pts <= self.box_max), axis=1)


def map_box(room_min, room_max, margin: float) -> tuple[np.ndarray, np.ndarray]:
    """Grid bounding box: the room grown by ``margin`` on every side."""
    return (
        np.asarray(room_min, dtype=np.float64) - margin,
        np.asarray(room_max, dtype=np.float64) + margin,
    )


def initialize_map(
    config: SlamConfig,
    room_min,
    room_max,
    rng: np.random.Generator,
) -> NeuralMapParams:
    """Fresh map parameters.

    Hidden layers are He-uniform; the geometry output layer is zero with bias
    (truncation, 0, ...), so every query starts at s = truncation ("free space"); the color
    output bias is 0 (mid gray after the sigmoid). Grid features start with small random
    values.
    """
    box_min, box_max = map_box(room_min, room_max, config.grid_margin)
    F = config.grid_features
    tree: ParamTree = {}
    for level, r in enumerate(config.grid_resolutions):
        tree[f"grid{level}"] = rng.uniform(-GRID_INIT_SCALE, GRID_INIT_SCALE, size=(r, r, r, F))

    enc_width = 3 * config.blob_bins
    geo_in = F * len(config.grid_resolutions) + enc_width
    geo = MlpParams.initialize(
        [geo_in, config.geo_hidden, config.geo_hidden, 1 + config.geo_feature_dim],
        GEO_ACTIVATIONS,
        rng,
    )
    geo.weights[-1] = np.zeros_like(geo.weights[-1])
    geo.biases[-1] = np.zeros_like(geo.biases[-1])
    geo.biases[-1][0] = config.truncation
    col = MlpParams.initialize(
        [config.geo_feature_dim + enc_width, config.color_hidden, config.color_hidden, 3],
        COLOR_ACTIVATIONS,
        rng,
    )
    col.biases[-1] = np.zeros(3)
    tree.update(geo.to_tree("geo"))
    tree.update(col.to_tree("col"))

    params = NeuralMapParams(
        tree=tree,
        box_min=box_min,
        box_max=box_max,
        resolutions=list(config.grid_resolutions),
        n_features=F,
        blob_bins=config.blob_bins,
        geo_feature_dim=config.geo_feature_dim,
    )
    logger.info(
        "Initialized map: %d grid levels %s, %d parameters",
        len(params.resolutions), params.resolutions, params.n_params(),
    )
    return params


# ============================================================================
# Field query
# ============================================================================

@dataclass
class FieldCache:
    points: np.ndarray
    grid_samples: list[GridSample]
    d_encoding: np.ndarray
    geo_cache: MlpCache
    color_cache: MlpCache


@dataclass
class FieldQuery:
    color: np.ndarray   # (n, 3) in [0, 1]
    sdf: np.ndarray     # (n,) meters
    cache: FieldCache


def field_query(params: NeuralMapParams, points: np.ndarray) -> FieldQuery:
    """Evaluate f(x) -> (c, s) at (n, 3) world points.

    Raises:
        OutOfDomainError: a point lies outside the grid box
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    samples = [grid_interpolate(params.grid(level), pts) for level in range(len(params.resolutions))]
    enc, d_enc = params.encoding.encode(pts)
    geo_in = np.concatenate([s.features for s in samples] + [enc], axis=1)
    geo_out, geo_cache = mlp_forward(params.geo_mlp(), geo_in)
    sdf = geo_out[:, 0]
    h = geo_out[:, 1:]
    color, color_cache = mlp_forward(params.color_mlp(), np.concatenate([h, enc], axis=1))
    return FieldQuery(color, sdf, FieldCache(pts, samples, d_enc, geo_cache, color_cache))


def field_backward(
    params: NeuralMapParams,
    cache: FieldCache,
    d_color: np.ndarray,
    d_sdf: np.ndarray,
    map_grads: bool = True,
) -> tuple[ParamTree, np.ndarray]:
    """Back-propagate d loss / d (c, s) to the parameters and the query points.

    Returns:
        tuple: (gradient tree, empty when ``map_grads`` is False; d loss / d points (n, 3))
    """
    n = cache.points.shape[0]
    d_color = np.asarray(d_color, dtype=np.float64).reshape(n, 3)
    d_sdf = np.asarray(d_sdf, dtype=np.float64).reshape(n)
    h_width = params.geo_feature_dim

    d_col_params, d_col_in = mlp_backward(cache.color_cache, d_color)
    d_h = d_col_in[:, :h_width]
    d_enc = d_col_in[:, h_width:].copy()

    d_geo_out = np.concatenate([d_sdf[:, None], d_h], axis=1)
    d_geo_params, d_geo_in = mlp_backward(cache.geo_cache, d_geo_out)
    F = params.n_features
    n_levels = len(params.resolutions)
    d_enc += d_geo_in[:, F * n_levels:]

    d_points = np.einsum("nab,nab->na", d_enc.reshape(n, 3, -1), cache.d_encoding)
    grads: ParamTree = {}
    for level, sample in enumerate(cache.grid_samples):
        d_feat = d_geo_in[:, level * F:(level + 1) * F]
        d_points += np.einsum("nf,nfd->nd", d_feat, sample.d_point)
        if map_grads:
            grads[f"grid{level}"] = grid_backward(params.grid(level), sample, d_feat)
    if map_grads:
        grads.update(d_geo_params.to_tree("geo"))
        grads.update(d_col_params.to_tree("col"))
    return grads, d_points


# ============================================================================
# Smoothness regularizer
# ============================================================================

def draw_smooth_vertices(
    params: NeuralMapParams,
    n_samples: int,
    rng: np.random.Generator,
    region: tuple[np.ndarray, np.ndarray] | None = None,
) -> list[np.ndarray]:
    """Sample lattice vertices p (per level) whose +1 neighbors exist on every axis.

    Returns:
        list: one (n_samples, 3) integer index array per level
    """
    if n_samples <= 0:
        raise ContractViolationError("smoothness needs n_samples > 0")
    out = []
    for level, r in enumerate(params.resolutions):
        lo_idx = np.zeros(3, dtype=np.int64)
        hi_idx = np.full(3, r - 2, dtype=np.int64)
        if region is not None:
            scale = (r - 1) / (params.box_max - params.box_min)
            lo_idx = np.clip(np.ceil((np.asarray(region[0]) - params.box_min) * scale), 0, r - 2).astype(np.int64)
            hi_idx = np.clip(np.floor((np.asarray(region[1]) - params.box_min) * scale) - 1, lo_idx, r - 2).astype(np.int64)
        out.append(rng.integers(lo_idx, hi_idx + 1, size=(n_samples, 3)))
    return out


def smoothness_at(params: NeuralMapParams, vertices: list[np.ndarray]) -> tuple[float, ParamTree]:
    """Mean over sampled vertices of the squared one-cell forward differences per axis,
    summed over features and levels."""
    loss = 0.0
    grads: ParamTree = {}
    for level, idx in enumerate(vertices):
        values = params.tree[f"grid{level}"]
        g = np.zeros_like(values)
        n = idx.shape[0]
        base = values[idx[:, 0], idx[:, 1], idx[:, 2]]  # (n, F)
        for axis in range(3):
            nb = idx.copy()
            nb[:, axis] += 1
            diff = values[nb[:, 0], nb[:, 1], nb[:, 2]] - base
            loss += float(np.sum(diff * diff)) / n
            np.add.at(g, (nb[:, 0], nb[:, 1], nb[:, 2]), 2.0 * diff / n)
            np.add.at(g, (idx[:, 0], idx[:, 1], idx[:, 2]), -2.0 * diff / n)
        grads[f"grid{level}"] = g
    return loss, grads


def smoothness_loss(
    params: NeuralMapParams,
    n_samples: int,
    rng: np.random.Generator,
    region: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[float, ParamTree]:
    """Smoothness regularizer over ``n_samples`` random lattice points per level."""
    return smoothness_at(params, draw_smooth_vertices(params, n_samples, rng, region))
