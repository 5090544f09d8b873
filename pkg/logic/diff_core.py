"""Numerical substrate: small MLPs with exact reverse-mode gradients, trilinear grid
interpolation with gradients, the Adam optimizer and a finite-difference checker.

Everything runs in 64-bit floats on numpy arrays. Functions are pure over explicit state:
optimizers return new arrays instead of mutating their inputs, so disjoint states can be
used from different threads.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from models.exceptions import (
    ContractViolationError,
    NonFiniteGradientError,
    OutOfDomainError,
)

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "sigmoid", "none")

ParamTree = dict[str, np.ndarray]


# ============================================================================
# MLP
# ============================================================================

@dataclass
class MlpParams:
    """Weights and biases of a fully connected network.

    ``weights[i]`` has shape (out_i, in_i); ``biases[i]`` has shape (out_i,).
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ContractViolationError("weights, biases and activations differ in length")
        for i, (W, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ContractViolationError(f"layer {i}: unknown activation {act!r}")
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ContractViolationError(f"layer {i}: bias {b.shape} vs weight {W.shape}")
            if i > 0 and W.shape[1] != self.weights[i - 1].shape[0]:
                raise ContractViolationError(
                    f"layer {i} expects {W.shape[1]} inputs but layer {i - 1} "
                    f"produces {self.weights[i - 1].shape[0]}"
                )

    @classmethod
    def initialize(
        cls,
        widths: list[int],
        activations: list[str],
        rng: np.random.Generator,
    ) -> MlpParams:
        """He-uniform weights and zero biases for the given layer widths."""
        if len(widths) != len(activations) + 1:
            raise ContractViolationError("need one activation per layer")
        weights, biases = [], []
        for n_in, n_out in zip(widths[:-1], widths[1:]):
            bound = np.sqrt(6.0 / n_in)
            weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
            biases.append(np.zeros(n_out))
        return cls(weights, biases, list(activations))

    @property
    def in_width(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_width(self) -> int:
        return self.weights[-1].shape[0]

    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def to_tree(self, prefix: str) -> ParamTree:
        tree: ParamTree = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            tree[f"{prefix}.W{i}"] = W
            tree[f"{prefix}.b{i}"] = b
        return tree

    @classmethod
    def from_tree(cls, tree: Mapping[str, np.ndarray], prefix: str, activations: list[str]) -> MlpParams:
        n = len(activations)
        return cls(
            [tree[f"{prefix}.W{i}"] for i in range(n)],
            [tree[f"{prefix}.b{i}"] for i in range(n)],
            list(activations),
        )


@dataclass
class MlpCache:
    """Activation record of one forward pass; enough for an exact backward pass."""

    params: MlpParams
    inputs: list[np.ndarray]
    outputs: list[np.ndarray]
    squeeze: bool
    fingerprint: int = 0


def _fingerprint(params: MlpParams) -> int:
    return hash(tuple(a.tobytes() for a in (*params.weights, *params.biases)))


def _activate(z: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "sigmoid":
        return expit(z)
    return z


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    """Evaluate the network on a vector (in,) or a batch (n, in).

    Raises:
        ContractViolationError: input width differs from the first layer
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.in_width:
        raise ContractViolationError(
            f"input shape {x.shape} does not match first layer width {params.in_width}"
        )
    inputs, outputs = [], []
    a = x
    for W, b, act in zip(params.weights, params.biases, params.activations):
        inputs.append(a)
        a = _activate(a @ W.T + b, act)
        outputs.append(a)
    cache = MlpCache(params, inputs, outputs, squeeze, _fingerprint(params))
    return (a[0] if squeeze else a), cache


def mlp_backward(cache: MlpCache, d_output: np.ndarray) -> tuple[MlpParams, np.ndarray]:
    """Gradients of <d_output, output> w.r.t. parameters and input.

    Returns:
        tuple: (parameter gradients as MlpParams, input gradient shaped like the input)

    Raises:
        ContractViolationError: cache is not an MlpCache, its parameters changed since the
            forward pass, or d_output shape mismatches
    """
    if not isinstance(cache, MlpCache):
        raise ContractViolationError("mlp_backward needs the cache returned by mlp_forward")
    if _fingerprint(cache.params) != cache.fingerprint:
        raise ContractViolationError("stale cache: parameters changed after mlp_forward")
    g = np.asarray(d_output, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    if g.shape != cache.outputs[-1].shape:
        raise ContractViolationError(
            f"d_output shape {g.shape} does not match cached output {cache.outputs[-1].shape}"
        )
    params = cache.params
    n_layers = len(params.weights)
    d_weights: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    d_biases: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    for i in reversed(range(n_layers)):
        act = params.activations[i]
        out = cache.outputs[i]
        if act == "relu":
            g = g * (out > 0.0)
        elif act == "sigmoid":
            g = g * out * (1.0 - out)
        d_weights[i] = g.T @ cache.inputs[i]
        d_biases[i] = g.sum(axis=0)
        g = g @ params.weights[i]
    d_params = MlpParams(d_weights, d_biases, list(params.activations))
    return d_params, (g[0] if cache.squeeze else g)


# ============================================================================
# Adam
# ============================================================================

@dataclass
class AdamState:
    """Moment accumulators, step counter and hyperparameters of one Adam instance."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: ParamTree = field(default_factory=dict)
    v: ParamTree = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], lr: float, **kwargs) -> AdamState:
        return cls(
            lr=lr,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            **kwargs,
        )


def adam_step(
    state: AdamState,
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
) -> tuple[ParamTree, AdamState]:
    """One bias-corrected Adam update.

    Keys missing from ``grads`` are treated as zero gradients. Accumulators are created
    lazily (zero) for keys seen for the first time.

    Raises:
        NonFiniteGradientError: any gradient entry is NaN or inf
        ContractViolationError: shapes disagree
    """
    for key, g in grads.items():
        if key not in params:
            raise ContractViolationError(f"gradient for unknown parameter {key!r}")
        if g.shape != params[key].shape:
            raise ContractViolationError(
                f"{key}: gradient shape {g.shape} vs parameter shape {params[key].shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {key!r}")

    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    m_new, v_new, p_new = {}, {}, {}
    for key, p in params.items():
        m = state.m.get(key)
        v = state.v.get(key)
        if m is None:
            m, v = np.zeros_like(p), np.zeros_like(p)
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p_new[key] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        m_new[key], v_new[key] = m, v
    new_state = AdamState(state.lr, b1, b2, state.eps, t, m_new, v_new)
    return p_new, new_state


# ============================================================================
# Dense feature grid
# ============================================================================

@dataclass
class FeatureGrid:
    """Dense lattice of feature vectors spanning an axis-aligned box.

    ``values`` has shape (rx, ry, rz, F); vertex (i, j, k) sits at
    box_min + (i, j, k) / (r - 1) * (box_max - box_min).
    """

    values: np.ndarray
    box_min: np.ndarray
    box_max: np.ndarray

    @property
    def resolution(self) -> tuple[int, int, int]:
        return self.values.shape[:3]  # type: ignore[return-value]

    @property
    def n_features(self) -> int:
        return self.values.shape[3]

    @property
    def cell_size(self) -> np.ndarray:
        return (np.asarray(self.box_max) - np.asarray(self.box_min)) / (
            np.asarray(self.resolution) - 1
        )


@dataclass
class GridSample:
    """Result of a batched grid lookup.

    Attributes:
        features: (n, F) interpolated features
        d_point: (n, F, 3) Jacobian of features w.r.t. world coordinates
        corners: (n, 8) flat vertex indices touched (the sparsity pattern of d/d grid)
        weights: (n, 8) interpolation weights of those vertices
    """

    features: np.ndarray
    d_point: np.ndarray
    corners: np.ndarray
    weights: np.ndarray


# Corner c uses offsets (c >> 2 & 1, c >> 1 & 1, c & 1) along (x, y, z).
_CORNER_OFFSETS = np.array([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)])


def grid_interpolate(grid: FeatureGrid, points: np.ndarray) -> GridSample:
    """Trilinear interpolation of the 8 enclosing vertices, with exact gradients.

    Raises:
        OutOfDomainError: a point lies outside the grid box
    """
    points = np.asarray(points, dtype=np.float64)
    single = points.ndim == 1
    pts = points.reshape(-1, 3)
    lo = np.asarray(grid.box_min, dtype=np.float64)
    hi = np.asarray(grid.box_max, dtype=np.float64)
    if np.any(pts < lo) or np.any(pts > hi) or not np.all(np.isfinite(pts)):
        bad = np.flatnonzero(~(np.all((pts >= lo) & (pts <= hi), axis=1)))
        raise OutOfDomainError(
            f"{bad.size} point(s) outside grid box {lo.tolist()}..{hi.tolist()}"
        )
    res = np.asarray(grid.resolution)
    scale = (res - 1) / (hi - lo)
    u = (pts - lo) * scale
    base = np.clip(np.floor(u).astype(np.int64), 0, res - 2)
    frac = u - base

    # per-axis weights for offset 0 and 1, and their derivatives w.r.t. frac
    w_axis = np.stack([1.0 - frac, frac], axis=-1)  # (n, 3, 2)
    dw_axis = np.array([-1.0, 1.0])

    idx = base[:, None, :] + _CORNER_OFFSETS[None, :, :]  # (n, 8, 3)
    flat = (idx[..., 0] * res[1] + idx[..., 1]) * res[2] + idx[..., 2]
    ox, oy, oz = _CORNER_OFFSETS.T
    wx = w_axis[:, 0, ox]
    wy = w_axis[:, 1, oy]
    wz = w_axis[:, 2, oz]
    weights = wx * wy * wz  # (n, 8)

    table = grid.values.reshape(-1, grid.n_features)
    corner_feats = table[flat]  # (n, 8, F)
    features = np.einsum("nc,ncf->nf", weights, corner_feats)

    dwx = dw_axis[ox][None, :] * wy * wz * scale[0]
    dwy = wx * dw_axis[oy][None, :] * wz * scale[1]
    dwz = wx * wy * dw_axis[oz][None, :] * scale[2]
    dweights = np.stack([dwx, dwy, dwz], axis=-1)  # (n, 8, 3)
    d_point = np.einsum("ncf,ncd->nfd", corner_feats, dweights)

    if single:
        return GridSample(features[0], d_point[0], flat[0], weights[0])
    return GridSample(features, d_point, flat, weights)


def grid_backward(grid: FeatureGrid, sample: GridSample, d_features: np.ndarray) -> np.ndarray:
    """Scatter feature gradients back onto the lattice (dense array shaped like the grid)."""
    d_features = np.asarray(d_features, dtype=np.float64).reshape(-1, grid.n_features)
    corners = sample.corners.reshape(-1, 8)
    weights = sample.weights.reshape(-1, 8)
    n_vertices = int(np.prod(grid.resolution))
    out = np.empty((n_vertices, grid.n_features))
    flat_idx = corners.ravel()
    for f in range(grid.n_features):
        contrib = (weights * d_features[:, f:f + 1]).ravel()
        out[:, f] = np.bincount(flat_idx, weights=contrib, minlength=n_vertices)
    return out.reshape(grid.values.shape)


# ============================================================================
# Finite differences
# ============================================================================

@dataclass(frozen=True)
class GradCheckReport:
    """Outcome of comparing analytic gradients with central differences."""

    max_rel_error: float
    argmax_index: int
    h: float
    n_checked: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def finite_difference_check(
    f: Callable[[np.ndarray], float],
    params: np.ndarray,
    analytic: np.ndarray,
    h: float = 1e-5,
    indices: np.ndarray | None = None,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare analytic gradients of a scalar map against central differences.

    The relative error per coordinate is |a - n| / max(|a|, |n|, floor).

    Args:
        f: map from a flat parameter vector to a scalar
        params: flat parameter vector (not modified)
        analytic: analytic gradient, same shape as params
        h: perturbation size (> 0)
        indices: subset of coordinates to check; all when None
        floor: denominator floor

    Returns:
        GradCheckReport
    """
    if h <= 0:
        raise ContractViolationError("finite difference step h must be positive")
    params = np.asarray(params, dtype=np.float64).ravel()
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if analytic.shape != params.shape:
        raise ContractViolationError(
            f"analytic gradient shape {analytic.shape} vs params {params.shape}"
        )
    coords = np.arange(params.size) if indices is None else np.asarray(indices, dtype=np.int64)
    worst, worst_idx = 0.0, int(coords[0]) if coords.size else -1
    probe = params.copy()
    for i in coords:
        orig = probe[i]
        probe[i] = orig + h
        f_plus = float(f(probe))
        probe[i] = orig - h
        f_minus = float(f(probe))
        probe[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = analytic[i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        if rel > worst or not np.isfinite(rel):
            worst, worst_idx = float(rel), int(i)
    logger.debug("finite-difference check: %d coords, max rel error %.3e", coords.size, worst)
    return GradCheckReport(worst, worst_idx, h, int(coords.size))


def flatten_tree(tree: Mapping[str, np.ndarray], keys: list[str] | None = None) -> np.ndarray:
    keys = sorted(tree) if keys is None else keys
    return np.concatenate([np.asarray(tree[k], dtype=np.float64).ravel() for k in keys])


def unflatten_tree(
    flat: np.ndarray,
    like: Mapping[str, np.ndarray],
    keys: list[str] | None = None,
) -> ParamTree:
    keys = sorted(like) if keys is None else keys
    out: ParamTree = {}
    offset = 0
    for k in keys:
        n = like[k].size
        out[k] = flat[offset:offset + n].reshape(like[k].shape)
        offset += n
    if offset != flat.size:
        raise ContractViolationError(f"flat vector has {flat.size} entries, expected {offset}")
    return out
