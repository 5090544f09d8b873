"""Central-difference checks of every hand-written gradient.

Each suite builds a small seeded problem, takes the analytic gradient once and compares
it against central differences on the largest-magnitude coordinates plus a random subset
of the others. Suites:

    map          grid and decoder gradients of the field, query-point gradients, smoothness
    renderer     rendering weight derivative and the full five-term batch objective
    classifier   binary cross-entropy through the classifier MLP
    pose         twist gradients of the batch objective
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterable
from dataclasses import dataclass

import numpy as np

from logic.classifier import CLASSIFIER_ACTIVATIONS, bce_loss
from logic.diff_core import (
    GradCheckReport,
    MlpParams,
    ParamTree,
    finite_difference_check,
    flatten_tree,
    unflatten_tree,
)
from logic.geometry import se3_apply_twist
from logic.neural_map import (
    GEO_ACTIVATIONS,
    NeuralMapParams,
    draw_smooth_vertices,
    field_backward,
    field_query,
    initialize_map,
    smoothness_at,
)
from logic.renderer import PixelBatch, draw_samples, render_weight, render_weight_grad, total_loss
from logic.scenarios import ROOM_MAX, ROOM_MIN, static_scene
from logic.scene_sim import render_ground_truth
from models.config import SlamConfig
from models.exceptions import ContractViolationError
from models.scene import Intrinsics

logger = logging.getLogger(__name__)

SUITES = ("map", "renderer", "classifier", "pose")
GRADCHECK_TOLERANCE = 1e-4
STEP = 1e-5
# Denominator floor of the relative error.
FLOOR = 1e-8

TINY_INTRINSICS = Intrinsics(fx=12.0, fy=12.0, cx=8.0, cy=6.0, width=16, height=12)


@dataclass(frozen=True)
class GradCheckResult:
    suite: str
    name: str
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed(GRADCHECK_TOLERANCE)

    def as_row(self) -> dict:
        return {
            "suite": self.suite,
            "check": self.name,
            "max_rel_error": self.report.max_rel_error,
            "argmax_index": self.report.argmax_index,
            "n_checked": self.report.n_checked,
            "passed": self.passed,
        }


def gradcheck_config() -> SlamConfig:
    """A map and classifier small enough to difference coordinate by coordinate.

    Loss weights are all 1 so each term of the objective, smoothness included, reaches the
    gradients at a scale central differences can resolve.
    """
    return SlamConfig(
        n_samples=12,
        n_surface_samples=4,
        truncation=0.2,
        lambda_geo=1.0,
        lambda_sdf=1.0,
        lambda_free=1.0,
        lambda_smooth=1.0,
        grid_resolutions=[4, 6],
        grid_features=2,
        blob_bins=4,
        geo_hidden=8,
        geo_feature_dim=4,
        color_hidden=8,
        smooth_samples=16,
        chunk_size=64,
        classifier_hidden=8,
        embedding_dim=6,
    )


def _coordinates(
    analytic: np.ndarray,
    rng: np.random.Generator,
    sizes: list[int] | None = None,
    n_top: int = 24,
    n_random: int = 24,
) -> np.ndarray:
    """The ``n_top`` largest analytic entries plus random entries from every block.

    ``sizes`` splits the flat vector into tensors; each gets at least 4 random coordinates
    whatever its analytic values, so a gradient path that is wrongly zero is still
    differenced.
    """
    magnitude = np.abs(np.ravel(analytic))
    sizes = sizes or [magnitude.size]
    top = np.argsort(magnitude)[::-1][:n_top]
    per_block = max(4, n_random // len(sizes))
    picked = [top]
    start = 0
    for size in sizes:
        rest = np.setdiff1d(np.arange(start, start + size), top)
        if rest.size:
            picked.append(rng.choice(rest, size=min(per_block, rest.size), replace=False))
        start += size
    return np.unique(np.concatenate(picked).astype(np.int64))


def _check_tree(
    suite: str,
    name: str,
    loss_fn: Callable[[ParamTree], float],
    tree: ParamTree,
    grads: ParamTree,
    keys: list[str],
    rng: np.random.Generator,
) -> GradCheckResult:
    like = {k: tree[k] for k in keys}
    analytic = flatten_tree({k: grads.get(k, np.zeros_like(tree[k])) for k in keys}, keys)

    def f(flat: np.ndarray) -> float:
        return loss_fn({**tree, **unflatten_tree(flat, like, keys)})

    report = finite_difference_check(
        f, flatten_tree(like, keys), analytic, h=STEP,
        indices=_coordinates(analytic, rng, [tree[k].size for k in keys]), floor=FLOOR,
    )
    return GradCheckResult(suite, name, report)


def _check_vector(
    suite: str,
    name: str,
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic: np.ndarray,
) -> GradCheckResult:
    report = finite_difference_check(f, x, analytic, h=STEP, floor=FLOOR)
    return GradCheckResult(suite, name, report)


def textured_map(config: SlamConfig, rng: np.random.Generator) -> NeuralMapParams:
    """A fresh map with enlarged grid features and a random geometry head, so signed
    distances cross zero along most rays."""
    params = initialize_map(config, ROOM_MIN, ROOM_MAX, rng)
    tree = dict(params.tree)
    for key in params.grid_keys:
        tree[key] = rng.normal(scale=0.5, size=tree[key].shape)
    last = len(GEO_ACTIVATIONS) - 1
    tree[f"geo.W{last}"] = rng.normal(scale=0.3, size=tree[f"geo.W{last}"].shape)
    return params.with_tree(tree)


@dataclass
class _BatchProblem:
    config: SlamConfig
    params: NeuralMapParams
    batch: PixelBatch
    poses: dict
    samples: object
    smooth: list[np.ndarray]


def _batch_problem(rng: np.random.Generator, n_pixels: int = 24) -> _BatchProblem:
    config = gradcheck_config()
    params = textured_map(config, rng)
    script = static_scene(n_frames=2, intrinsics=TINY_INTRINSICS)
    frame = render_ground_truth(script, 0)
    valid = np.flatnonzero(frame.depth.ravel() > 0)
    pixels = np.sort(rng.choice(valid, size=min(n_pixels, valid.size), replace=False))
    batch = PixelBatch.from_frames({0: frame}, {0: pixels})
    poses = {0: frame.gt_pose}
    samples = draw_samples(batch, poses, params, config, rng)
    smooth = draw_smooth_vertices(params, config.smooth_samples, rng)
    return _BatchProblem(config, params, batch, poses, samples, smooth)


# ============================================================================
# Suites
# ============================================================================

def check_map(rng: np.random.Generator) -> list[GradCheckResult]:
    config = gradcheck_config()
    params = textured_map(config, rng)
    points = rng.uniform(params.box_min + 0.1, params.box_max - 0.1, size=(32, 3))
    a = rng.normal(size=(32, 3))
    b = rng.normal(size=32)

    def field_loss(tree: ParamTree, pts: np.ndarray = points) -> float:
        q = field_query(params.with_tree(tree), pts)
        return float(np.sum(a * q.color) + np.sum(b * q.sdf))

    query = field_query(params, points)
    grads, d_points = field_backward(params, query.cache, a, b)
    results = [
        _check_tree("map", "grids", field_loss, params.tree, grads, params.grid_keys, rng),
        _check_tree("map", "decoders", field_loss, params.tree, grads, params.decoder_keys, rng),
        _check_vector(
            "map", "points",
            lambda x: field_loss(params.tree, x.reshape(-1, 3)),
            points.ravel(), d_points.ravel(),
        ),
    ]

    vertices = draw_smooth_vertices(params, config.smooth_samples, rng)
    _, smooth_grads = smoothness_at(params, vertices)
    results.append(_check_tree(
        "map", "smoothness",
        lambda tree: smoothness_at(params.with_tree(tree), vertices)[0],
        params.tree, smooth_grads, params.grid_keys, rng,
    ))
    return results


def check_renderer(rng: np.random.Generator) -> list[GradCheckResult]:
    bandwidth = 0.05
    s = rng.uniform(-0.3, 0.3, size=64)
    c = rng.normal(size=64)
    results = [_check_vector(
        "renderer", "weight",
        lambda x: float(np.sum(c * render_weight(x, bandwidth))),
        s, c * render_weight_grad(s, bandwidth),
    )]

    p = _batch_problem(rng)

    def objective(tree: ParamTree) -> float:
        return total_loss(p.batch, p.samples, p.params.with_tree(tree), p.poses, p.config,
                          p.smooth, map_grads=False).terms.total

    result = total_loss(p.batch, p.samples, p.params, p.poses, p.config, p.smooth, map_grads=True)
    results.append(_check_tree("renderer", "objective/grids", objective, p.params.tree,
                               result.map_grads, p.params.grid_keys, rng))
    results.append(_check_tree("renderer", "objective/decoders", objective, p.params.tree,
                               result.map_grads, p.params.decoder_keys, rng))
    return results


def check_classifier(rng: np.random.Generator) -> list[GradCheckResult]:
    config = gradcheck_config()
    results = []
    for name, width in (("bce", config.embedding_dim), ("bce/position", config.embedding_dim + 3)):
        params = MlpParams.initialize([width, config.classifier_hidden, 1], CLASSIFIER_ACTIVATIONS, rng)
        x = rng.normal(size=(20, width))
        labels = rng.integers(0, 2, size=20).astype(np.float64)
        _, grads = bce_loss(params, x, labels)
        tree = params.to_tree("cls")

        def loss(t: ParamTree, x=x, labels=labels) -> float:
            return bce_loss(MlpParams.from_tree(t, "cls", CLASSIFIER_ACTIVATIONS), x, labels)[0]

        results.append(_check_tree("classifier", name, loss, tree, grads.to_tree("cls"), sorted(tree), rng))
    return results


def check_pose(rng: np.random.Generator) -> list[GradCheckResult]:
    p = _batch_problem(rng)
    pose = p.poses[0]

    def objective(delta: np.ndarray) -> float:
        poses = {0: se3_apply_twist(pose, delta)}
        return total_loss(p.batch, p.samples, p.params, poses, p.config, map_grads=False).terms.total

    result = total_loss(p.batch, p.samples, p.params, p.poses, p.config, map_grads=False, pose_keys={0})
    return [_check_vector("pose", "twist", objective, np.zeros(6), result.pose_grads[0])]


_SUITE_FUNCS: dict[str, Callable[[np.random.Generator], list[GradCheckResult]]] = {
    "map": check_map,
    "renderer": check_renderer,
    "classifier": check_classifier,
    "pose": check_pose,
}


def run_gradcheck(modules: Iterable[str] = SUITES, seed: int = 0) -> list[GradCheckResult]:
    """Run the named suites (``"all"`` expands to every suite).

    Raises:
        ContractViolationError: unknown suite name
    """
    names = []
    for module in modules:
        names.extend(SUITES if module == "all" else [module])
    unknown = sorted(set(names) - set(SUITES))
    if unknown:
        raise ContractViolationError(f"unknown gradcheck module(s) {unknown}; expected {list(SUITES)} or 'all'")

    results = []
    for name in dict.fromkeys(names):
        for result in _SUITE_FUNCS[name](np.random.default_rng([seed, SUITES.index(name)])):
            level = logging.INFO if result.passed else logging.ERROR
            logger.log(level, "%s/%s: max rel error %.3e over %d coords",
                       result.suite, result.name, result.report.max_rel_error, result.report.n_checked)
            results.append(result)
    return results
