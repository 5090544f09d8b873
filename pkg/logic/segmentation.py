"""Segment-level motion evidence from observed and rendered depth.

- prune_segments drops segments that are mostly part of another segment.
- geometric_inconsistency is the forward test: the map renders farther than observed, so
  something new stands in front of mapped geometry.
- bidirectional_check is the reverse test on segments of the rendered image: the
  observation is farther than the map, so mapped geometry has disappeared or moved away.

Segments are flat pixel index arrays (v * width + u). Depth 0 marks an invalid pixel in
either image.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from models.exceptions import ContractViolationError

logger = logging.getLogger(__name__)


def prune_segments(segments: Sequence[np.ndarray], ratio: float = 0.9) -> list[int]:
    """Indices of the segments that survive part-of pruning.

    A segment is deleted when its overlap with another surviving segment exceeds
    ``ratio`` times its own area. Segments are visited smallest first (ties by index), so
    for a nested chain only the outermost survives.
    """
    if not 0 < ratio <= 1:
        raise ContractViolationError("prune ratio must lie in (0, 1]")
    sets = [np.unique(np.asarray(s, dtype=np.int64)) for s in segments]
    areas = np.array([s.size for s in sets])
    order = np.argsort(areas, kind="stable")
    alive = np.ones(len(sets), dtype=bool)
    for i in order:
        if areas[i] == 0:
            alive[i] = False
            continue
        for j in range(len(sets)):
            if j == i or not alive[j]:
                continue
            overlap = np.intersect1d(sets[i], sets[j], assume_unique=True).size
            if overlap > ratio * areas[i]:
                alive[i] = False
                break
    return [i for i in range(len(sets)) if alive[i]]


@dataclass(frozen=True)
class InconsistencyResult:
    flagged: bool
    fraction: float
    n_valid: int

    @property
    def insufficient(self) -> bool:
        """No pixel of the segment had valid depth in both images."""
        return self.n_valid == 0


def _check(segment: np.ndarray, near_img: np.ndarray, far_img: np.ndarray, t_d: float, t_p: float) -> InconsistencyResult:
    """Fraction of valid segment pixels where far_img - near_img > t_d, flagged if > t_p."""
    if near_img.shape != far_img.shape:
        raise ContractViolationError(f"depth images differ in shape: {near_img.shape} vs {far_img.shape}")
    idx = np.asarray(segment, dtype=np.int64).ravel()
    a = near_img.reshape(-1)[idx]
    b = far_img.reshape(-1)[idx]
    valid = (a > 0) & (b > 0)
    n_valid = int(valid.sum())
    if n_valid == 0:
        return InconsistencyResult(False, 0.0, 0)
    fraction = float(np.count_nonzero((b - a > t_d) & valid)) / n_valid
    return InconsistencyResult(fraction > t_p, fraction, n_valid)


def geometric_inconsistency(
    segment: np.ndarray,
    depth_obs: np.ndarray,
    depth_rend: np.ndarray,
    t_d: float = 0.3,
    t_p: float = 0.05,
) -> InconsistencyResult:
    """Forward test: fraction of segment pixels with rendered - observed > t_d exceeds t_p."""
    return _check(segment, depth_obs, depth_rend, t_d, t_p)


def segment_rendered_depth(
    depth_rend: np.ndarray,
    edge_threshold: float = 0.1,
    min_area: int = 20,
    color_rend: np.ndarray | None = None,
    color_threshold: float | None = None,
) -> list[np.ndarray]:
    """Connected components of valid rendered pixels under 4-connectivity.

    Neighbors join when their depths differ by less than ``edge_threshold`` and, when a
    rendered color image and ``color_threshold`` are given, their largest per-channel color
    difference is below it too. Components smaller than ``min_area`` are dropped. Segments
    are returned ordered by their first pixel.
    """
    H, W = depth_rend.shape
    valid = depth_rend > 0
    flat = np.arange(H * W).reshape(H, W)
    rows, cols = [], []
    for a, b, da, db in (
        (flat[:, :-1], flat[:, 1:], depth_rend[:, :-1], depth_rend[:, 1:]),
        (flat[:-1, :], flat[1:, :], depth_rend[:-1, :], depth_rend[1:, :]),
    ):
        link = (da > 0) & (db > 0) & (np.abs(da - db) < edge_threshold)
        if color_rend is not None and color_threshold is not None:
            ca = color_rend.reshape(H * W, 3)[a.ravel()].reshape(*a.shape, 3)
            cb = color_rend.reshape(H * W, 3)[b.ravel()].reshape(*b.shape, 3)
            link &= np.abs(ca - cb).max(axis=-1) < color_threshold
        rows.append(a[link])
        cols.append(b[link])
    rows_a = np.concatenate(rows)
    cols_a = np.concatenate(cols)
    graph = coo_matrix((np.ones(rows_a.size), (rows_a, cols_a)), shape=(H * W, H * W))
    _, labels = connected_components(graph, directed=False)

    labels = np.where(valid.ravel(), labels, -1)
    segments = []
    order = np.argsort(labels, kind="stable")
    sorted_labels = labels[order]
    starts = np.flatnonzero(np.r_[True, sorted_labels[1:] != sorted_labels[:-1]])
    ends = np.r_[starts[1:], sorted_labels.size]
    for s, e in zip(starts, ends):
        if sorted_labels[s] < 0 or e - s < min_area:
            continue
        segments.append(np.sort(order[s:e]))
    segments.sort(key=lambda seg: int(seg[0]))
    return segments


@dataclass(frozen=True)
class SegmentCheck:
    pixels: np.ndarray
    result: InconsistencyResult

    @property
    def flagged(self) -> bool:
        return self.result.flagged


def bidirectional_check(
    depth_obs: np.ndarray,
    depth_rend: np.ndarray,
    t_d: float = 0.3,
    t_p: float = 0.05,
    edge_threshold: float = 0.1,
    min_area: int = 20,
    color_rend: np.ndarray | None = None,
    color_threshold: float | None = None,
) -> list[SegmentCheck]:
    """Reverse test on each rendered-depth segment: observed - rendered > t_d on more than
    a t_p fraction of its valid pixels."""
    segments = segment_rendered_depth(depth_rend, edge_threshold, min_area, color_rend, color_threshold)
    checks = [SegmentCheck(seg, _check(seg, depth_rend, depth_obs, t_d, t_p)) for seg in segments]
    n_flagged = sum(c.flagged for c in checks)
    if n_flagged:
        logger.debug("Reverse check flagged %d of %d rendered segments", n_flagged, len(checks))
    return checks
