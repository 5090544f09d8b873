"""Per-frame motion evidence: which instances moved, according to the map.

The forward test compares each observed instance segment against the map rendered at the
tracked pose; an instance standing in front of mapped geometry is labeled dynamic and one
that agrees with the map static. The reverse test segments the rendered depth and flags
segments whose observation lies behind them: mapped geometry that has left. A flagged
rendered segment is attributed to the instance observation, stored in a keyframe, whose
center lies nearest to the segment's back-projected centroid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from logic.classifier import ClassifierState, LabeledObservation, RestTracker
from logic.geometry import Pose
from logic.renderer import RenderedImage, camera_directions
from logic.segmentation import bidirectional_check, geometric_inconsistency, prune_segments
from models.config import SlamConfig
from models.data_models import Frame, InstanceObservation, Keyframe

logger = logging.getLogger(__name__)


@dataclass
class MotionEvidence:
    """Labels gathered from one frame."""

    labels: list[LabeledObservation] = field(default_factory=list)
    flagged_forward: list[int] = field(default_factory=list)
    flagged_reverse: list[int] = field(default_factory=list)
    resting: set[int] = field(default_factory=set)
    insufficient: int = 0


def forward_labels(frame: Frame, rendered: RenderedImage, config: SlamConfig) -> tuple[list[LabeledObservation], int]:
    """Forward test on the pruned instance segments of the current frame.

    Returns:
        tuple: (labels, number of segments without valid depth in both images)
    """
    observations = frame.observations
    kept = prune_segments([obs.pixels for obs in observations], config.prune_ratio)
    labels = []
    insufficient = 0
    for i in kept:
        obs = observations[i]
        result = geometric_inconsistency(obs.pixels, frame.depth, rendered.depth, config.t_d, config.t_p)
        if result.insufficient:
            insufficient += 1
            continue
        labels.append(LabeledObservation(
            embedding=obs.embedding,
            label=int(result.flagged),
            frame=frame.t,
            instance_id=obs.instance_id,
            position=obs.center,
            source="forward",
        ))
    return labels, insufficient


def back_project(pose: Pose, frame: Frame, pixels: np.ndarray, z_depth: np.ndarray) -> np.ndarray:
    """World points of pixels at the given z-depths."""
    dirs, z_scale = camera_directions(frame.intrinsics, pixels)
    return pose.translation + (dirs * (z_depth * z_scale)[:, None]) @ pose.rotation.T


def nearest_stored_instance(
    point: np.ndarray,
    keyframes: list[Keyframe],
    radius: float,
) -> InstanceObservation | None:
    """Keyframe instance observation whose center is nearest to ``point`` within ``radius``.

    Ties go to the most recent keyframe.
    """
    best, best_dist = None, np.inf
    for kf in reversed(keyframes):
        for obs in kf.frame.observations:
            dist = float(np.linalg.norm(obs.center - point))
            if dist <= radius and dist < best_dist:
                best, best_dist = obs, dist
    return best


def reverse_labels(
    frame: Frame,
    pose: Pose,
    rendered: RenderedImage,
    keyframes: list[Keyframe],
    config: SlamConfig,
) -> list[LabeledObservation]:
    """Reverse test on rendered segments, attributed to stored instance observations."""
    color = rendered.color if config.color_edge_threshold is not None else None
    checks = bidirectional_check(
        frame.depth, rendered.depth, config.t_d, config.t_p,
        config.edge_threshold, config.min_segment_area, color, config.color_edge_threshold,
    )
    labels = []
    for check in checks:
        if not check.flagged:
            continue
        depth = rendered.depth.reshape(-1)[check.pixels]
        centroid = back_project(pose, frame, check.pixels, depth).mean(axis=0)
        stored = nearest_stored_instance(centroid, keyframes, config.match_radius)
        if stored is None:
            logger.debug("Frame %d: reverse-flagged segment at %s matches no stored instance", frame.t, centroid)
            continue
        labels.append(LabeledObservation(
            embedding=stored.embedding,
            label=1,
            frame=frame.t,
            instance_id=stored.instance_id,
            position=stored.center,
            source="reverse",
        ))
    return labels


def merge_labels(labels: list[LabeledObservation], position_mode: bool) -> list[LabeledObservation]:
    """One label per instance (per instance and position in position mode); dynamic wins."""
    merged: dict[tuple, LabeledObservation] = {}
    for obs in labels:
        key = (obs.instance_id,)
        if position_mode and obs.position is not None:
            key = (obs.instance_id, *np.round(obs.position, 2).tolist())
        current = merged.get(key)
        if current is None or obs.label > current.label:
            merged[key] = obs
    return list(merged.values())


def apply_rest_rule(
    labels: list[LabeledObservation],
    frame: Frame,
    resting: set[int],
    classifier: ClassifierState,
    radius: float,
) -> list[LabeledObservation]:
    """Label resting instances static at their current position and retire buffer records
    of those instances near that position.

    Forward labels of a resting instance are dropped, as are its reverse labels placed
    within ``radius`` of where it rests.
    """
    current = {obs.instance_id: obs for obs in frame.observations}

    def superseded(lab: LabeledObservation) -> bool:
        if lab.instance_id not in resting:
            return False
        if lab.source == "forward":
            return True
        return (lab.source == "reverse" and lab.position is not None
                and float(np.linalg.norm(lab.position - current[lab.instance_id].center)) <= radius)

    out = [lab for lab in labels if not superseded(lab)]
    for instance_id in sorted(resting):
        obs = current[instance_id]
        retired = classifier.buffer.retire(instance_id, obs.center, radius)
        if retired:
            logger.info("Frame %d: instance %d at rest, retired %d replay records", frame.t, instance_id, retired)
        out.append(LabeledObservation(obs.embedding, 0, frame.t, instance_id, obs.center, "rest"))
    return out


def gather_evidence(
    frame: Frame,
    pose: Pose,
    rendered: RenderedImage,
    keyframes: list[Keyframe],
    classifier: ClassifierState,
    config: SlamConfig,
    rest_tracker: RestTracker | None = None,
    reverse: bool = True,
) -> MotionEvidence:
    """Forward and, when ``reverse`` is set, reverse labels of one frame, with the
    stationarity rule in position mode."""
    forward, insufficient = forward_labels(frame, rendered, config)
    backward = reverse_labels(frame, pose, rendered, keyframes, config) if reverse else []
    labels = merge_labels(forward + backward, classifier.position_mode)
    evidence = MotionEvidence(
        flagged_forward=sorted({lab.instance_id for lab in forward if lab.label == 1}),
        flagged_reverse=sorted({lab.instance_id for lab in backward}),
        insufficient=insufficient,
    )
    if rest_tracker is not None and classifier.position_mode:
        evidence.resting = rest_tracker.observe(frame.observations)
        labels = apply_rest_rule(labels, frame, evidence.resting, classifier, config.rest_radius)
    evidence.labels = labels
    return evidence
