"""Tracking, bundle adjustment and the continual-learning frame loop.

Per frame:
1. Predict the pose with a constant-velocity model and track it against the frozen map on
   pixels the classifier calls static.
2. Render the map at the tracked pose and gather forward/reverse motion evidence.
3. Retrain the classifier when the evidence contradicts it and recompute every keyframe
   mask.
4. Store a keyframe on cadence and run bundle adjustment over the static pixels of all
   keyframes and the current frame.

The map only ever sees pixels the current classifier calls static, so objects that are
learned to move fade out of it as replayed keyframes overwrite them.
"""

from __future__ import annotations

import json
import logging
import time
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from tqdm import tqdm

from logic.classifier import (
    ClassifierState,
    RestTracker,
    motion_mask,
    new_classifier,
    recompute_keyframe_masks,
    update_classifier,
)
from logic.diff_core import AdamState, MlpParams, adam_step
from logic.evaluation import ate_errors, map_render_error
from logic.geometry import Pose, se3_apply_twist
from logic.motion_status import MotionEvidence, gather_evidence
from logic.neural_map import NeuralMapParams, draw_smooth_vertices, initialize_map
from logic.renderer import LossTerms, PixelBatch, RenderedImage, draw_samples, render_image, total_loss
from models.config import SlamConfig, settings
from models.data_models import Frame, Keyframe, MotionMask, Trajectory
from models.exceptions import (
    ConfigurationError,
    ContractViolationError,
    DatasetError,
    EmptyStaticSetError,
    NonFiniteGradientError,
    NumericalFailureError,
)
from models.reports import RunReport
from models.scene import SceneScript
from services.run_audit import EventType, Outcome, RunAuditLogger
from services.run_logs import FrameLog, LossLog
from storage import rasters
from storage.checkpoints import load_prior, save_classifier, save_map
from storage.dataset import Dataset, write_tum_trajectory

logger = logging.getLogger(__name__)


# ============================================================================
# Pixel sampling and pose updates
# ============================================================================

def static_candidates(frame: Frame, mask: MotionMask) -> np.ndarray:
    """Flat indices of pixels that are static and carry valid depth."""
    return np.flatnonzero(mask.static.ravel() & (frame.depth.ravel() > 0))


def sample_static_pixels(
    frame: Frame,
    mask: MotionMask,
    count: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Uniform draw without replacement from the static, valid-depth pixels.

    Returns every candidate when fewer than ``count`` exist.

    Raises:
        ContractViolationError: count < 1
        EmptyStaticSetError: no candidate pixel
    """
    if count < 1:
        raise ContractViolationError("pixel count must be at least 1")
    candidates = static_candidates(frame, mask)
    if candidates.size == 0:
        raise EmptyStaticSetError(f"frame {frame.t} has no static pixel with valid depth")
    if candidates.size <= count:
        return candidates
    return np.sort(rng.choice(candidates, size=count, replace=False))


def constant_velocity(previous: Pose, before: Pose | None) -> Pose:
    """Repeat the last inter-frame motion: (P_prev P_before^-1) P_prev."""
    if before is None:
        return previous
    return previous.compose(before.inverse()).compose(previous)


def _pose_optimizer(config: SlamConfig) -> AdamState:
    return AdamState.for_params(
        {"twist": np.zeros(6)}, config.lr_pose,
        beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps,
    )


def _step_pose(adam: AdamState, pose: Pose, grad: np.ndarray) -> tuple[Pose, AdamState]:
    """One Adam step on a left twist held at zero, applied as exp(delta) * pose."""
    new, adam = adam_step(adam, {"twist": np.zeros(6)}, {"twist": grad})
    return se3_apply_twist(pose, new["twist"]), adam


def _require_finite(terms: LossTerms, where: str) -> None:
    if not terms.is_finite():
        raise NumericalFailureError(f"non-finite loss during {where}: {terms}")


# ============================================================================
# Tracking
# ============================================================================

@dataclass
class TrackResult:
    pose: Pose
    mask: MotionMask
    loss: float = float("nan")
    terms: LossTerms | None = None
    fallback: bool = False


def track(
    frame: Frame,
    params: NeuralMapParams,
    classifier: ClassifierState | None,
    pose_init: Pose,
    config: SlamConfig,
    rng: np.random.Generator,
) -> TrackResult:
    """Optimize the camera pose of ``frame`` against the frozen map.

    Runs ``iters_track`` Adam steps on the pose twist, each on a fresh batch of
    ``pixels_track`` static pixels, and returns the pose with the lowest batch loss.
    ``pose_init`` is the constant-velocity prediction; it is returned unchanged when the
    frame has no static pixel.

    Raises:
        NumericalFailureError: the loss became non-finite
    """
    mask = motion_mask(classifier, frame.observations, frame.shape)
    if config.iters_track == 0:
        return TrackResult(pose_init, mask)
    if static_candidates(frame, mask).size == 0:
        logger.warning("Frame %d: no static pixel, keeping the constant-velocity pose", frame.t)
        return TrackResult(pose_init, mask, fallback=True)

    key = frame.t
    pose = pose_init
    adam = _pose_optimizer(config)
    best = TrackResult(pose_init, mask, float("inf"))
    for _ in range(config.iters_track):
        pixels = sample_static_pixels(frame, mask, config.pixels_track, rng)
        batch = PixelBatch.from_frames({key: frame}, {key: pixels})
        poses = {key: pose}
        samples = draw_samples(batch, poses, params, config, rng)
        result = total_loss(batch, samples, params, poses, config, map_grads=False)
        _require_finite(result.terms, f"tracking of frame {key}")
        if result.terms.total < best.loss:
            best = TrackResult(pose, mask, result.terms.total, result.terms)
        pose, adam = _step_pose(adam, pose, result.pose_grads[key])
    return best


# ============================================================================
# Bundle adjustment
# ============================================================================

@dataclass
class MapOptimizer:
    """Persistent Adam states: one for the grids, one for the decoders."""

    grid: AdamState
    decoder: AdamState

    @classmethod
    def for_map(cls, params: NeuralMapParams, config: SlamConfig) -> MapOptimizer:
        kwargs = {"beta1": config.adam_beta1, "beta2": config.adam_beta2, "eps": config.adam_eps}
        return cls(
            AdamState.for_params({k: params.tree[k] for k in params.grid_keys}, config.lr_grid, **kwargs),
            AdamState.for_params({k: params.tree[k] for k in params.decoder_keys}, config.lr_decoder, **kwargs),
        )

    def step(self, params: NeuralMapParams, grads: dict[str, np.ndarray]) -> NeuralMapParams:
        tree = dict(params.tree)
        for name, keys in (("grid", params.grid_keys), ("decoder", params.decoder_keys)):
            state = getattr(self, name)
            new, state = adam_step(
                state,
                {k: params.tree[k] for k in keys},
                {k: grads[k] for k in keys if k in grads},
            )
            setattr(self, name, state)
            tree.update(new)
        return params.with_tree(tree)


@dataclass
class BundleAdjustResult:
    params: NeuralMapParams
    poses: dict[int, Pose]
    losses: list[LossTerms] = field(default_factory=list)
    skipped: bool = False


def bundle_adjust(
    keyframes: list[Keyframe],
    current: Keyframe | None,
    params: NeuralMapParams,
    poses: dict[int, Pose],
    config: SlamConfig,
    rng: np.random.Generator,
    optimizer: MapOptimizer | None = None,
    iterations: int | None = None,
    fixed: frozenset[int] = frozenset({0}),
) -> BundleAdjustResult:
    """Jointly optimize the map and camera poses over replayed static pixels.

    Each step draws ``pixels_ba`` pixels: every pixel first picks a view uniformly among
    the keyframes and the current frame that have static pixels, then a static pixel of
    that view uniformly. Poses of views in ``fixed`` never move; with
    ``ba_refine_keyframes`` off only the current pose is refined.

    Args:
        keyframes: stored keyframes with their masks
        current: the current frame as a keyframe record (may duplicate the last keyframe)
        poses: camera poses by frame index; views without an entry use their stored pose
        optimizer: persistent map optimizer; a fresh one when None
        iterations: defaults to ``iters_map``

    Raises:
        ContractViolationError: no keyframe and no current frame
        NumericalFailureError: the loss became non-finite
    """
    views = {kf.index: kf for kf in keyframes}
    if current is not None:
        views[current.index] = current
    if not views:
        raise ContractViolationError("bundle adjustment needs at least one keyframe")
    poses = {k: poses.get(k, kf.pose) for k, kf in views.items()}
    iterations = config.iters_map if iterations is None else iterations
    if iterations == 0:
        return BundleAdjustResult(params, poses)

    candidates = {k: static_candidates(kf.frame, kf.mask) for k, kf in views.items()}
    eligible = [k for k in sorted(candidates) if candidates[k].size]
    if not eligible:
        logger.warning("Bundle adjustment skipped: every view is fully dynamic")
        return BundleAdjustResult(params, poses, skipped=True)

    optimizer = optimizer or MapOptimizer.for_map(params, config)
    if config.ba_refine_keyframes:
        refine = [k for k in eligible if k not in fixed]
    else:
        refine = [current.index] if current is not None and current.index in eligible and current.index not in fixed else []
    pose_adams = {k: _pose_optimizer(config) for k in refine}
    frames = {k: views[k].frame for k in eligible}
    uniform = np.full(len(eligible), 1.0 / len(eligible))

    losses = []
    for _ in range(iterations):
        counts = rng.multinomial(config.pixels_ba, uniform)
        pixels = {
            k: rng.choice(candidates[k], size=c, replace=bool(c > candidates[k].size))
            for k, c in zip(eligible, counts)
            if c > 0
        }
        batch = PixelBatch.from_frames(frames, pixels)
        samples = draw_samples(batch, poses, params, config, rng)
        smooth = draw_smooth_vertices(params, config.smooth_samples, rng) if config.lambda_smooth > 0 else None
        result = total_loss(batch, samples, params, poses, config, smooth, map_grads=True, pose_keys=set(refine))
        _require_finite(result.terms, "bundle adjustment")
        losses.append(result.terms)
        params = optimizer.step(params, result.map_grads)
        for k in refine:
            poses[k], pose_adams[k] = _step_pose(pose_adams[k], poses[k], result.pose_grads[k])
    return BundleAdjustResult(params, poses, losses)


# ============================================================================
# Frame loop
# ============================================================================

@dataclass
class SlamResult:
    trajectory: Trajectory
    params: NeuralMapParams
    classifier: ClassifierState | None
    keyframes: list[Keyframe]
    frame_log: FrameLog
    loss_log: LossLog
    report: RunReport
    run_dir: Path | None = None
    masks: dict[int, MotionMask] = field(default_factory=dict)


def on_cadence(t: int, every: int) -> bool:
    """Frame 0 and every ``every``-th frame after it (frames every-1, 2*every-1, ...)."""
    return t == 0 or (t + 1) % every == 0


class SlamSystem:
    """State of one run: map, classifier, keyframes, poses and logs."""

    def __init__(
        self,
        script: SceneScript,
        config: SlamConfig,
        run_dir: str | Path | None = None,
        prior: MlpParams | None = None,
        audit: RunAuditLogger | None = None,
    ):
        if config.embedding_dim != script.embedding_dim:
            raise ConfigurationError(
                f"config embedding_dim {config.embedding_dim} != dataset embedding_dim {script.embedding_dim}"
            )
        self.config = config
        self.script = script
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.rng = np.random.default_rng(config.seed)
        room_min, room_max = script.room.box_min, script.room.box_max
        self.params = initialize_map(config, room_min, room_max, np.random.default_rng([config.seed, 1]))
        self.optimizer = MapOptimizer.for_map(self.params, config)
        self.classifier = (
            new_classifier(config, room_min, room_max, np.random.default_rng([config.seed, 2]), prior)
            if config.use_classifier else None
        )
        self.rest_tracker = RestTracker(config.rest_radius, config.rest_frames) if config.position_mode else None
        self.keyframes: list[Keyframe] = []
        self.poses: dict[int, Pose] = {}
        self.anchor: int | None = None
        self.map_rounds = 0
        self.frame_log = FrameLog(self.run_dir / "run.csv" if self.run_dir else None)
        self.loss_log = LossLog(self.run_dir / "losses.csv" if self.run_dir else None)
        self.audit = audit or RunAuditLogger(self.run_dir if settings.LOG_JSON_EVENTS else None)
        self._ba_step = 0
        self._stage = "init"
        self._frame = -1
        self._last_terms: LossTerms | None = None
        self.masks: dict[int, MotionMask] = {}
        self.flagged_forward: dict[int, list[int]] = {}
        self.flagged_reverse: dict[int, list[int]] = {}

    @contextmanager
    def _timed(self, stage: str, timings: dict[str, float]) -> Iterator[None]:
        self._stage = stage
        start = time.perf_counter()
        try:
            yield
        finally:
            timings[stage] = timings.get(stage, 0.0) + 1000.0 * (time.perf_counter() - start)

    def predict_pose(self) -> Pose:
        known = sorted(self.poses)
        previous = self.poses[known[-1]]
        before = self.poses[known[-2]] if len(known) > 1 else None
        return constant_velocity(previous, before)

    # ------------------------------------------------------------------
    # Stages
    # ------------------------------------------------------------------

    def _track(self, frame: Frame) -> TrackResult:
        if self.anchor is None:
            self.anchor = frame.t
            pose = frame.gt_pose if frame.gt_pose is not None else Pose.identity()
            mask = motion_mask(self.classifier, frame.observations, frame.shape)
            self.audit.emit(EventType.FRAME_TRACKED, frame.t, "track", reason="anchor")
            return TrackResult(pose, mask)
        result = track(frame, self.params, self.classifier, self.predict_pose(), self.config, self.rng)
        if result.fallback:
            self.audit.emit(EventType.TRACKING_FALLBACK, frame.t, "track", Outcome.SKIPPED, "no static pixel")
        else:
            if result.terms is not None:
                self._last_terms = result.terms
            self.audit.emit(EventType.FRAME_TRACKED, frame.t, "track", loss=result.loss)
        return result

    def _classify(self, frame: Frame, pose: Pose, rendered: RenderedImage) -> MotionEvidence:
        config = self.config
        reverse = frame.t % config.bidirectional_every == 0
        evidence = gather_evidence(
            frame, pose, rendered, self.keyframes, self.classifier, config, self.rest_tracker, reverse
        )
        if evidence.flagged_forward:
            self.flagged_forward[frame.t] = list(evidence.flagged_forward)
        if evidence.flagged_reverse:
            self.flagged_reverse[frame.t] = list(evidence.flagged_reverse)
        for instance_id in evidence.flagged_forward:
            self.audit.emit(EventType.MOTION_FLAGGED, frame.t, "classify", instance_id=instance_id, test="forward")
        for instance_id in evidence.flagged_reverse:
            self.audit.emit(EventType.MOTION_FLAGGED, frame.t, "classify", instance_id=instance_id, test="reverse")
        if not evidence.labels:
            return evidence
        outcome = update_classifier(self.classifier, evidence.labels, config)
        if not outcome.updated:
            self.audit.emit(EventType.CLASSIFIER_NOOP, frame.t, "classify", Outcome.SKIPPED, "no contradiction")
            return evidence
        self.audit.emit(
            EventType.CLASSIFIER_UPDATED, frame.t, "classify",
            conflicts=outcome.n_conflicts, replayed=outcome.n_replayed,
            loss_before=outcome.loss_before, loss_after=outcome.loss_after,
            update_count=self.classifier.update_count,
        )
        changed = recompute_keyframe_masks(self.keyframes, self.classifier)
        self.audit.emit(EventType.MASKS_RECOMPUTED, frame.t, "classify", keyframes=len(self.keyframes), changed=changed)
        return evidence

    def _map(self, current: Keyframe, first: bool) -> None:
        config = self.config
        poses = {kf.index: self.poses[kf.index] for kf in self.keyframes}
        poses[current.index] = self.poses[current.index]
        result = bundle_adjust(
            self.keyframes, current, self.params, poses, config, self.rng, self.optimizer,
            config.iters_first_map if first else config.iters_map,
            frozenset({self.anchor}),
        )
        if result.skipped:
            self.audit.emit(EventType.MAP_SKIPPED, current.index, "map", Outcome.SKIPPED, "all views dynamic")
            return
        self.params = result.params
        self.poses.update(result.poses)
        for kf in self.keyframes:
            kf.pose = self.poses[kf.index]
        current.pose = self.poses[current.index]
        for terms in result.losses:
            self.loss_log.append(terms.as_row(self._ba_step))
            self._ba_step += 1
        if result.losses:
            self._last_terms = result.losses[-1]
        self.map_rounds += 1
        self.audit.emit(
            EventType.BUNDLE_ADJUSTED, current.index, "map",
            round=self.map_rounds, iterations=len(result.losses),
            loss=result.losses[-1].total if result.losses else None,
        )
        if config.checkpoint_every_round:
            self.save_checkpoint(f"{current.index:05d}")

    def process_frame(self, frame: Frame) -> dict:
        """Run every stage on one frame; returns its frame-log row."""
        config = self.config
        self._frame = frame.t
        timings: dict[str, float] = {}
        with self._timed("track", timings):
            tracked = self._track(frame)
            self.poses[frame.t] = tracked.pose
        mask = tracked.mask

        evidence = None
        rendered = None
        if self.classifier is not None and self.map_rounds > 0:
            with self._timed("render", timings):
                rendered = render_image(
                    self.params, tracked.pose, frame.intrinsics, config,
                    n_samples=config.motion_check_samples, depth_guide=frame.depth,
                )
            with self._timed("classify", timings):
                evidence = self._classify(frame, tracked.pose, rendered)
                mask = motion_mask(self.classifier, frame.observations, frame.shape)
        self.masks[frame.t] = mask

        is_keyframe = on_cadence(frame.t, config.keyframe_interval)
        with self._timed("map", timings):
            current = Keyframe(frame, tracked.pose, mask)
            if is_keyframe:
                self.keyframes.append(current)
                self.audit.emit(EventType.KEYFRAME_ADDED, frame.t, "map", count=len(self.keyframes))
            if on_cadence(frame.t, config.mapping_every):
                self._map(current, first=frame.t == self.anchor)

        if config.dump_every and frame.t % config.dump_every == 0 and self.run_dir is not None:
            self._dump(frame, mask, rendered)

        return {
            "frame": frame.t,
            "keyframe": is_keyframe,
            "static_fraction": mask.static_fraction,
            "flagged_forward": len(evidence.flagged_forward) if evidence else 0,
            "flagged_reverse": len(evidence.flagged_reverse) if evidence else 0,
            "update_count": self.classifier.update_count if self.classifier else 0,
            "map_rounds": self.map_rounds,
            "tracking_loss": tracked.loss,
            "track_ms": timings.get("track", 0.0),
            "render_ms": timings.get("render", 0.0),
            "classify_ms": timings.get("classify", 0.0),
            "map_ms": timings.get("map", 0.0),
        }

    # ------------------------------------------------------------------
    # Outputs
    # ------------------------------------------------------------------

    def _dump(self, frame: Frame, mask: MotionMask, rendered: RenderedImage | None) -> None:
        dump_dir = self.run_dir / "dumps"
        dump_dir.mkdir(parents=True, exist_ok=True)
        if rendered is None:
            rendered = render_image(self.params, self.poses[frame.t], frame.intrinsics, self.config,
                                    n_samples=self.config.motion_check_samples)
        rasters.write_color(dump_dir / f"render_{frame.t:05d}.ppm", rendered.color)
        rasters.write_depth(dump_dir / f"render_depth_{frame.t:05d}.raw", rendered.depth)
        rasters.write_mask(dump_dir / f"mask_{frame.t:05d}.pgm", mask.static)

    def save_checkpoint(self, tag: str) -> None:
        if self.run_dir is None:
            return
        ckpt_dir = self.run_dir / "checkpoints"
        save_map(self.params, ckpt_dir / f"map_{tag}")
        if self.classifier is not None:
            save_classifier(self.classifier, ckpt_dir / f"classifier_{tag}")

    def write_diagnostics(self, error: Exception) -> Path | None:
        if self.run_dir is None:
            return None
        path = self.run_dir / "diagnostics.json"
        last = self._last_terms.as_row(self._ba_step) if self._last_terms is not None else None
        path.write_text(json.dumps(
            {"frame": self._frame, "stage": self._stage, "error": str(error), "last_finite_losses": last},
            indent=2,
        ))
        return path

    def trajectory(self) -> Trajectory:
        frames = sorted(self.poses)
        return Trajectory(frames, [self.poses[t] for t in frames])

    def build_report(self, dataset: Dataset) -> RunReport:
        report = RunReport(
            classifier_updates=self.classifier.update_count if self.classifier else 0,
            stage_ms=self.frame_log.stage_means(),
            n_frames=len(self.poses),
            n_keyframes=len(self.keyframes),
            map_rounds=self.map_rounds,
            flagged_forward=self.flagged_forward,
            flagged_reverse=self.flagged_reverse,
        )
        trajectory = self.trajectory()
        if len(set(trajectory.frames) & set(dataset.gt.frames)) >= 3:
            errors = ate_errors(trajectory, dataset.gt)
            report.frame_errors = errors
            report.ate_rms = float(np.sqrt(np.mean(np.square(list(errors.values())))))
        keyframe_ids = {kf.index for kf in self.keyframes}
        held_out = [t for t in trajectory.frames if t not in keyframe_ids]
        if held_out and self.config.n_report_probes:
            picks = np.linspace(0, len(held_out) - 1, min(self.config.n_report_probes, len(held_out)))
            probes = sorted({held_out[int(round(i))] for i in picks})
            report.render_error = map_render_error(self.params, dataset.script, probes, self.config, self.classifier)
        return report

    # ------------------------------------------------------------------
    # Run
    # ------------------------------------------------------------------

    def run(self, dataset: Dataset, progress: bool = False) -> SlamResult:
        """Process every frame of a dataset and write the run outputs.

        Raises:
            DatasetError: a frame file is missing or corrupt
            NumericalFailureError: a loss became non-finite (``diagnostics.json`` written)
        """
        config = self.config
        self.audit.emit(
            EventType.RUN_STARTED, stage="init", scene=dataset.script.name, n_frames=len(dataset),
            use_classifier=config.use_classifier, use_replay=config.use_replay,
            position_mode=config.position_mode, prior=self.classifier is not None and self.classifier.prior is not None,
        )
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            config.to_json_file(self.run_dir / "config.json")

        frames = tqdm(range(len(dataset)), desc=dataset.script.name, unit="frame", disable=not progress)
        for t in frames:
            try:
                frame = dataset.frame(t)
            except DatasetError as e:
                self.audit.emit(EventType.DATASET_ERROR, t, "load", Outcome.FAILURE, str(e))
                raise
            try:
                row = self.process_frame(frame)
            except (NumericalFailureError, NonFiniteGradientError) as e:
                path = self.write_diagnostics(e)
                self.audit.emit(EventType.NUMERICAL_ERROR, t, self._stage, Outcome.FAILURE, str(e), diagnostics=str(path))
                if isinstance(e, NumericalFailureError):
                    raise
                raise NumericalFailureError(str(e)) from e
            self.frame_log.append(row)
            frames.set_postfix(kf=len(self.keyframes), updates=row["update_count"])

        report = self.build_report(dataset)
        if self.run_dir is not None:
            write_tum_trajectory(self.trajectory(), self.run_dir / "est_traj.txt")
            self.frame_log.flush()
            self.loss_log.flush()
            self.save_checkpoint("final")
            report.to_json_file(self.run_dir / "report.json")
        self.audit.emit(
            EventType.RUN_FINISHED, stage="report", ate_rms=report.ate_rms,
            keyframes=len(self.keyframes), classifier_updates=report.classifier_updates,
        )
        logger.info(
            "Run finished: %d frames, %d keyframes, %d classifier updates, ATE %s",
            len(self.poses), len(self.keyframes), report.classifier_updates,
            "n/a" if report.ate_rms is None else f"{report.ate_rms:.4f} m",
        )
        return SlamResult(
            self.trajectory(), self.params, self.classifier, self.keyframes,
            self.frame_log, self.loss_log, report, self.run_dir, self.masks,
        )


def run_slam(
    dataset: Dataset,
    config: SlamConfig,
    out_dir: str | Path | None = None,
    progress: bool = False,
) -> SlamResult:
    """Run the full pipeline on a dataset; outputs go to ``out_dir`` when given.

    Raises:
        ConfigurationError: embedding width mismatch between config and dataset
        DatasetError: unreadable dataset file or prior checkpoint
        NumericalFailureError: non-finite loss
    """
    prior = None
    if config.use_classifier and config.prior_path:
        prior = load_prior(config.prior_path, config.embedding_dim)
    system = SlamSystem(dataset.script, config, out_dir, prior)
    return system.run(dataset, progress=progress)
