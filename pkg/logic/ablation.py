"""Paired runs on one scenario: the default pipeline against variants that switch a single
component off (or on), with the probe values that tell them apart.

Each scenario has its own variant list:

    static          default, no_classifier
    walking         default, no_classifier, no_replay
    kidnapping_box  default, no_classifier
    replace_box     default, position_mode
    crowd           default, prior

Results go to ``ablation.csv`` with one row per variant.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import pandas as pd

from logic.classifier import pretrain_prior
from logic.evaluation import dynamic_mask_iou, object_region_error
from logic.scenarios import build_scenario
from logic.scene_sim import CATEGORIES
from logic.slam import SlamResult, run_slam
from models.config import SlamConfig
from models.exceptions import ConfigurationError, InsufficientDataError, NumericalFailureError
from models.reports import RunReport
from models.scene import SceneScript
from services.run_logs import write_table
from storage.checkpoints import save_prior
from storage.dataset import Dataset, load_dataset, write_dataset

logger = logging.getLogger(__name__)

VARIANTS: dict[str, dict] = {
    "default": {},
    "no_classifier": {"use_classifier": False},
    "no_replay": {"use_replay": False},
    "position_mode": {"position_mode": True},
    "prior": {},
}

SCENARIO_VARIANTS: dict[str, list[str]] = {
    "static": ["default", "no_classifier"],
    "walking": ["default", "no_classifier", "no_replay"],
    "kidnapping_box": ["default", "no_classifier"],
    "replace_box": ["default", "position_mode"],
    "crowd": ["default", "prior"],
}

# Object ids the probes look at, per scenario.
FORGET_PROBES = {"walking": 4, "kidnapping_box": 6}
RELOCATION_PROBES = {"replace_box": 6}


def variants_for(scenario: str) -> list[str]:
    return SCENARIO_VARIANTS.get(scenario, ["default", "no_classifier"])


def movable_ids(script: SceneScript) -> set[int]:
    return {obj.id for obj in script.objects if obj.category in script.movable_categories}


def _prior_path(script: SceneScript, config: SlamConfig, out_dir: Path, seed: int) -> str:
    movable = list(script.movable_categories)
    static = [c for c in CATEGORIES if c not in movable]
    prior = pretrain_prior(config, movable, static, seed, encoder_seed=script.encoder_seed)
    return str(save_prior(prior, out_dir / "prior"))


def late_frame(n_frames: int) -> int:
    """Late frame the classifier is judged at (frame 190 of 200)."""
    return min(n_frames - 1, round(0.95 * n_frames))


def first_flag(report: RunReport, object_id: int) -> int | None:
    """First frame at which either motion test flagged ``object_id``."""
    frames = [
        t for flags in (report.flagged_forward, report.flagged_reverse)
        for t, ids in flags.items() if object_id in ids
    ]
    return min(frames) if frames else None


def rounds_since(result: SlamResult, t: int) -> int:
    """Mapping rounds run after frame ``t``."""
    rounds = result.frame_log.to_frame().set_index("frame")["map_rounds"]
    return int(result.report.map_rounds - rounds.loc[t])


def reverse_flag_delay(report: RunReport, object_id: int, t_vanish: int) -> float:
    """Frames from removal until the reverse test alone flags ``object_id`` (NaN if never)."""
    for t in sorted(report.flagged_reverse):
        if t >= t_vanish and object_id in report.flagged_reverse[t] \
                and object_id not in report.flagged_forward.get(t, []):
            return float(t - t_vanish)
    return np.nan


def probe_row(result: SlamResult, dataset: Dataset, config: SlamConfig) -> dict:
    """Forgetting, relocation, replay and mask-IoU probes of a finished run (NaN when not
    applicable).

    The forgetting probe only counts once the object has been flagged and
    ``config.forget_rounds`` mapping rounds have run since. The replay probe reads the
    motion probability the run assigned to the object at ``late_frame``; mask IoU is taken
    against every visible mover at that frame.
    """
    script = dataset.script
    last = len(dataset) - 1
    report = result.report
    mask = result.masks.get(late_frame(len(dataset)))
    row = {
        "forget_error": np.nan, "relocation_error": np.nan, "mask_iou": np.nan,
        "late_frame": late_frame(len(dataset)), "late_probability": np.nan,
        "forward_flags": 0, "reverse_flag_delay": np.nan,
    }

    object_id = FORGET_PROBES.get(script.name)
    if object_id is not None:
        flagged_at = first_flag(report, object_id)
        row["forward_flags"] = sum(object_id in ids for ids in report.flagged_forward.values())
        t_vanish = next(o.t_vanish for o in script.objects if o.id == object_id)
        if t_vanish is not None:
            row["reverse_flag_delay"] = reverse_flag_delay(report, object_id, t_vanish)
        if flagged_at is None:
            logger.warning("Forgetting probe skipped: object %d was never flagged", object_id)
        elif (rounds := rounds_since(result, flagged_at)) < config.forget_rounds:
            logger.warning("Forgetting probe skipped: %d of %d mapping rounds after frame %d",
                           rounds, config.forget_rounds, flagged_at)
        else:
            try:
                row["forget_error"] = object_region_error(
                    result.params, script, last, object_id, config, include_object=False, silhouette_frame=0
                )
            except InsufficientDataError as e:
                logger.warning("Forgetting probe skipped: %s", e)

        if mask is not None and object_id in mask.probabilities:
            row["late_probability"] = mask.probabilities[object_id]

    object_id = RELOCATION_PROBES.get(script.name)
    if object_id is not None:
        try:
            row["relocation_error"] = object_region_error(
                result.params, script, last, object_id, config, include_object=True
            )
        except InsufficientDataError as e:
            logger.warning("Relocation probe skipped: %s", e)

    movers = movable_ids(script)
    if result.classifier is not None and movers and mask is not None:
        frame = dataset.frame(row["late_frame"])
        visible = movers & {obs.instance_id for obs in frame.observations}
        if visible:
            row["mask_iou"] = dynamic_mask_iou(mask.static, frame, visible)
    return row


def run_ablation(
    scenario: str,
    config: SlamConfig,
    out_dir: str | Path,
    seed: int = 0,
    n_frames: int | None = None,
    variants: list[str] | None = None,
) -> pd.DataFrame:
    """Simulate ``scenario`` once and run every variant on the same frames.

    A variant that diverges is reported with ``diverged=True`` and no ATE.

    Raises:
        ConfigurationError: unknown scenario or variant
    """
    out_dir = Path(out_dir)
    variants = variants or variants_for(scenario)
    unknown = sorted(set(variants) - set(VARIANTS))
    if unknown:
        raise ConfigurationError(f"unknown ablation variant(s) {unknown}; expected {sorted(VARIANTS)}")

    script = build_scenario(scenario, seed=seed, n_frames=n_frames)
    dataset = load_dataset(write_dataset(script, out_dir / "data"))

    rows = []
    for name in variants:
        overrides = dict(VARIANTS[name])
        if name == "prior":
            overrides["prior_path"] = _prior_path(script, config, out_dir, seed)
        variant_config = config.model_copy(update={**overrides, "seed": seed})
        logger.info("Ablation %s: running variant %s", scenario, name)
        row = {"scenario": scenario, "variant": name, "diverged": False}
        try:
            result = run_slam(dataset, variant_config, out_dir / name)
        except NumericalFailureError as e:
            logger.warning("Variant %s diverged: %s", name, e)
            row.update(diverged=True, ate_rms=np.nan, classifier_updates=np.nan)
            rows.append(row)
            continue
        row["ate_rms"] = result.report.ate_rms
        row["classifier_updates"] = result.report.classifier_updates
        row.update(probe_row(result, dataset, variant_config))
        rows.append(row)

    path = write_table(rows, out_dir / "ablation.csv")
    logger.info("Wrote %d ablation rows to %s", len(rows), path)
    return pd.DataFrame(rows)
