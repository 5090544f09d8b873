"""CSV run logs written through pandas."""

from __future__ import annotations

import logging
from pathlib import Path

import pandas as pd

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ["step", "L_pho", "L_geo", "L_sdf", "L_free", "L_smooth", "L"]
FRAME_COLUMNS = [
    "frame",
    "keyframe",
    "static_fraction",
    "flagged_forward",
    "flagged_reverse",
    "update_count",
    "map_rounds",
    "tracking_loss",
    "track_ms",
    "render_ms",
    "classify_ms",
    "map_ms",
]


class CsvLog:
    """Rows accumulated in memory, flushed to CSV with a fixed column order."""

    columns: list[str] = []

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.rows: list[dict] = []

    def append(self, row: dict) -> None:
        unknown = set(row) - set(self.columns)
        if unknown:
            raise KeyError(f"unknown log columns: {sorted(unknown)}")
        self.rows.append(row)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=self.columns)

    def flush(self) -> Path | None:
        if self.path is None:
            return None
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(self.path, index=False)
        logger.debug("Wrote %d rows to %s", len(self.rows), self.path)
        return self.path


class LossLog(CsvLog):
    """Per-term loss values per optimization step."""

    columns = LOSS_COLUMNS


class FrameLog(CsvLog):
    """Per-frame mask statistics, classifier activity and stage timings."""

    columns = FRAME_COLUMNS

    def stage_means(self) -> dict[str, float]:
        df = self.to_frame()
        if df.empty:
            return {}
        return {
            col.removesuffix("_ms"): float(df[col].mean())
            for col in ("track_ms", "render_ms", "classify_ms", "map_ms")
        }


def write_table(rows: list[dict], path: str | Path) -> Path:
    """Write a list of records (e.g. ablation variants) as CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows).to_csv(path, index=False)
    return path


def read_table(path: str | Path) -> pd.DataFrame:
    return pd.read_csv(path)
