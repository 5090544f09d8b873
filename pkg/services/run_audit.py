"""Structured event log for SLAM runs.

Every decision the run loop takes that changes what the map or the classifier learns is
recorded as one JSON line:
- Event type (frame tracked, keyframe added, classifier updated, motion flagged...)
- Frame context (frame index, stage)
- Outcome (success/failure/skipped with reason)
- Timing (stage duration in milliseconds)
- Event-specific metadata (loss values, instance ids, counts)

Lines go to the ``"audit"`` logger and, when a run directory is attached, to
``events.jsonl`` inside it.
"""

from __future__ import annotations

import json
import logging
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any

from pydantic import BaseModel, Field

logger = logging.getLogger("audit")


class EventType(str, Enum):
    """Types of run events."""

    # Tracking
    FRAME_TRACKED = "frame.tracked"
    TRACKING_FALLBACK = "frame.tracking_fallback"

    # Mapping
    KEYFRAME_ADDED = "keyframe.added"
    BUNDLE_ADJUSTED = "map.bundle_adjusted"
    MAP_SKIPPED = "map.skipped"

    # Motion status
    CLASSIFIER_UPDATED = "classifier.updated"
    CLASSIFIER_NOOP = "classifier.noop"
    MOTION_FLAGGED = "motion.flagged"
    MASKS_RECOMPUTED = "masks.recomputed"

    # Run lifecycle
    RUN_STARTED = "run.started"
    RUN_FINISHED = "run.finished"

    # Errors
    NUMERICAL_ERROR = "error.numerical"
    DATASET_ERROR = "error.dataset"


class Outcome(str, Enum):
    SUCCESS = "success"
    FAILURE = "failure"
    SKIPPED = "skipped"


class RunEvent(BaseModel):
    """One structured run event."""

    event_id: str = Field(..., description="Run-unique event identifier")
    event_type: EventType
    timestamp: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))
    frame: int | None = Field(None, description="Frame index the event belongs to")
    stage: str | None = Field(None, description="track, render, classify or map")
    outcome: Outcome = Outcome.SUCCESS
    outcome_reason: str | None = None
    duration_ms: float | None = None
    metadata: dict[str, Any] | None = None

    def to_json(self) -> str:
        """Serialize to one JSON line.

        Returns:
            JSON string representation of the event
        """
        return json.dumps(
            {
                "event_id": self.event_id,
                "event_type": self.event_type.value,
                "timestamp": self.timestamp.isoformat(),
                "frame": self.frame,
                "stage": self.stage,
                "outcome": {
                    "status": self.outcome.value,
                    "reason": self.outcome_reason,
                    "duration_ms": self.duration_ms,
                },
                "metadata": self.metadata or {},
            },
            default=str,
        )


class RunAuditLogger:
    """Writes run events to the audit logger and an optional ``events.jsonl``."""

    def __init__(self, run_dir: str | Path | None = None, enabled: bool = True):
        self.logger = logging.getLogger("audit")
        self._counter = 0
        self.enabled = enabled
        self.path: Path | None = None
        if run_dir is not None:
            self.attach(run_dir)

    def attach(self, run_dir: str | Path) -> None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        self.path = run_dir / "events.jsonl"
        self.path.write_text("")

    def _generate_event_id(self) -> str:
        """Event ID in format: YYYYMMDD-HHMMSS-COUNTER."""
        self._counter += 1
        now = datetime.now(timezone.utc)
        return f"{now.strftime('%Y%m%d-%H%M%S')}-{self._counter:06d}"

    def log_event(self, event: RunEvent) -> None:
        if not self.enabled:
            return
        line = event.to_json()
        self.logger.debug(line)
        if self.path is not None:
            with self.path.open("a") as f:
                f.write(line + "\n")

    def emit(
        self,
        event_type: EventType,
        frame: int | None = None,
        stage: str | None = None,
        outcome: Outcome = Outcome.SUCCESS,
        reason: str | None = None,
        duration_ms: float | None = None,
        **metadata: Any,
    ) -> RunEvent:
        """Build and log an event.

        Args:
            event_type: What happened
            frame: Frame index
            stage: Pipeline stage
            outcome: Success, failure or skipped
            reason: Failure or skip reason
            duration_ms: Stage duration
            **metadata: Event-specific values

        Returns:
            RunEvent: the logged event
        """
        event = RunEvent(
            event_id=self._generate_event_id(),
            event_type=event_type,
            frame=frame,
            stage=stage,
            outcome=outcome,
            outcome_reason=reason,
            duration_ms=duration_ms,
            metadata=metadata or None,
        )
        self.log_event(event)
        return event


def read_events(path: str | Path) -> list[dict[str, Any]]:
    """Load an ``events.jsonl`` file."""
    lines = Path(path).read_text().splitlines()
    return [json.loads(line) for line in lines if line.strip()]
