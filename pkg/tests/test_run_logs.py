"""Tests for the run event log and the CSV logs."""

from __future__ import annotations

import logging

import pytest

from services.run_audit import EventType, Outcome, RunAuditLogger, read_events
from services.run_logs import FRAME_COLUMNS, FrameLog, LossLog, read_table, write_table


@pytest.mark.unit
class TestRunAudit:
    def test_events_written_as_json_lines(self, tmp_path):
        audit = RunAuditLogger(tmp_path)
        audit.emit(EventType.RUN_STARTED, stage="init", scene="static")
        audit.emit(EventType.MAP_SKIPPED, 4, "map", Outcome.SKIPPED, "all views dynamic")
        events = read_events(tmp_path / "events.jsonl")
        assert [e["event_type"] for e in events] == ["run.started", "map.skipped"]
        assert events[0]["metadata"] == {"scene": "static"}
        assert events[1]["frame"] == 4
        assert events[1]["outcome"] == {"status": "skipped", "reason": "all views dynamic", "duration_ms": None}

    def test_event_ids_are_unique(self):
        audit = RunAuditLogger()
        ids = {audit.emit(EventType.FRAME_TRACKED, t).event_id for t in range(20)}
        assert len(ids) == 20

    def test_disabled_logger_writes_nothing(self, tmp_path):
        audit = RunAuditLogger(tmp_path, enabled=False)
        audit.emit(EventType.RUN_FINISHED)
        assert read_events(tmp_path / "events.jsonl") == []

    def test_events_reach_the_audit_logger(self, caplog):
        with caplog.at_level(logging.DEBUG, logger="audit"):
            RunAuditLogger().emit(EventType.KEYFRAME_ADDED, 9, "map", count=3)
        assert "keyframe.added" in caplog.text


@pytest.mark.unit
class TestCsvLogs:
    def test_frame_log_column_order(self, tmp_path):
        log = FrameLog(tmp_path / "run.csv")
        log.append({"frame": 0, "keyframe": True, "track_ms": 2.0, "map_ms": 4.0})
        log.flush()
        assert list(read_table(tmp_path / "run.csv").columns) == FRAME_COLUMNS

    def test_unknown_column_rejected(self):
        with pytest.raises(KeyError):
            LossLog().append({"step": 0, "bogus": 1.0})

    def test_stage_means(self):
        log = FrameLog()
        for ms in (1.0, 3.0):
            log.append({"frame": 0, "track_ms": ms, "render_ms": 0.0, "classify_ms": 0.0, "map_ms": 2 * ms})
        assert log.stage_means() == {"track": 2.0, "render": 0.0, "classify": 0.0, "map": 4.0}
        assert FrameLog().stage_means() == {}

    def test_flush_without_path(self):
        assert LossLog().flush() is None

    def test_write_table(self, tmp_path):
        path = write_table([{"variant": "default", "ate_rms": 0.01}], tmp_path / "out" / "ablation.csv")
        assert read_table(path).to_dict("records") == [{"variant": "default", "ate_rms": 0.01}]
