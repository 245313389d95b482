import logging
import os
from pathlib import Path
from typing import Dict, List, Optional

from app.core.config import settings
from app.core.errors import ContractError
from app.models.common import Phase
from app.models.metrics import MetricsRecord, TimingRecord

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
TIMINGS_FILE = "timings.jsonl"


class MetricsWriter:
    """Sole appender of a run's metrics log.

    Each record is one self-contained JSON line, flushed (and fsynced when enabled)
    before `append` returns, so a crash never leaves a partial earlier line. Wall-clock
    fields go to a separate timings file.

    `fresh=True` truncates both logs so a rerun of the same config reproduces them byte
    for byte; otherwise step numbering resumes after the records already on disk.
    """

    def __init__(self, run_dir: Path, run_id: str, fsync: Optional[bool] = None, fresh: bool = False):
        self.run_dir = Path(run_dir)
        self.run_id = run_id
        self.fsync = settings.FSYNC_METRICS if fsync is None else fsync
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.metrics_path = self.run_dir / METRICS_FILE
        self.timings_path = self.run_dir / TIMINGS_FILE
        self._last_step: Dict[Phase, int] = {}
        if fresh:
            for path in (self.metrics_path, self.timings_path):
                path.write_text("", encoding="utf-8")
            return
        for record in read_metrics(self.metrics_path):
            self._last_step[record.phase] = record.step

    def last_step(self, phase: Phase) -> Optional[int]:
        return self._last_step.get(phase)

    def _write_line(self, path: Path, line: str) -> None:
        with path.open("a", encoding="utf-8") as handle:
            handle.write(line + "\n")
            handle.flush()
            if self.fsync:
                os.fsync(handle.fileno())

    def append(self, record: MetricsRecord) -> MetricsRecord:
        previous = self._last_step.get(record.phase)
        if previous is not None and record.step <= previous:
            raise ContractError(f"{record.phase.value} step {record.step} does not follow step {previous}")
        if record.run_id != self.run_id:
            record = record.model_copy(update={"run_id": self.run_id})

        self._write_line(self.metrics_path, record.model_dump_json())
        self._last_step[record.phase] = record.step
        if record.tokens or record.wall_seconds:
            timing = TimingRecord(
                run_id=self.run_id,
                phase=record.phase,
                step=record.step,
                tokens=record.tokens,
                wall_seconds=record.wall_seconds,
                tokens_per_sec=record.tokens_per_sec,
            )
            self._write_line(self.timings_path, timing.model_dump_json())
        return record


def read_metrics(path: Path) -> List[MetricsRecord]:
    """Parses every complete line; a truncated final line is skipped with a warning."""
    path = Path(path)
    if not path.exists():
        return []
    records: List[MetricsRecord] = []
    with path.open("r", encoding="utf-8") as handle:
        lines = handle.read().split("\n")
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(MetricsRecord.model_validate_json(line))
        except ValueError:
            if number == len(lines):
                logger.warning("Skipping truncated metrics line", extra={"ctx": {"path": str(path), "line": number}})
                continue
            raise
    return records


def read_timings(path: Path) -> List[TimingRecord]:
    path = Path(path)
    if not path.exists():
        return []
    with path.open("r", encoding="utf-8") as handle:
        return [TimingRecord.model_validate_json(line) for line in handle if line.strip()]
