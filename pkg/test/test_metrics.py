import json

import pytest

from app.core.errors import ContractError
from app.models.common import Phase
from app.models.metrics import MetricsRecord
from app.services.metrics_service import METRICS_FILE, TIMINGS_FILE, MetricsWriter, read_metrics, read_timings


def _record(step, phase=Phase.REFT, **kwargs):
    return MetricsRecord(run_id="r1", phase=phase, step=step, **kwargs)


def test_one_json_line_per_record(tmp_path):
    writer = MetricsWriter(tmp_path, "r1")
    writer.append(_record(1, loss=0.5, mean_reward=0.25, skip_indices=[2]))
    writer.append(_record(2, loss=0.4))
    lines = (tmp_path / METRICS_FILE).read_text().splitlines()
    assert len(lines) == 2
    assert json.loads(lines[0])["skip_indices"] == [2]


def test_timing_fields_go_to_the_sidecar(tmp_path):
    writer = MetricsWriter(tmp_path, "r1")
    writer.append(_record(1, tokens=320, wall_seconds=0.5))
    line = json.loads((tmp_path / METRICS_FILE).read_text())
    assert "tokens" not in line and "wall_seconds" not in line
    (timing,) = read_timings(tmp_path / TIMINGS_FILE)
    assert timing.tokens_per_sec == pytest.approx(640.0)


def test_steps_must_increase_within_a_phase(tmp_path):
    writer = MetricsWriter(tmp_path, "r1")
    writer.append(_record(1))
    writer.append(_record(1, phase=Phase.SFT))
    with pytest.raises(ContractError):
        writer.append(_record(1))


def test_writer_resumes_after_existing_records(tmp_path):
    MetricsWriter(tmp_path, "r1").append(_record(4))
    writer = MetricsWriter(tmp_path, "r1")
    assert writer.last_step(Phase.REFT) == 4
    with pytest.raises(ContractError):
        writer.append(_record(3))


def test_run_id_is_stamped_by_the_writer(tmp_path):
    writer = MetricsWriter(tmp_path, "r2")
    assert writer.append(_record(1)).run_id == "r2"


def test_truncated_last_line_is_skipped(tmp_path):
    writer = MetricsWriter(tmp_path, "r1")
    writer.append(_record(1))
    with (tmp_path / METRICS_FILE).open("a") as handle:
        handle.write('{"run_id": "r1", "pha')
    records = read_metrics(tmp_path / METRICS_FILE)
    assert [r.step for r in records] == [1]


def test_corrupt_middle_line_raises(tmp_path):
    path = tmp_path / METRICS_FILE
    path.write_text('not json\n' + _record(1).model_dump_json() + "\n")
    with pytest.raises(ValueError):
        read_metrics(path)


def test_fresh_writer_truncates_previous_logs(tmp_path):
    writer = MetricsWriter(tmp_path, "r1")
    writer.append(_record(5, tokens=10, wall_seconds=1.0))
    writer = MetricsWriter(tmp_path, "r1", fresh=True)
    assert writer.last_step(Phase.REFT) is None
    assert (tmp_path / METRICS_FILE).read_text() == ""
    assert read_timings(tmp_path / TIMINGS_FILE) == []
    writer.append(_record(1))
    assert [r.step for r in read_metrics(tmp_path / METRICS_FILE)] == [1]
