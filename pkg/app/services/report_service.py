"""Report rendering: plain-text tables, JSON lines and an SVG throughput chart."""
import json
import logging
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from app.models.metrics import DeltaReport, ExtremesTable, StabilityTally, ThroughputSample, TheoryReport  # noqa: E402

logger = logging.getLogger(__name__)

DeltaRows = Sequence[Tuple[str, Sequence[DeltaReport]]]


def _fmt(value) -> str:
    if value is None:
        return "n/a"
    return f"{value:+.3f}" if isinstance(value, float) else str(value)


def render_delta_table(rows: DeltaRows) -> str:
    """One line per (instance, metric): value, baseline, Δ% and Δ_abs."""
    header = f"{'instance':<34} {'metric':<22} {'value':>12} {'baseline':>12} {'delta_%':>10} {'delta_abs':>11}"
    lines = [header, "-" * len(header)]
    for label, reports in rows:
        for r in reports:
            pct = "abs-only" if r.absolute_only else f"{r.delta:+.2f}"
            lines.append(f"{label:<34} {r.metric:<22} {r.value:>12.4f} {r.baseline:>12.4f} {pct:>10} {r.delta_abs:>+11.4f}")
    return "\n".join(lines)


def render_extremes(table: ExtremesTable) -> str:
    columns = " ".join(f"{name:>9}" for name in table.benchmarks)
    lines = [f"{'instance':<8} {'run':<30} {columns} {'mean|abs|':>10}"]
    for tag, row in (("best", table.best), ("worst", table.worst)):
        deltas = " ".join(f"{d:>+9.3f}" for d in row.benchmark_deltas)
        lines.append(f"{tag:<8} {row.instance:<30} {deltas} {row.mean_abs_delta:>10.3f}")
    return "\n".join(lines)


def render_stability(tallies: Iterable[StabilityTally]) -> str:
    lines = [f"{'mitigation':<16} {'best':>5} {'worst':>6} {'neutral':>8}"]
    for t in tallies:
        lines.append(f"{t.mitigation:<16} {t.best:>5} {t.worst:>6} {t.neutral:>8}")
    return "\n".join(lines)


def render_theory_report(report: TheoryReport) -> str:
    lines = []
    for check in report.checks:
        parts = [f"{check.status.value:<6} {check.name}"]
        if check.estimate is not None:
            parts.append(f"estimate={check.estimate:.6g}")
        if check.exact is not None:
            parts.append(f"exact={check.exact:.6g}")
        if check.standard_error is not None:
            parts.append(f"se={check.standard_error:.3g}")
        if check.band is not None:
            parts.append(f"band={check.band:.3g}")
        parts.extend(f"{k}={v:.6g}" for k, v in check.details.items())
        lines.append(" ".join(parts))
    return "\n".join(lines)


def render_throughput(samples: Sequence[ThroughputSample]) -> str:
    lines = [f"{'skipped':>7} {'tokens':>8} {'seconds':>9} {'tokens/sec':>11} {'workers':>7}"]
    for s in samples:
        lines.append(f"{s.skipped_layers:>7} {s.total_tokens:>8} {s.wall_seconds:>9.4f} {s.tokens_per_sec:>11.1f} {s.workers:>7}")
    return "\n".join(lines)


def write_jsonl(path: Path, records: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record, sort_keys=True, default=str) + "\n")
    return path


def delta_records(rows: DeltaRows) -> List[dict]:
    return [{"instance": label, **r.model_dump()} for label, reports in rows for r in reports]


def write_text(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def render_throughput_chart(series: Sequence[Tuple[str, Sequence[float], Sequence[float]]], path: Path) -> Path:
    """Tokens/sec against skip ratio, one line per series, saved as SVG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    try:
        for label, ratios, rates in series:
            ax.plot([100 * r for r in ratios], rates, marker="o", label=label)
        ax.set_xlabel("skip ratio x (%)")
        ax.set_ylabel("tokens / sec")
        ax.grid(True, alpha=0.3)
        if len(series) > 1:
            ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg")
    finally:
        plt.close(fig)
    logger.info("Wrote chart", extra={"ctx": {"path": str(path)}})
    return path
