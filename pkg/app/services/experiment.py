"""Runs one Nested-ReFT instance or the full sweep grid and collects run summaries."""
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from app.models.common import MitigationTag
from app.models.config import MitigationMode, RunConfig
from app.models.metrics import DeltaReport, ExtremesTable, RunSummary, StabilityTally
from app.models.task import Dataset
from app.services.eval_bench import (
    delta_report,
    evaluate_pass_at_1,
    instance_label,
    mitigation_stability,
    summarize_extremes,
)
from app.services.metrics_service import MetricsWriter
from app.services.trainer import SftResult, TrainingResult, run_sft, run_training

logger = logging.getLogger(__name__)

SUMMARY_FILE = "summary.json"


def eval_length(cfg: RunConfig) -> int:
    return cfg.eval.completion_length or cfg.train.completion_length


def build_summary(cfg: RunConfig, run_id: str, result: TrainingResult, benchmarks: Sequence[Dataset]) -> RunSummary:
    evaluation = evaluate_pass_at_1(result.params, benchmarks, cfg.eval.decode, eval_length(cfg), cfg.seed)
    first, last = result.reward_means()
    return RunSummary(
        run_id=run_id,
        ratio_x=cfg.train.skip.ratio_x,
        border_b=cfg.train.skip.border_b,
        mitigation=cfg.train.mitigation.tag.value,
        lam=cfg.train.mitigation.lam,
        sft_initial_loss=result.sft_initial_loss,
        sft_final_loss=result.sft_final_loss,
        reft_steps=cfg.train.reft_steps,
        reft_epochs=result.reft_epochs,
        first_rewards_mean=first,
        last_rewards_mean=last,
        generated_tokens=result.generated_tokens,
        generation_seconds=result.generation_seconds,
        total_seconds=result.total_seconds,
        eval=evaluation,
    )


def write_summary(summary: RunSummary, run_dir: Path) -> Path:
    path = Path(run_dir) / SUMMARY_FILE
    path.write_text(summary.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def read_summary(run_dir: Path) -> RunSummary:
    path = Path(run_dir) / SUMMARY_FILE
    if not path.exists():
        raise FileNotFoundError(f"no run summary in {run_dir}")
    return RunSummary.model_validate_json(path.read_text(encoding="utf-8"))


def run_instance(
    cfg: RunConfig,
    run_id: str,
    run_dir: Path,
    train: Dataset,
    benchmarks: Sequence[Dataset],
    sft: Optional[SftResult] = None,
) -> RunSummary:
    writer = MetricsWriter(run_dir, run_id, fresh=True)
    started = time.perf_counter()
    result = run_training(cfg, train, run_dir, writer, run_id, sft=sft)
    summary = build_summary(cfg, run_id, result, benchmarks)
    summary.total_seconds = time.perf_counter() - started
    write_summary(summary, run_dir)
    logger.info(
        "Instance finished",
        extra={"ctx": {"run_id": run_id, "instance": instance_label(summary), "accuracy": f"{summary.eval.aggregate:.4f}"}},
    )
    return summary


def instance_config(base: RunConfig, ratio_x: float, border_b: int, mode: MitigationMode) -> RunConfig:
    train = base.train.model_copy(
        update={
            "skip": base.train.skip.model_copy(update={"ratio_x": ratio_x, "border_b": border_b}),
            "mitigation": mode,
        }
    )
    updated = base.model_copy(update={"train": train})
    return RunConfig.model_validate(updated.model_dump())


def sweep_grid(cfg: RunConfig) -> List[Tuple[str, RunConfig]]:
    """The baseline (x=0, b=0, base) followed by one instance per (ratio, mode) pair."""
    baseline = instance_config(cfg, 0.0, 0, MitigationMode(tag=MitigationTag.BASE))
    grid = [("baseline", baseline)]
    for ratio in cfg.sweep.ratios:
        for mode in cfg.sweep.modes:
            name = f"x{ratio:g}_{mode.tag.value}" + (f"{mode.lam:g}" if mode.lam is not None else "")
            grid.append((name, instance_config(cfg, ratio, cfg.sweep.border_b, mode)))
    return grid


@dataclass
class SweepResult:
    baseline: RunSummary
    instances: List[RunSummary] = field(default_factory=list)
    deltas: List[Tuple[str, List[DeltaReport]]] = field(default_factory=list)
    extremes: Optional[ExtremesTable] = None
    stability: List[StabilityTally] = field(default_factory=list)


def run_sweep(
    cfg: RunConfig, run_id: str, run_dir: Path, train: Dataset, benchmarks: Sequence[Dataset]
) -> SweepResult:
    """SFT runs once; every instance starts ReFT from the shared SFT parameters."""
    run_dir = Path(run_dir)
    sft_writer = MetricsWriter(run_dir / "sft", run_id, fresh=True)
    sft = run_sft(cfg, train, sft_writer, run_id)

    summaries: Dict[str, RunSummary] = {}
    grid = sweep_grid(cfg)
    for index, (name, instance_cfg) in enumerate(grid, start=1):
        logger.info("Sweep instance", extra={"ctx": {"index": index, "of": len(grid), "name": name}})
        summaries[name] = run_instance(instance_cfg, f"{run_id}-{name}", run_dir / name, train, benchmarks, sft=sft)

    baseline = summaries.pop("baseline")
    instances = list(summaries.values())
    result = SweepResult(baseline=baseline, instances=instances)
    result.deltas = [
        (instance_label(s), delta_report(s.report_metrics(), baseline.report_metrics())) for s in [baseline, *instances]
    ]
    if instances:
        result.extremes = summarize_extremes(instances, baseline)
        result.stability = mitigation_stability(instances, baseline, cfg.sweep.neutral_threshold)
    return result

