from collections import defaultdict
from pathlib import Path
from typing import List, Optional

import numpy as np
import typer

from app.cli.deps import (
    ConfigOption,
    OutOption,
    SeedOption,
    SetOption,
    handle_service_errors,
    load_datasets,
    load_run_config,
    open_writer,
    prepare_run_dir,
)
from app.core.errors import ConfigurationError
from app.core.seeding import stream
from app.models.common import Phase
from app.models.metrics import MetricsRecord
from app.services.eval_bench import (
    check_throughput_scaling,
    delta_report,
    evaluate_pass_at_1,
    instance_label,
    measure_throughput,
    mode_label,
)
from app.services.experiment import eval_length, read_summary
from app.services.report_service import (
    delta_records,
    render_delta_table,
    render_throughput,
    render_throughput_chart,
    write_jsonl,
    write_text,
)
from app.services.trainer import FINAL_CHECKPOINT
from app.services.transformer import init_params, load_checkpoint

router = typer.Typer()


def _next_step(writer, phase: Phase) -> int:
    last = writer.last_step(phase)
    return 1 if last is None else last + 1


@router.command("eval")
@handle_service_errors
def cmd_eval(
    config: Optional[Path] = ConfigOption,
    overrides: Optional[List[str]] = SetOption,
    out: Optional[Path] = OutOption,
    seed: Optional[int] = SeedOption,
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", help="Defaults to <run dir>/final.npz"),
):
    """pass@1 accuracy per benchmark tier and aggregated."""
    cfg = load_run_config(config, overrides, seed, out)
    run_dir = prepare_run_dir(cfg)
    _, benchmarks = load_datasets(cfg)
    params = load_checkpoint(checkpoint or run_dir / FINAL_CHECKPOINT)

    result = evaluate_pass_at_1(params, benchmarks, cfg.eval.decode, eval_length(cfg), cfg.seed)
    writer = open_writer(run_dir, cfg)
    writer.append(
        MetricsRecord(
            run_id=cfg.run_id,
            phase=Phase.EVAL,
            step=_next_step(writer, Phase.EVAL),
            values={
                "aggregate": result.aggregate,
                **{name: acc for name, acc in zip(result.benchmark_names, result.benchmark_accuracies)},
            },
        )
    )
    (run_dir / "eval.json").write_text(result.model_dump_json(indent=2) + "\n", encoding="utf-8")
    for name, acc in zip(result.benchmark_names, result.benchmark_accuracies):
        typer.echo(f"{name}: {acc:.4f}")
    typer.echo(f"aggregate: {result.aggregate:.4f}")


@router.command("throughput")
@handle_service_errors
def cmd_throughput(
    config: Optional[Path] = ConfigOption,
    overrides: Optional[List[str]] = SetOption,
    out: Optional[Path] = OutOption,
    seed: Optional[int] = SeedOption,
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", help="Defaults to freshly initialized weights"),
):
    """Generation tokens/sec for each skip count on one fixed workload."""
    cfg = load_run_config(config, overrides, seed, out)
    run_dir = prepare_run_dir(cfg)
    train, _ = load_datasets(cfg)
    params = load_checkpoint(checkpoint) if checkpoint else init_params(cfg.model, stream(cfg.seed, "init"))
    prompts = np.array([p.prompt for p in train.problems[: cfg.throughput.num_prompts]], dtype=np.int64)

    samples = measure_throughput(params, cfg.throughput, prompts, cfg.seed)
    check = check_throughput_scaling(samples, params.config.num_layers)

    writer = open_writer(run_dir, cfg)
    first = _next_step(writer, Phase.THROUGHPUT)
    for offset, sample in enumerate(samples):
        writer.append(
            MetricsRecord(
                run_id=cfg.run_id,
                phase=Phase.THROUGHPUT,
                step=first + offset,
                values={"skipped_layers": float(sample.skipped_layers), "workers": float(sample.workers)},
                tokens=sample.total_tokens,
                wall_seconds=sample.wall_seconds,
            )
        )
    write_jsonl(run_dir / "throughput.jsonl", [s.model_dump() for s in samples])
    table = render_throughput(samples)
    write_text(run_dir / "throughput.txt", table + f"\n\n{check.status.value} {check.name} " + str(check.details))
    ratios = [s.skipped_layers / params.config.num_layers for s in samples]
    render_throughput_chart([("generation", ratios, [s.tokens_per_sec for s in samples])], run_dir / "throughput.svg")
    typer.echo(table)
    typer.echo(f"{check.status.value} {check.name} r2={check.details['r2']:.3f}")


@router.command("report")
@handle_service_errors
def cmd_report(
    baseline: Path = typer.Option(..., "--baseline", help="Run directory of the baseline instance"),
    runs: List[Path] = typer.Option(..., "--run", help="Run directory to compare (repeatable)"),
    out: Optional[Path] = OutOption,
):
    """Δ table (text + JSONL) and tokens/sec chart for finished runs against a baseline."""
    if not runs:
        raise ConfigurationError("at least one --run directory is required")
    base = read_summary(baseline)
    summaries = [read_summary(run) for run in runs]
    rows = [(instance_label(s), delta_report(s.report_metrics(), base.report_metrics())) for s in summaries]

    out_dir = Path(out) if out is not None else Path(runs[0]) / "report"
    table = render_delta_table(rows)
    write_text(out_dir / "deltas.txt", table)
    write_jsonl(out_dir / "deltas.jsonl", delta_records(rows))

    series = defaultdict(list)
    for s in [base, *summaries]:
        series[mode_label(s)].append((s.ratio_x, s.tokens_per_sec))
    render_throughput_chart(
        [(label, [r for r, _ in sorted(points)], [t for _, t in sorted(points)]) for label, points in series.items()],
        out_dir / "tokens_per_sec.svg",
    )
    typer.echo(table)
