from collections import defaultdict
from pathlib import Path
from typing import List, Optional

import typer

from app.cli.deps import (
    ConfigOption,
    OutOption,
    SeedOption,
    SetOption,
    handle_service_errors,
    load_datasets,
    load_run_config,
    prepare_run_dir,
)
from app.services.eval_bench import mode_label
from app.services.experiment import run_sweep
from app.services.report_service import (
    delta_records,
    render_delta_table,
    render_extremes,
    render_stability,
    render_throughput_chart,
    write_jsonl,
    write_text,
)

router = typer.Typer()


@router.command("sweep")
@handle_service_errors
def cmd_sweep(
    config: Optional[Path] = ConfigOption,
    overrides: Optional[List[str]] = SetOption,
    out: Optional[Path] = OutOption,
    seed: Optional[int] = SeedOption,
):
    """Baseline plus every (skip ratio, mitigation) instance from one shared SFT checkpoint."""
    cfg = load_run_config(config, overrides, seed, out)
    run_dir = prepare_run_dir(cfg)
    train, benchmarks = load_datasets(cfg)
    result = run_sweep(cfg, cfg.run_id, run_dir, train, benchmarks)

    table = render_delta_table(result.deltas)
    write_text(run_dir / "deltas.txt", table)
    write_jsonl(run_dir / "deltas.jsonl", delta_records(result.deltas))
    sections = [table]
    if result.extremes is not None:
        extremes = render_extremes(result.extremes)
        stability = render_stability(result.stability)
        write_text(run_dir / "extremes.txt", extremes)
        write_text(run_dir / "stability.txt", stability)
        sections += [extremes, stability]

    series = defaultdict(list)
    for summary in result.instances:
        series[mode_label(summary)].append((summary.ratio_x, summary.tokens_per_sec))
    render_throughput_chart(
        [(label, [r for r, _ in sorted(points)], [t for _, t in sorted(points)]) for label, points in series.items()],
        run_dir / "tokens_per_sec.svg",
    )
    typer.echo("\n\n".join(sections))
