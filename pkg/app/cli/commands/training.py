import time
from pathlib import Path
from typing import List, Optional

import typer

from app.core.errors import ConfigurationError
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
from app.services.experiment import build_summary, write_summary
from app.services.trainer import SFT_CHECKPOINT, SftResult, run_sft, run_training
from app.services.transformer import load_checkpoint, save_checkpoint

router = typer.Typer()


@router.command("sft")
@handle_service_errors
def cmd_sft(
    config: Optional[Path] = ConfigOption,
    overrides: Optional[List[str]] = SetOption,
    out: Optional[Path] = OutOption,
    seed: Optional[int] = SeedOption,
):
    """Supervised warm-up on the reference chains of thought."""
    cfg = load_run_config(config, overrides, seed, out)
    run_dir = prepare_run_dir(cfg)
    train, _ = load_datasets(cfg)
    result = run_sft(cfg, train, open_writer(run_dir, cfg, fresh=True), cfg.run_id)
    path = save_checkpoint(result.params, run_dir / SFT_CHECKPOINT)
    typer.echo(f"sft done: steps={result.steps} initial_loss={result.initial_loss} final_loss={result.final_loss}")
    typer.echo(f"checkpoint: {path}")


@router.command("reft")
@handle_service_errors
def cmd_reft(
    config: Optional[Path] = ConfigOption,
    overrides: Optional[List[str]] = SetOption,
    out: Optional[Path] = OutOption,
    seed: Optional[int] = SeedOption,
    sft_checkpoint: Optional[Path] = typer.Option(None, "--from", help="Start from this SFT checkpoint"),
):
    """Runs S nested-behavior ReFT steps, then pass@1 evaluation. Runs SFT first unless --from is given."""
    cfg = load_run_config(config, overrides, seed, out)
    run_dir = prepare_run_dir(cfg)
    train, benchmarks = load_datasets(cfg)
    writer = open_writer(run_dir, cfg, fresh=True)

    started = time.perf_counter()
    sft = None
    if sft_checkpoint is not None:
        params = load_checkpoint(sft_checkpoint)
        if params.config != cfg.model:
            raise ConfigurationError(f"checkpoint {sft_checkpoint} was trained with a different model config")
        sft = SftResult(params=params)
    result = run_training(cfg, train, run_dir, writer, cfg.run_id, sft=sft)
    summary = build_summary(cfg, cfg.run_id, result, benchmarks)
    summary.total_seconds = time.perf_counter() - started
    write_summary(summary, run_dir)

    typer.echo(
        f"reft done: steps={cfg.train.reft_steps} mode={cfg.train.mitigation.label} "
        f"x={cfg.train.skip.ratio_x:g} b={cfg.train.skip.border_b}"
    )
    typer.echo(
        f"rewards first={summary.first_rewards_mean} last={summary.last_rewards_mean} "
        f"accuracy={summary.eval.aggregate:.4f} tokens/sec={summary.tokens_per_sec:.1f}"
    )
