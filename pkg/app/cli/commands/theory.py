from pathlib import Path
from typing import List, Optional

import typer

from app.cli.deps import ConfigOption, OutOption, SeedOption, SetOption, handle_service_errors, load_run_config, prepare_run_dir
from app.core.errors import EXIT_THEORY_FAIL
from app.services.report_service import render_theory_report, write_jsonl, write_text
from app.services.theory_checks import run_theory_suite

router = typer.Typer()

THEORY_REPORT = "theory_report"


@router.command("theory")
@handle_service_errors
def cmd_theory(
    config: Optional[Path] = ConfigOption,
    overrides: Optional[List[str]] = SetOption,
    out: Optional[Path] = OutOption,
    seed: Optional[int] = SeedOption,
):
    """Exact-enumeration and Monte Carlo checks of the off-policy estimators on a micro model.

    Exits with code 3 when any check fails.
    """
    cfg = load_run_config(config, overrides, seed, out)
    run_dir = prepare_run_dir(cfg)
    report = run_theory_suite(cfg.theory, cfg.seed)

    text = render_theory_report(report)
    write_text(run_dir / f"{THEORY_REPORT}.txt", text)
    write_jsonl(run_dir / f"{THEORY_REPORT}.jsonl", [check.model_dump(mode="json") for check in report.checks])
    typer.echo(text)
    if not report.passed:
        raise typer.Exit(code=EXIT_THEORY_FAIL)
