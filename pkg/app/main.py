from typing import Optional

import typer

from app.cli.router import cli_router
from app.core.config import settings
from app.core.logging import configure_logging

app = typer.Typer(
    name=settings.PROJECT_NAME,
    help="Nested-ReFT: layer-skipping off-policy RL fine-tuning of a small transformer on synthetic arithmetic.",
    no_args_is_help=True,
    add_completion=False,
)


@app.callback()
def main(
    log_level: Optional[str] = typer.Option(None, "--log-level", help="Overrides NREFT_LOG_LEVEL"),
    log_format: Optional[str] = typer.Option(None, "--log-format", help="text or json"),
):
    configure_logging(log_level, log_format)


app.add_typer(cli_router)
