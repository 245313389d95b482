import typer

from app.cli.commands import evaluation, sweep, theory, training

cli_router = typer.Typer()
cli_router.add_typer(training.router)
cli_router.add_typer(evaluation.router)
cli_router.add_typer(theory.router)
cli_router.add_typer(sweep.router)
