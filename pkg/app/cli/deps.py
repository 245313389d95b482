import functools
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import typer
import yaml
from pydantic import ValidationError

from app.core.config import settings
from app.core.errors import (
    EXIT_RUNTIME,
    EXIT_USAGE,
    ConfigurationError,
    NestedReftError,
    exit_code_for,
)
from app.models.config import RunConfig
from app.models.task import Dataset
from app.services.metrics_service import MetricsWriter
from app.services.task_suite import generate_dataset

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.yaml"

ConfigOption = typer.Option(None, "--config", "-c", help="YAML run configuration")
SetOption = typer.Option(None, "--set", help="Override a config key: dotted.key=value (repeatable)")
OutOption = typer.Option(None, "--out", help="Output directory (defaults to RUNS_ROOT/<run id>)")
SeedOption = typer.Option(None, "--seed", help="Master seed")


def read_yaml(path: Path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config must be a mapping, got {type(raw).__name__}")
    return raw


def apply_override(raw: Dict[str, Any], assignment: str) -> None:
    """Sets `a.b.c=value` in place; the value is parsed with YAML scalar rules."""
    key, sep, value = assignment.partition("=")
    if not sep or not key.strip():
        raise ConfigurationError(f"override must look like dotted.key=value, got {assignment!r}")
    parts = key.strip().split(".")
    node = raw
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigurationError(f"cannot set {key}: {part} is not a section")
        node = child
    node[parts[-1]] = yaml.safe_load(value)


def describe_validation_error(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"{location}: {item['msg']}")
    return "invalid configuration:\n  " + "\n  ".join(lines)


def compute_run_id(cfg: RunConfig) -> str:
    payload = cfg.canonical()
    payload.pop("run_id", None)
    payload.pop("output_dir", None)
    digest = hashlib.sha256(json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8"))
    return digest.hexdigest()[:12]


def load_run_config(
    config_path: Optional[Path],
    overrides: Optional[List[str]] = None,
    seed: Optional[int] = None,
    out: Optional[Path] = None,
) -> RunConfig:
    path = config_path
    if path is None and settings.DEFAULT_CONFIG_PATH.exists():
        path = settings.DEFAULT_CONFIG_PATH
    raw = read_yaml(path) if path is not None else {}
    for assignment in overrides or []:
        apply_override(raw, assignment)
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["output_dir"] = str(out)
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigurationError(describe_validation_error(exc)) from exc
    if cfg.run_id is None:
        cfg = cfg.model_copy(update={"run_id": compute_run_id(cfg)})
    return cfg


def prepare_run_dir(cfg: RunConfig) -> Path:
    """Creates the run directory and stores the resolved config before any work starts."""
    run_dir = Path(cfg.output_dir) if cfg.output_dir is not None else settings.RUNS_ROOT / cfg.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    stored = cfg.canonical()
    stored["output_dir"] = None
    (run_dir / CONFIG_FILE).write_text(yaml.safe_dump(stored, sort_keys=True), encoding="utf-8")
    logger.info("Run directory ready", extra={"ctx": {"run_id": cfg.run_id, "path": str(run_dir)}})
    return run_dir


def open_writer(run_dir: Path, cfg: RunConfig, fresh: bool = False) -> MetricsWriter:
    """Training verbs start a fresh log; eval and throughput append to the run they measure."""
    return MetricsWriter(run_dir, cfg.run_id, fresh=fresh)


def load_datasets(cfg: RunConfig) -> Tuple[Dataset, List[Dataset]]:
    return generate_dataset(
        cfg.seed, cfg.data.n_train, cfg.data.n_bench_per_task, cfg.data.k_benchmarks, cfg.data.operand_digits
    )


def handle_service_errors(func: Callable) -> Callable:
    """Maps service exceptions to exit codes at the command boundary."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except typer.Exit:
            raise
        except NestedReftError as exc:
            typer.echo(f"error: {exc}", err=True)
            raise typer.Exit(code=exit_code_for(exc)) from exc
        except FileNotFoundError as exc:
            typer.echo(f"error: {exc}", err=True)
            raise typer.Exit(code=EXIT_USAGE) from exc
        except Exception as exc:
            logger.exception("Command failed")
            typer.echo(f"error: {exc}", err=True)
            raise typer.Exit(code=EXIT_RUNTIME) from exc

    return wrapper
