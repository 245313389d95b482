import pytest

from app.core.config import settings
from app.core.seeding import stream
from app.models.common import Precision
from app.models.config import ModelConfig, RunConfig
from app.services.task_suite import VOCAB_SIZE, generate_dataset
from app.services.transformer import init_params


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "RUNS_ROOT", tmp_path / "runs")
    monkeypatch.setattr(settings, "DEFAULT_CONFIG_PATH", tmp_path / "missing.yaml")
    monkeypatch.setattr(settings, "NUM_WORKERS", 1)
    monkeypatch.setattr(settings, "FSYNC_METRICS", False)
    monkeypatch.setattr(settings, "SHOW_PROGRESS", False)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(
        num_layers=4,
        width=8,
        num_heads=2,
        vocab_size=VOCAB_SIZE,
        max_sequence_length=24,
        mlp_ratio=2,
        init_scale=0.5,
    )


@pytest.fixture
def tiny_params(tiny_model_config):
    return init_params(tiny_model_config, stream(0, "init"))


@pytest.fixture
def tiny_params64(tiny_model_config):
    config = tiny_model_config.model_copy(update={"precision": Precision.FLOAT64})
    return init_params(config, stream(0, "init"))


@pytest.fixture
def one_digit_data():
    """1-digit addition: prompts of 6 tokens, chains of thought of at most 7."""
    return generate_dataset(seed=3, n_train=40, n_bench_per_task=10, k_benchmarks=2, operand_digits=1)


@pytest.fixture
def tiny_run_config(tmp_path):
    return RunConfig.model_validate(
        {
            "seed": 7,
            "output_dir": str(tmp_path / "run"),
            "model": {"num_layers": 4, "width": 8, "num_heads": 2, "max_sequence_length": 24, "mlp_ratio": 2, "init_scale": 0.5},
            "data": {"operand_digits": 1, "n_train": 40, "n_bench_per_task": 10, "k_benchmarks": 2},
            "train": {
                "sft_epochs": 1,
                "sft_batch_size": 8,
                "reft_steps": 3,
                "batch_size": 4,
                "group_size": 4,
                "completion_length": 12,
                "skip": {"ratio_x": 0.25, "border_b": 1},
            },
            "eval": {"completion_length": 12},
            "throughput": {"skip_counts": [0, 1, 2], "num_prompts": 2, "group_size": 2, "completion_length": 4, "repetitions": 1, "warmup": 0},
            "theory": {"n_samples": 20000, "completion_length": 3},
            "sweep": {"ratios": [0.0, 0.25], "modes": ["base", "practical", {"tag": "retrace", "lam": 1.0}]},
        }
    )
