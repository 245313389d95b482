from typing import Dict, List, Optional

from pydantic import BaseModel, Field, model_validator

from app.models.common import CheckStatus, Phase


class MetricsRecord(BaseModel):
    """One line of the append-only metrics log.

    Wall-clock fields are excluded from the serialized line so identical config + seed
    yields byte-identical logs; they are written to the timings sidecar instead.
    """

    run_id: str
    phase: Phase
    step: int
    status: str = "ok"
    loss: Optional[float] = None
    mean_reward: Optional[float] = None
    skip_indices: List[int] = Field(default_factory=list)
    mitigation: Optional[str] = None
    lam: Optional[float] = None
    clamp_count: int = 0
    mean_weight: Optional[float] = None
    values: Dict[str, float] = Field(default_factory=dict)

    tokens: int = Field(default=0, exclude=True)
    wall_seconds: float = Field(default=0.0, exclude=True)

    @property
    def tokens_per_sec(self) -> float:
        return self.tokens / self.wall_seconds if self.wall_seconds > 0 else 0.0


class TimingRecord(BaseModel):
    run_id: str
    phase: Phase
    step: int
    tokens: int
    wall_seconds: float
    tokens_per_sec: float


class ThroughputSample(BaseModel):
    skipped_layers: int
    total_tokens: int
    wall_seconds: float
    tokens_per_sec: float
    repetitions: List[float] = Field(default_factory=list)
    workers: int = 1

    @model_validator(mode="after")
    def check_rate(self) -> "ThroughputSample":
        if self.wall_seconds > 0 and abs(self.tokens_per_sec - self.total_tokens / self.wall_seconds) > 1e-6 * max(1.0, self.tokens_per_sec):
            raise ValueError("tokens_per_sec must equal total_tokens / wall_seconds")
        return self


class DeltaReport(BaseModel):
    metric: str
    value: float
    baseline: float
    delta: Optional[float] = Field(default=None, description="relative delta in percent")
    delta_abs: float
    absolute_only: bool = False


class EvalResult(BaseModel):
    benchmark_names: List[str] = Field(default_factory=list)
    benchmark_accuracies: List[float]
    aggregate: float
    decode_temperature: float
    decode_top_p: float


class RunSummary(BaseModel):
    run_id: str
    ratio_x: float
    border_b: int
    mitigation: str
    lam: Optional[float] = None
    sft_initial_loss: Optional[float] = None
    sft_final_loss: Optional[float] = None
    reft_steps: int = 0
    reft_epochs: float = 0.0
    first_rewards_mean: Optional[float] = None
    last_rewards_mean: Optional[float] = None
    generated_tokens: int = 0
    generation_seconds: float = 0.0
    total_seconds: float = 0.0
    eval: Optional[EvalResult] = None

    @property
    def tokens_per_sec(self) -> float:
        return self.generated_tokens / self.generation_seconds if self.generation_seconds > 0 else 0.0

    def report_metrics(self) -> Dict[str, float]:
        """Metrics compared against the baseline in Δ reports."""
        metrics = {
            "tokens_per_sec": self.tokens_per_sec,
            "runtime_total_s": self.total_seconds,
            "runtime_generation_s": self.generation_seconds,
        }
        if self.eval is not None:
            metrics["accuracy"] = self.eval.aggregate
        return metrics


class CheckResult(BaseModel):
    name: str
    status: CheckStatus
    estimate: Optional[float] = None
    exact: Optional[float] = None
    standard_error: Optional[float] = None
    band: Optional[float] = None
    details: Dict[str, float] = Field(default_factory=dict)


class TheoryReport(BaseModel):
    checks: List[CheckResult] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.status != CheckStatus.FAIL for check in self.checks)


class ExtremeRow(BaseModel):
    instance: str
    benchmark_deltas: List[float]
    mean_abs_delta: float


class ExtremesTable(BaseModel):
    """Best and worst instance by aggregate accuracy change, with per-benchmark Δ_abs."""

    benchmarks: List[str]
    best: ExtremeRow
    worst: ExtremeRow


class StabilityTally(BaseModel):
    mitigation: str
    best: int = 0
    worst: int = 0
    neutral: int = 0
