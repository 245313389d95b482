from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.models.common import MitigationTag, Precision


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelConfig(StrictModel):
    num_layers: int = Field(default=8, ge=3, description="|T_eta|, number of transformer blocks")
    width: int = Field(default=64, ge=1, description="hidden dimension d")
    num_heads: int = Field(default=4, ge=1)
    vocab_size: int = Field(default=18, ge=2)
    max_sequence_length: int = Field(default=48, ge=2)
    mlp_ratio: int = Field(default=4, ge=1)
    init_scale: float = Field(default=0.02, gt=0)
    precision: Precision = Precision.FLOAT32

    @model_validator(mode="after")
    def check_heads(self) -> "ModelConfig":
        if self.width % self.num_heads != 0:
            raise ValueError(f"width {self.width} is not divisible by num_heads {self.num_heads}")
        return self


class SkipConfig(StrictModel):
    ratio_x: float = Field(default=0.0, ge=0.0, lt=1.0)
    border_b: int = Field(default=1, ge=0)
    num_layers: int = Field(default=8, ge=1)

    @model_validator(mode="after")
    def check_valid_set(self) -> "SkipConfig":
        # Imported lazily: the layer-skip service depends on this model.
        from app.services.layer_skip import skip_count

        skip_count(self)
        return self


class MitigationMode(StrictModel):
    tag: MitigationTag = MitigationTag.BASE
    lam: Optional[float] = Field(default=None, gt=0.0, le=1.0, description="Retrace lambda")

    @model_validator(mode="before")
    @classmethod
    def default_lambda(cls, data: Any) -> Any:
        if isinstance(data, str):
            data = {"tag": data}
        if isinstance(data, dict) and str(data.get("tag", "")).lower() == MitigationTag.RETRACE.value:
            if data.get("lam") is None:
                data = {**data, "lam": 1.0}
        return data

    @model_validator(mode="after")
    def check_lambda(self) -> "MitigationMode":
        if (self.tag == MitigationTag.RETRACE) != (self.lam is not None):
            raise ValueError("lam must be set exactly when tag is 'retrace'")
        return self

    @property
    def label(self) -> str:
        if self.tag == MitigationTag.RETRACE:
            return f"retrace(lam={self.lam:g})"
        return self.tag.value


class DataConfig(StrictModel):
    operand_digits: int = Field(default=2, ge=1, le=3)
    n_train: int = Field(default=2000, ge=1)
    n_bench_per_task: int = Field(default=100, ge=1)
    k_benchmarks: int = Field(default=2, ge=1)


class TrainConfig(StrictModel):
    sft_epochs: int = Field(default=2, ge=0)
    sft_batch_size: int = Field(default=16, ge=1)
    sft_learning_rate: float = Field(default=3e-3, ge=0.0)

    reft_steps: int = Field(default=99, ge=0)
    batch_size: int = Field(default=16, ge=1)
    group_size: int = Field(default=8, ge=1)
    completion_length: int = Field(default=32, ge=1)
    skip: SkipConfig = Field(default_factory=SkipConfig)
    mitigation: MitigationMode = Field(default_factory=MitigationMode)

    learning_rate: float = Field(default=1e-3, ge=0.0)
    lr_schedule: Literal["constant", "inverse"] = "constant"
    adam_beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)

    kl_beta: float = 0.0
    normalize_advantages: bool = True
    advantage_eps: float = Field(default=1e-4, gt=0.0)
    ratio_clamp: float = Field(default=1e4, gt=1.0)

    @field_validator("kl_beta")
    @classmethod
    def no_kl_penalty(cls, value: float) -> float:
        if value != 0.0:
            raise ValueError("kl_beta must be 0 (no KL penalty is used)")
        return value

    @model_validator(mode="after")
    def check_group(self) -> "TrainConfig":
        if self.normalize_advantages and self.group_size < 2:
            raise ValueError("group_size must be >= 2 when group-normalized advantages are enabled")
        return self


class DecodeConfig(StrictModel):
    temperature: float = Field(default=0.6, gt=0.0)
    top_p: float = Field(default=0.95, gt=0.0, le=1.0)


class EvalConfig(StrictModel):
    decode: DecodeConfig = Field(default_factory=DecodeConfig)
    completion_length: Optional[int] = Field(default=None, ge=1, description="defaults to train.completion_length")


class ThroughputConfig(StrictModel):
    skip_counts: List[int] = Field(default_factory=lambda: [0, 1, 2, 3])
    border_b: int = Field(default=1, ge=0)
    num_prompts: int = Field(default=16, ge=1)
    group_size: int = Field(default=8, ge=1)
    completion_length: int = Field(default=32, ge=1)
    repetitions: int = Field(default=3, ge=1)
    warmup: int = Field(default=1, ge=0)


class TheoryConfig(StrictModel):
    vocab_size: int = Field(default=5, ge=2, le=6)
    num_layers: int = Field(default=4, ge=3, le=4)
    width: int = Field(default=8, ge=2, le=16)
    num_heads: int = Field(default=2, ge=1)
    init_scale: float = Field(default=1.0, gt=0.0)
    prompt: List[int] = Field(default_factory=lambda: [0, 1])
    completion_length: int = Field(default=4, ge=1, le=5)
    ensemble: List[List[int]] = Field(default_factory=lambda: [[1], [2], [1, 2]])
    negative_control: List[List[int]] = Field(default_factory=lambda: [[1, 2]])
    target_token: int = Field(default=0, ge=0, description="f(seq) = 1[last token == target_token]")
    n_samples: int = Field(default=100_000, ge=100)
    tolerance: float = Field(default=1e-9, gt=0.0)
    lam: float = Field(default=0.9, gt=0.0, le=1.0)
    gradient_param: str = "w_out"
    gradient_index: List[int] = Field(default_factory=lambda: [0, 0])

    @model_validator(mode="after")
    def check_enumerable(self) -> "TheoryConfig":
        if self.vocab_size ** self.completion_length > 100_000:
            raise ValueError("vocab_size ** completion_length exceeds the enumeration bound 1e5")
        if any(tok >= self.vocab_size for tok in self.prompt) or self.target_token >= self.vocab_size:
            raise ValueError("theory prompt/target tokens must be < vocab_size")
        return self


class SweepConfig(StrictModel):
    ratios: List[float] = Field(default_factory=lambda: [0.0, 0.125, 0.25, 0.375])
    modes: List[MitigationMode] = Field(
        default_factory=lambda: [
            MitigationMode(tag=MitigationTag.BASE),
            MitigationMode(tag=MitigationTag.PRACTICAL),
            MitigationMode(tag=MitigationTag.RETRACE, lam=1.0),
        ]
    )
    border_b: int = Field(default=1, ge=0)
    neutral_threshold: float = Field(default=0.01, ge=0.0)


class RunConfig(StrictModel):
    run_id: Optional[str] = None
    seed: int = 1234
    output_dir: Optional[Path] = None
    model: ModelConfig = Field(default_factory=ModelConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    throughput: ThroughputConfig = Field(default_factory=ThroughputConfig)
    theory: TheoryConfig = Field(default_factory=TheoryConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)

    @model_validator(mode="before")
    @classmethod
    def share_layer_count(cls, data: Any) -> Any:
        """The skip config always describes the configured model depth."""
        if not isinstance(data, dict):
            return data
        model = data.get("model") or {}
        train = data.get("train") or {}
        if isinstance(model, dict) and isinstance(train, dict):
            skip = train.get("skip") or {}
            if isinstance(skip, dict) and "num_layers" not in skip:
                layers = model.get("num_layers", ModelConfig.model_fields["num_layers"].default)
                data = {**data, "train": {**train, "skip": {**skip, "num_layers": layers}}}
        return data

    @model_validator(mode="after")
    def check_consistency(self) -> "RunConfig":
        if self.train.skip.num_layers != self.model.num_layers:
            raise ValueError("train.skip.num_layers must equal model.num_layers")
        return self

    def canonical(self) -> Dict[str, Any]:
        """JSON-compatible dump used for hashing and for the stored run config."""
        return self.model_dump(mode="json")
