"""Nested ReFT trainer: SFT warm-up, then S GRPO-style steps on nested-behavior rollouts."""
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from app.core.config import settings
from app.core.errors import ContractError, TrainingError
from app.core.seeding import stream
from app.models.common import MitigationTag, Phase
from app.models.config import MitigationMode, RunConfig, TrainConfig
from app.models.metrics import MetricsRecord
from app.models.task import Dataset
from app.services import autodiff as ad
from app.services.autodiff import Tape, Tensor
from app.services.layer_skip import sample_mask
from app.services.metrics_service import MetricsWriter
from app.services.off_policy import apply_mitigation, sequence_log_ratio
from app.services.optim import Adam
from app.services.rollout_service import RolloutBatch, generate_rollouts, score_rollouts
from app.services.task_suite import reference_completion, value_lookup
from app.services.transformer import (
    PolicyParams,
    completion_token_logprobs,
    init_params,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

SFT_CHECKPOINT = "sft.npz"
FINAL_CHECKPOINT = "final.npz"
REWARD_WINDOW = 10


@dataclass(frozen=True)
class AdvantageGroup:
    rewards: np.ndarray
    advantages: np.ndarray


def group_advantages(rewards: Sequence[float], eps: float = 1e-4) -> AdvantageGroup:
    """A_g = (r_g - mean) / (std + eps) with the population std of the group."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ContractError("group-normalized advantages need at least two rewards")
    return AdvantageGroup(rewards=r, advantages=(r - r.mean()) / (r.std() + eps))


def batch_advantages(grouped_rewards: np.ndarray, normalize: bool = True, eps: float = 1e-4) -> np.ndarray:
    """Advantages for an (M, G) reward matrix, flattened prompt-major."""
    if normalize:
        return np.concatenate([group_advantages(row, eps).advantages for row in grouped_rewards])
    return (grouped_rewards - grouped_rewards.mean(axis=1, keepdims=True)).reshape(-1)


@dataclass
class SftResult:
    params: PolicyParams
    initial_loss: Optional[float] = None
    final_loss: Optional[float] = None
    steps: int = 0


def _sft_arrays(dataset: Dataset, length: int) -> Tuple[np.ndarray, np.ndarray]:
    prompts = np.array([p.prompt for p in dataset.problems], dtype=np.int64)
    targets = np.array([reference_completion(p, length) for p in dataset.problems], dtype=np.int64)
    return prompts, targets


def sft_loss(params: PolicyParams, prompts: np.ndarray, targets: np.ndarray) -> Tensor:
    """Cross-entropy per reference token given the true prefix, averaged."""
    return -completion_token_logprobs(params, prompts, targets).mean()


def dataset_loss(params: PolicyParams, dataset: Dataset, length: int, chunk: int = 256) -> float:
    prompts, targets = _sft_arrays(dataset, length)
    total = 0.0
    for lo in range(0, prompts.shape[0], chunk):
        part = sft_loss(params, prompts[lo:lo + chunk], targets[lo:lo + chunk]).item()
        total += part * (min(lo + chunk, prompts.shape[0]) - lo)
    return total / prompts.shape[0]


def _abort(writer: Optional[MetricsWriter], run_id: str, phase: Phase, step: int, message: str) -> TrainingError:
    logger.error(message, extra={"ctx": {"phase": phase.value, "step": step}})
    if writer is not None:
        writer.append(MetricsRecord(run_id=run_id, phase=phase, step=step, status="nan_abort"))
    return TrainingError(message, step=step, phase=phase.value)


def sft_train(
    params: PolicyParams,
    dataset: Dataset,
    epochs: int,
    cfg: TrainConfig,
    seed: int,
    writer: Optional[MetricsWriter] = None,
    run_id: str = "",
) -> SftResult:
    """Supervised warm-up: cross-entropy on the padded reference CoTs, fed the true previous token."""
    if epochs < 0:
        raise ContractError("epochs must be >= 0")
    if epochs == 0 or len(dataset) == 0:
        return SftResult(params=params)

    length = cfg.completion_length
    prompts, targets = _sft_arrays(dataset, length)
    optimizer = Adam(
        params.tensors, cfg.sft_learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, schedule="constant"
    )
    initial = dataset_loss(params, dataset, length)
    logger.info("Starting SFT", extra={"ctx": {"epochs": epochs, "problems": len(dataset), "initial_loss": f"{initial:.4f}"}})

    batches_per_epoch = math.ceil(len(dataset) / cfg.sft_batch_size)
    step = 0
    progress = tqdm(total=epochs * batches_per_epoch, desc="sft", disable=not settings.SHOW_PROGRESS)
    try:
        for epoch in range(epochs):
            order = stream(seed, "sft", epoch).permutation(len(dataset))
            for lo in range(0, len(dataset), cfg.sft_batch_size):
                step += 1
                rows = order[lo:lo + cfg.sft_batch_size]
                started = time.perf_counter()
                optimizer.zero_grad()
                with Tape():
                    loss = sft_loss(params, prompts[rows], targets[rows])
                value = loss.item()
                if not math.isfinite(value):
                    raise _abort(writer, run_id, Phase.SFT, step, "SFT loss is not finite")
                ad.backward(loss)
                optimizer.step()
                params.step += 1
                if writer is not None:
                    writer.append(
                        MetricsRecord(
                            run_id=run_id, phase=Phase.SFT, step=step, loss=value,
                            values={"epoch": float(epoch)},
                            tokens=int(rows.size * length), wall_seconds=time.perf_counter() - started,
                        )
                    )
                logger.debug("SFT step", extra={"ctx": {"step": step, "loss": f"{value:.4f}"}})
                progress.update(1)
            logger.info("SFT epoch done", extra={"ctx": {"epoch": epoch + 1, "last_loss": f"{value:.4f}"}})
    finally:
        progress.close()

    final = dataset_loss(params, dataset, length)
    logger.info("Finished SFT", extra={"ctx": {"initial_loss": f"{initial:.4f}", "final_loss": f"{final:.4f}"}})
    return SftResult(params=params, initial_loss=initial, final_loss=final, steps=step)


@dataclass
class LossStats:
    clamp_count: int = 0
    mean_weight: float = 1.0
    weights: Optional[np.ndarray] = None


def policy_loss(
    params: PolicyParams,
    batch: RolloutBatch,
    advantages: np.ndarray,
    mode: MitigationMode,
    clamp: float = 1e4,
    frozen_weights: Optional[np.ndarray] = None,
) -> Tuple[Tensor, LossStats]:
    """Mean over sequences of -(1/L) sum_l w * A * (...) for the target policy (no mask).

    Base: w_l = pi(y_l|.) / eta'(y_l|.) differentiable through the numerator, clamped at
    `clamp`. Practical / Retrace: a detached per-sequence h_m multiplies log pi(y_l|.);
    `frozen_weights` pins h_m (used by finite-difference checks).
    """
    target = completion_token_logprobs(params, batch.repeated_prompts, batch.completions, None)
    rows, length = target.shape
    behavior = batch.behavior_logprobs.astype(target.dtype)
    adv = np.repeat(np.asarray(advantages, dtype=target.dtype)[:, None], length, axis=1)
    seq_log_ratio = sequence_log_ratio(target.data, behavior)

    if mode.tag == MitigationTag.BASE:
        log_ratio = target - Tensor(behavior, dtype=target.dtype)
        ceiling = math.log(clamp)
        # The loss weighs tokens: each token ratio is capped at `clamp`, so a row contributes at
        # most clamp * |A|. The sequence-level h_base is clamped separately for the reported
        # weights; clamp_count sums token and sequence triggers.
        over = log_ratio.data > ceiling
        ratio = ad.exp(ad.where_const(over, log_ratio, ceiling))
        objective = ratio * Tensor(adv, dtype=target.dtype)
        seq_over = seq_log_ratio > ceiling
        weights = np.exp(np.where(seq_over, ceiling, seq_log_ratio))
        stats = LossStats(
            clamp_count=int(over.sum()) + int(seq_over.sum()),
            mean_weight=float(weights.mean()),
            weights=weights,
        )
    else:
        if frozen_weights is None:
            weights, _ = apply_mitigation(mode, seq_log_ratio, clamp)
        else:
            weights = np.asarray(frozen_weights, dtype=np.float64)
        coef = adv * weights.astype(target.dtype)[:, None]
        objective = target * Tensor(coef, dtype=target.dtype)
        stats = LossStats(mean_weight=float(weights.mean()), weights=weights)

    return ad.scale(objective.sum(), -1.0 / (rows * length)), stats


class PromptSampler:
    """Prompt batches from a shuffled permutation of D, reshuffled each time it is exhausted."""

    def __init__(self, dataset: Dataset, batch_size: int, seed: int):
        if len(dataset) == 0:
            raise ContractError("training dataset is empty")
        self.prompts = np.array([p.prompt for p in dataset.problems], dtype=np.int64)
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = 0
        self.cursor = 0
        self.order = stream(seed, "prompts", 0).permutation(len(dataset))

    def next_batch(self) -> np.ndarray:
        rows: List[int] = []
        while len(rows) < self.batch_size:
            if self.cursor == len(self.order):
                self.epoch += 1
                self.cursor = 0
                self.order = stream(self.seed, "prompts", self.epoch).permutation(len(self.order))
            take = min(self.batch_size - len(rows), len(self.order) - self.cursor)
            rows.extend(self.order[self.cursor:self.cursor + take].tolist())
            self.cursor += take
        return self.prompts[rows]


def reft_step(
    params: PolicyParams,
    optimizer: Adam,
    prompts: np.ndarray,
    values: Dict[Tuple[int, ...], List[int]],
    cfg: TrainConfig,
    seed: int,
    step: int,
    run_id: str = "",
    writer: Optional[MetricsWriter] = None,
) -> Tuple[PolicyParams, MetricsRecord]:
    """One ReFT step: the behavior policy is the current parameters with a fresh mask."""
    mask = sample_mask(cfg.skip, stream(seed, "mask", step))

    started = time.perf_counter()
    batch = generate_rollouts(params, mask, prompts, cfg.group_size, cfg.completion_length, seed, step)
    generation_seconds = time.perf_counter() - started
    batch = score_rollouts(batch, values)

    grouped = batch.grouped_rewards()
    advantages = batch_advantages(grouped, cfg.normalize_advantages, cfg.advantage_eps)
    zero_groups = int(np.sum(grouped.std(axis=1) == 0))
    if zero_groups:
        logger.debug("Zero-variance reward groups", extra={"ctx": {"step": step, "groups": zero_groups}})

    optimizer.zero_grad()
    with Tape():
        loss, stats = policy_loss(params, batch, advantages, cfg.mitigation, cfg.ratio_clamp)
    value = loss.item()
    if not math.isfinite(value):
        raise _abort(writer, run_id, Phase.REFT, step, "ReFT loss is not finite")
    # All-zero advantages: no update at all, Adam momentum included.
    if np.any(advantages != 0.0):
        ad.backward(loss)
        lr = optimizer.step()
    else:
        logger.debug("Skipped optimizer step on all-zero advantages", extra={"ctx": {"step": step}})
        lr = 0.0
    params.step += 1

    record = MetricsRecord(
        run_id=run_id,
        phase=Phase.REFT,
        step=step,
        loss=value,
        mean_reward=float(batch.rewards.mean()),
        skip_indices=mask.indices,
        mitigation=cfg.mitigation.tag.value,
        lam=cfg.mitigation.lam,
        clamp_count=stats.clamp_count,
        mean_weight=stats.mean_weight,
        values={"lr": lr, "zero_variance_groups": float(zero_groups)},
        tokens=batch.token_count,
        wall_seconds=generation_seconds,
    )
    if writer is not None:
        writer.append(record)
    return params, record


@dataclass
class TrainingResult:
    params: PolicyParams
    sft_params: PolicyParams
    records: List[MetricsRecord] = field(default_factory=list)
    sft_initial_loss: Optional[float] = None
    sft_final_loss: Optional[float] = None
    generated_tokens: int = 0
    generation_seconds: float = 0.0
    total_seconds: float = 0.0
    reft_epochs: float = 0.0

    def reward_means(self, window: int = REWARD_WINDOW) -> Tuple[Optional[float], Optional[float]]:
        rewards = [r.mean_reward for r in self.records if r.mean_reward is not None]
        if not rewards:
            return None, None
        return float(np.mean(rewards[:window])), float(np.mean(rewards[-window:]))


def run_sft(cfg: RunConfig, train: Dataset, writer: Optional[MetricsWriter] = None, run_id: str = "") -> SftResult:
    params = init_params(cfg.model, stream(cfg.seed, "init"))
    return sft_train(params, train, cfg.train.sft_epochs, cfg.train, cfg.seed, writer, run_id)


def run_reft(
    cfg: RunConfig,
    sft_params: PolicyParams,
    train: Dataset,
    writer: Optional[MetricsWriter] = None,
    run_id: str = "",
) -> TrainingResult:
    """S steps starting from a copy of the SFT parameters; `sft_params` is not modified."""
    tcfg = cfg.train
    params = sft_params.clone()
    optimizer = Adam(
        params.tensors, tcfg.learning_rate, tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps, tcfg.lr_schedule
    )
    sampler = PromptSampler(train, tcfg.batch_size, cfg.seed)
    values = value_lookup([train])
    result = TrainingResult(params=params, sft_params=sft_params)
    logger.info(
        "Starting ReFT",
        extra={"ctx": {"steps": tcfg.reft_steps, "x": tcfg.skip.ratio_x, "b": tcfg.skip.border_b, "mode": tcfg.mitigation.label}},
    )
    for step in tqdm(range(1, tcfg.reft_steps + 1), desc="reft", disable=not settings.SHOW_PROGRESS):
        params, record = reft_step(params, optimizer, sampler.next_batch(), values, tcfg, cfg.seed, step, run_id, writer)
        result.records.append(record)
        result.generated_tokens += record.tokens
        result.generation_seconds += record.wall_seconds
        if step % 10 == 0 or step == tcfg.reft_steps:
            logger.info(
                "ReFT progress",
                extra={"ctx": {"step": step, "loss": f"{record.loss:.4f}", "mean_reward": f"{record.mean_reward:.3f}"}},
            )
    result.params = params
    result.reft_epochs = tcfg.reft_steps * tcfg.batch_size / len(train)
    return result


def run_training(
    cfg: RunConfig,
    train: Dataset,
    run_dir: Optional[Path] = None,
    writer: Optional[MetricsWriter] = None,
    run_id: str = "",
    sft: Optional[SftResult] = None,
) -> TrainingResult:
    """SFT (unless a shared result is given) followed by S ReFT steps; checkpoints go to `run_dir`."""
    started = time.perf_counter()
    if sft is None:
        sft = run_sft(cfg, train, writer, run_id)
    if run_dir is not None:
        save_checkpoint(sft.params, Path(run_dir) / SFT_CHECKPOINT)
    result = run_reft(cfg, sft.params, train, writer, run_id)
    result.sft_initial_loss = sft.initial_loss
    result.sft_final_loss = sft.final_loss
    if run_dir is not None:
        save_checkpoint(result.params, Path(run_dir) / FINAL_CHECKPOINT)
    result.total_seconds = time.perf_counter() - started
    return result
