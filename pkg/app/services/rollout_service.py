"""Rollout engine: G fixed-length completions per prompt from a nested behavior policy."""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.core.config import settings
from app.core.errors import ConfigurationError
from app.core.seeding import stream
from app.services.layer_skip import SkipMask
from app.services.task_suite import lookup_value, reward
from app.services.transformer import PolicyParams, generate

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RolloutBatch:
    step: int
    mask: SkipMask
    group_size: int
    prompts: np.ndarray
    completions: np.ndarray
    behavior_logprobs: np.ndarray
    rewards: Optional[np.ndarray] = None

    @property
    def num_prompts(self) -> int:
        return int(self.prompts.shape[0])

    @property
    def completion_length(self) -> int:
        return int(self.completions.shape[1])

    @property
    def token_count(self) -> int:
        return int(self.completions.size)

    @property
    def repeated_prompts(self) -> np.ndarray:
        """Prompt row for every completion (prompt-major)."""
        return np.repeat(self.prompts, self.group_size, axis=0)

    def group(self, index: int) -> slice:
        return slice(index * self.group_size, (index + 1) * self.group_size)

    def grouped_rewards(self) -> np.ndarray:
        if self.rewards is None:
            raise ValueError("batch has not been scored")
        return self.rewards.reshape(self.num_prompts, self.group_size)


def _chunks(count: int, workers: int) -> List[Tuple[int, int]]:
    edges = np.linspace(0, count, min(workers, count) + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def generate_rollouts(
    params: PolicyParams,
    mask: SkipMask,
    prompts,
    group_size: int,
    length: int,
    seed: int,
    step: int,
    temperature: float = 1.0,
    top_p: float = 1.0,
    workers: Optional[int] = None,
    phase: str = "rollout",
) -> RolloutBatch:
    """Samples from the masked model; prompt i uses the stream (seed, phase, step, i).

    With more than one worker, contiguous prompt ranges are generated concurrently and
    merged back in prompt order.
    """
    if group_size < 1:
        raise ConfigurationError("group_size must be >= 1")
    prompts = np.atleast_2d(np.asarray(prompts, dtype=np.int64))
    rngs = [stream(seed, phase, step, i) for i in range(prompts.shape[0])]
    workers = workers or settings.NUM_WORKERS

    def run(bounds: Tuple[int, int]):
        lo, hi = bounds
        return generate(params, prompts[lo:hi], group_size, mask, length, temperature, top_p, rngs[lo:hi])

    ranges = _chunks(prompts.shape[0], workers)
    if len(ranges) == 1:
        parts = [run(ranges[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(ranges)) as pool:
            parts = list(pool.map(run, ranges))

    completions = np.concatenate([c for c, _ in parts], axis=0)
    logprobs = np.concatenate([lp for _, lp in parts], axis=0)
    logger.debug(
        "Generated rollouts",
        extra={"ctx": {"step": step, "prompts": prompts.shape[0], "group": group_size, "skip": mask.indices}},
    )
    return RolloutBatch(
        step=step, mask=mask, group_size=group_size, prompts=prompts,
        completions=completions, behavior_logprobs=logprobs,
    )


def score_rollouts(batch: RolloutBatch, values: Dict[Tuple[int, ...], List[int]]) -> RolloutBatch:
    """r_g = reward(y_g, y_val) for every completion; unknown prompts raise PromptLookupError."""
    references = [lookup_value(values, prompt) for prompt in batch.prompts]
    rewards = np.array(
        [reward(completion, references[row // batch.group_size]) for row, completion in enumerate(batch.completions)],
        dtype=np.float64,
    )
    return replace(batch, rewards=rewards)


def dump_jsonl(batch: RolloutBatch, path: Path) -> Path:
    """Appends one line per completion: prompt, completion, behavior log-probs, reward."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    prompts = batch.repeated_prompts
    with path.open("a", encoding="utf-8") as handle:
        for row in range(batch.completions.shape[0]):
            record = {
                "step": batch.step,
                "skip_indices": batch.mask.indices,
                "prompt": prompts[row].tolist(),
                "completion": batch.completions[row].tolist(),
                "logprobs": [float(v) for v in batch.behavior_logprobs[row]],
                "reward": None if batch.rewards is None else float(batch.rewards[row]),
            }
            handle.write(json.dumps(record, separators=(",", ":")) + "\n")
    return path
