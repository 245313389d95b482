"""Decoder-only transformer policy with per-layer skipping.

One parameter set realizes both the target policy (no mask) and any nested behavior
policy (a skip mask). A skipped block is the identity on the residual stream; its
attention and feed-forward sub-blocks are skipped together.

Sampling and training run the same forward over a fixed (N, P+L) token buffer, so the
log-probabilities recorded at sampling time are bitwise equal to the ones the trainer
recomputes under the same mask and batch shape.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.errors import ConfigurationError, ContractError, TokenIndexError
from app.models.config import ModelConfig
from app.services import autodiff as ad
from app.services.autodiff import Tensor
from app.services.layer_skip import SkipMask, as_mask

logger = logging.getLogger(__name__)

MaskLike = Union[SkipMask, Sequence[int], np.ndarray, None]


@dataclass
class PolicyParams:
    config: ModelConfig
    tensors: Dict[str, Tensor]
    step: int = 0

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def clone(self) -> "PolicyParams":
        copied = {
            name: Tensor(t.data.copy(), requires_grad=t.requires_grad, dtype=t.dtype, name=name)
            for name, t in self.tensors.items()
        }
        return PolicyParams(config=self.config, tensors=copied, step=self.step)

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self.tensors.values())

    def equals(self, other: "PolicyParams") -> bool:
        """Bitwise parameter equality (same names, dtypes and values)."""
        if self.tensors.keys() != other.tensors.keys():
            return False
        return all(
            self.tensors[k].dtype == other.tensors[k].dtype and np.array_equal(self.tensors[k].data, other.tensors[k].data)
            for k in self.tensors
        )


@dataclass
class TokenSequence:
    prompt: np.ndarray
    completion: np.ndarray
    logprobs: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def prompt_length(self) -> int:
        return int(self.prompt.shape[0])

    @property
    def completion_length(self) -> int:
        return int(self.completion.shape[0])

    @property
    def tokens(self) -> np.ndarray:
        return np.concatenate([self.prompt, self.completion])


def _block_names(i: int) -> List[str]:
    return [f"layers.{i}.{n}" for n in ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_up", "w_down")]


def init_params(config: ModelConfig, rng: np.random.Generator) -> PolicyParams:
    dtype = config.precision.dtype
    d, v, hidden = config.width, config.vocab_size, config.width * config.mlp_ratio

    def normal(*shape):
        return rng.normal(0.0, config.init_scale, size=shape).astype(dtype)

    arrays: Dict[str, np.ndarray] = {
        "wte": normal(v, d),
        "wpe": normal(config.max_sequence_length, d),
    }
    for i in range(config.num_layers):
        arrays[f"layers.{i}.attn_norm"] = np.ones(d, dtype=dtype)
        arrays[f"layers.{i}.wq"] = normal(d, d)
        arrays[f"layers.{i}.wk"] = normal(d, d)
        arrays[f"layers.{i}.wv"] = normal(d, d)
        arrays[f"layers.{i}.wo"] = normal(d, d)
        arrays[f"layers.{i}.mlp_norm"] = np.ones(d, dtype=dtype)
        arrays[f"layers.{i}.w_up"] = normal(d, hidden)
        arrays[f"layers.{i}.w_down"] = normal(hidden, d)
    arrays["final_norm"] = np.ones(d, dtype=dtype)
    arrays["w_out"] = normal(d, v)

    tensors = {name: Tensor(a, requires_grad=True, dtype=dtype, name=name) for name, a in arrays.items()}
    params = PolicyParams(config=config, tensors=tensors)
    logger.debug("Initialized policy", extra={"ctx": {"parameters": params.num_parameters(), "layers": config.num_layers}})
    return params


def _causal_mask(length: int, dtype) -> Tensor:
    upper = np.triu(np.ones((length, length), dtype=bool), k=1)
    return Tensor(np.where(upper, -np.inf, 0.0).astype(dtype), dtype=dtype)


def _attention(params: PolicyParams, x: Tensor, i: int, causal: Tensor) -> Tensor:
    cfg = params.config
    batch, length, width = x.shape
    heads = cfg.num_heads
    head_dim = width // heads

    def split(t: Tensor) -> Tensor:
        return t.reshape(batch, length, heads, head_dim).transpose(0, 2, 1, 3)

    q = split(x @ params[f"layers.{i}.wq"])
    k = (x @ params[f"layers.{i}.wk"]).reshape(batch, length, heads, head_dim).transpose(0, 2, 3, 1)
    v = split(x @ params[f"layers.{i}.wv"])
    scores = ad.scale(q @ k, 1.0 / np.sqrt(head_dim)) + causal
    attended = ad.softmax(scores) @ v
    merged = attended.transpose(0, 2, 1, 3).reshape(batch, length, width)
    return merged @ params[f"layers.{i}.wo"]


def transformer_block(params: PolicyParams, x: Tensor, i: int, causal: Tensor) -> Tensor:
    h = x + _attention(params, ad.rms_norm(x, params[f"layers.{i}.attn_norm"]), i, causal)
    hidden = ad.silu(ad.rms_norm(h, params[f"layers.{i}.mlp_norm"]) @ params[f"layers.{i}.w_up"])
    return h + hidden @ params[f"layers.{i}.w_down"]


def forward_logits(params: PolicyParams, tokens, mask: MaskLike = None) -> Tensor:
    """Next-token logits for every position of `tokens` ((T,) or (B, T))."""
    cfg = params.config
    sigma = as_mask(mask, cfg.num_layers).sigma
    ids = np.asarray(tokens, dtype=np.int64)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]
    length = ids.shape[1]
    if length > cfg.max_sequence_length:
        raise ConfigurationError(f"sequence length {length} exceeds max_sequence_length {cfg.max_sequence_length}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise TokenIndexError(f"token ids must lie in [0, {cfg.vocab_size})")

    x = ad.embedding(params["wte"], ids) + ad.embedding(params["wpe"], np.arange(length))
    causal = _causal_mask(length, x.dtype)
    for i in range(cfg.num_layers):
        if sigma[i]:
            continue
        x = transformer_block(params, x, i, causal)
    logits = ad.rms_norm(x, params["final_norm"]) @ params["w_out"]
    return logits.reshape(length, cfg.vocab_size) if squeeze else logits


def completion_token_logprobs(params: PolicyParams, prompts, completions, mask: MaskLike = None) -> Tensor:
    """Differentiable log pi(y_l | x, y_<l) for every completion token, shape (N, L)."""
    prompts = np.atleast_2d(np.asarray(prompts, dtype=np.int64))
    completions = np.atleast_2d(np.asarray(completions, dtype=np.int64))
    if prompts.shape[0] != completions.shape[0]:
        raise ContractError(f"{prompts.shape[0]} prompts for {completions.shape[0]} completions")
    if completions.shape[1] == 0:
        raise ContractError("completion must contain at least one token")
    plen, clen = prompts.shape[1], completions.shape[1]
    tokens = np.concatenate([prompts, completions], axis=1)
    logits = forward_logits(params, tokens, mask)
    shifted = ad.token_logprobs(ad.narrow(logits, 1, 0, plen + clen - 1), tokens[:, 1:])
    return ad.narrow(shifted, 1, plen - 1, plen + clen - 1)


def sequence_logprob(params: PolicyParams, seq: TokenSequence, mask: MaskLike = None) -> float:
    if seq.completion_length == 0:
        raise ContractError("completion must contain at least one token")
    token_lp = completion_token_logprobs(params, seq.prompt[None, :], seq.completion[None, :], mask)
    return float(token_lp.data.astype(np.float64).sum())


def filtered_logprobs(logits: np.ndarray, temperature: float, top_p: float) -> np.ndarray:
    """Log-probabilities of the temperature-scaled, nucleus-filtered distribution.

    Tokens outside the nucleus get -inf; with temperature 1 and top_p 1 this is exactly
    the policy's log-softmax.
    """
    if temperature != 1.0:
        logits = logits / np.asarray(temperature, dtype=logits.dtype)
    logp = ad.log_softmax_array(logits)
    if top_p >= 1.0:
        return logp
    probs = np.exp(logp)
    order = np.argsort(-probs, axis=-1, kind="stable")
    sorted_probs = np.take_along_axis(probs, order, axis=-1)
    keep_sorted = (np.cumsum(sorted_probs, axis=-1) - sorted_probs) < top_p
    keep = np.zeros_like(keep_sorted)
    np.put_along_axis(keep, order, keep_sorted, axis=-1)
    mass = np.where(keep, probs, 0.0).sum(axis=-1, keepdims=True)
    return np.where(keep, logp - np.log(mass), -np.inf)


def _draw(logp: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per row; zero-probability tokens are never selected."""
    cdf = np.cumsum(np.exp(logp.astype(np.float64)), axis=-1)
    threshold = uniforms[:, None] * cdf[:, -1:]
    return np.minimum((cdf <= threshold).sum(axis=-1), logp.shape[-1] - 1)


def generate(
    params: PolicyParams,
    prompts,
    group_size: int,
    mask: MaskLike,
    length: int,
    temperature: float,
    top_p: float,
    rngs: Sequence[np.random.Generator],
    pad_id: int = 0,
) -> Tuple[np.ndarray, np.ndarray]:
    """Samples `group_size` completions per prompt; rows are prompt-major.

    Prompt m draws its uniforms from `rngs[m]` only, so its completions do not depend on
    the other prompts in the call. Returns (completions, log-probs), both (M*G, L).
    """
    if length < 1:
        raise ConfigurationError("completion length must be >= 1")
    if temperature <= 0 or not 0 < top_p <= 1:
        raise ConfigurationError(f"invalid decoding settings temperature={temperature} top_p={top_p}")
    prompts = np.atleast_2d(np.asarray(prompts, dtype=np.int64))
    num_prompts, plen = prompts.shape
    if len(rngs) != num_prompts:
        raise ConfigurationError(f"{len(rngs)} random streams for {num_prompts} prompts")
    if plen + length > params.config.max_sequence_length:
        raise ConfigurationError(
            f"prompt {plen} + completion {length} exceeds max_sequence_length {params.config.max_sequence_length}"
        )
    skip = as_mask(mask, params.config.num_layers)

    rows = num_prompts * group_size
    buffer = np.full((rows, plen + length), pad_id, dtype=np.int64)
    buffer[:, :plen] = np.repeat(prompts, group_size, axis=0)
    logprobs = np.zeros((rows, length), dtype=params.config.precision.dtype)

    for step in range(length):
        logits = forward_logits(params, buffer, skip).data[:, plen - 1 + step, :]
        logp = filtered_logprobs(logits, temperature, top_p)
        uniforms = np.concatenate([rng.random(group_size) for rng in rngs])
        chosen = _draw(logp, uniforms)
        buffer[:, plen + step] = chosen
        logprobs[:, step] = logp[np.arange(rows), chosen]

    return buffer[:, plen:].copy(), logprobs


def sample_completion(
    params: PolicyParams,
    prompt,
    mask: MaskLike,
    length: int,
    temperature: float,
    top_p: float,
    rng: np.random.Generator,
) -> TokenSequence:
    prompt = np.asarray(prompt, dtype=np.int64)
    completions, logprobs = generate(params, prompt[None, :], 1, mask, length, temperature, top_p, [rng])
    return TokenSequence(prompt=prompt, completion=completions[0], logprobs=logprobs[0])


def save_checkpoint(params: PolicyParams, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: t.data for name, t in params.tensors.items()}
    with path.open("wb") as handle:
        np.savez(
            handle,
            __config__=np.array(json.dumps(params.config.model_dump(mode="json"), sort_keys=True)),
            __step__=np.array(params.step, dtype=np.int64),
            **arrays,
        )
    logger.info("Saved checkpoint", extra={"ctx": {"path": str(path), "step": params.step}})
    return path


def load_checkpoint(path: Path) -> PolicyParams:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        config = ModelConfig.model_validate(json.loads(str(archive["__config__"])))
        step = int(archive["__step__"])
        tensors = {
            name: Tensor(archive[name].copy(), requires_grad=True, dtype=archive[name].dtype, name=name)
            for name in archive.files
            if not name.startswith("__")
        }
    expected = {"wte", "wpe", "final_norm", "w_out"} | {n for i in range(config.num_layers) for n in _block_names(i)}
    if set(tensors) != expected:
        raise ConfigurationError(f"checkpoint {path} does not match its model config")
    return PolicyParams(config=config, tensors=tensors, step=step)
