"""Enumeration-based checks of the nested-ensemble importance-sampling argument.

All completions of length L over the micro vocabulary are enumerated in float64, so
expectations under the target policy, each nested behavior policy and their uniform
mixture are exact. Monte-Carlo estimators are then compared against these values.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import ContractError
from app.core.seeding import stream
from app.models.common import CheckStatus, MitigationTag, Precision
from app.models.config import MitigationMode, ModelConfig, TheoryConfig
from app.models.metrics import CheckResult, TheoryReport
from app.services.layer_skip import SkipMask, masks_from_index_lists, zeros_mask
from app.services.off_policy import apply_mitigation
from app.services.transformer import PolicyParams, completion_token_logprobs, generate, init_params

logger = logging.getLogger(__name__)

ENUMERATION_LIMIT = 100_000
NORMALIZATION_TOLERANCE = 1e-9
SequenceFunction = Callable[[np.ndarray], np.ndarray]


def enumerate_sequences(vocab_size: int, length: int) -> np.ndarray:
    """Every sequence in lexicographic order; row i encodes i in base `vocab_size`."""
    if vocab_size ** length > ENUMERATION_LIMIT:
        raise ContractError(f"{vocab_size}^{length} sequences exceed the enumeration limit {ENUMERATION_LIMIT}")
    codes = np.arange(vocab_size ** length)
    return np.stack(np.unravel_index(codes, (vocab_size,) * length), axis=1).astype(np.int64)


def sequence_codes(sequences: np.ndarray, vocab_size: int) -> np.ndarray:
    return np.ravel_multi_index(sequences.T, (vocab_size,) * sequences.shape[1])


def last_token_indicator(target_token: int) -> SequenceFunction:
    return lambda sequences: (sequences[:, -1] == target_token).astype(np.float64)


def constant_one(sequences: np.ndarray) -> np.ndarray:
    return np.ones(sequences.shape[0], dtype=np.float64)


@dataclass
class SequenceDistribution:
    sequences: np.ndarray
    logprobs: np.ndarray

    @property
    def probabilities(self) -> np.ndarray:
        return np.exp(self.logprobs)

    def total(self) -> float:
        return float(self.probabilities.sum())


@dataclass
class EnumerablePolicy:
    params: PolicyParams
    mask: SkipMask
    prompt: np.ndarray
    length: int
    _cache: Optional[SequenceDistribution] = field(default=None, repr=False)

    def distribution(self, chunk: int = 4096) -> SequenceDistribution:
        if self._cache is None:
            sequences = enumerate_sequences(self.params.config.vocab_size, self.length)
            parts = []
            for lo in range(0, sequences.shape[0], chunk):
                block = sequences[lo:lo + chunk]
                prompts = np.repeat(self.prompt[None, :], block.shape[0], axis=0)
                parts.append(completion_token_logprobs(self.params, prompts, block, self.mask).data.sum(axis=1))
            self._cache = SequenceDistribution(sequences, np.concatenate(parts).astype(np.float64))
        return self._cache


@dataclass
class EnsembleSpec:
    masks: List[SkipMask]

    def __post_init__(self) -> None:
        if not self.masks:
            raise ContractError("an ensemble needs at least one mask")

    @property
    def weights(self) -> np.ndarray:
        return np.full(len(self.masks), 1.0 / len(self.masks))


def exact_expected_value(policy, f: SequenceFunction) -> float:
    """sum_seq P(seq) f(seq) over every enumerated completion."""
    dist = policy.distribution() if isinstance(policy, EnumerablePolicy) else policy
    return float(np.sum(dist.probabilities * f(dist.sequences)))


def mean_behavior_policy(
    ensemble: EnsembleSpec, params: PolicyParams, prompt: Sequence[int], length: int
) -> SequenceDistribution:
    """Uniform mixture of the ensemble members' sequence distributions."""
    prompt = np.asarray(prompt, dtype=np.int64)
    members = [EnumerablePolicy(params, m, prompt, length).distribution() for m in ensemble.masks]
    mixed = np.sum([w * d.probabilities for w, d in zip(ensemble.weights, members)], axis=0)
    return SequenceDistribution(members[0].sequences, np.log(mixed))


def micro_model(cfg: TheoryConfig, seed: int) -> PolicyParams:
    config = ModelConfig(
        num_layers=cfg.num_layers,
        width=cfg.width,
        num_heads=cfg.num_heads,
        vocab_size=cfg.vocab_size,
        max_sequence_length=len(cfg.prompt) + cfg.completion_length,
        mlp_ratio=2,
        init_scale=cfg.init_scale,
        precision=Precision.FLOAT64,
    )
    return init_params(config, stream(seed, "theory", 0))


@dataclass
class EnsembleSamples:
    """Sequences drawn from uniformly chosen ensemble members, with log h_base per sample."""

    sequences: np.ndarray
    members: np.ndarray
    log_h: np.ndarray


def draw_ensemble_samples(
    params: PolicyParams,
    ensemble: EnsembleSpec,
    prompt: Sequence[int],
    length: int,
    n_samples: int,
    seed: int,
    stream_id: int = 1,
) -> EnsembleSamples:
    prompt = np.asarray(prompt, dtype=np.int64)
    target = EnumerablePolicy(params, zeros_mask(params.config.num_layers), prompt, length).distribution()
    members = stream(seed, "theory", stream_id).integers(len(ensemble.masks), size=n_samples)

    sequences = np.zeros((n_samples, length), dtype=np.int64)
    log_h = np.zeros(n_samples, dtype=np.float64)
    for index, mask in enumerate(ensemble.masks):
        rows = np.flatnonzero(members == index)
        if rows.size == 0:
            continue
        rng = stream(seed, "theory", stream_id, index + 1)
        completions, behavior = generate(params, prompt[None, :], rows.size, mask, length, 1.0, 1.0, [rng])
        sequences[rows] = completions
        log_h[rows] = target.logprobs[sequence_codes(completions, params.config.vocab_size)] - behavior.sum(axis=1)
    return EnsembleSamples(sequences=sequences, members=members, log_h=log_h)


def _band(values: np.ndarray, tolerance: float) -> Tuple[float, float]:
    se = float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else 0.0
    return se, max(tolerance, 4.0 * se)


def check_normalization(params: PolicyParams, ensemble: EnsembleSpec, prompt, length: int) -> CheckResult:
    prompt = np.asarray(prompt, dtype=np.int64)
    totals = {"target": EnumerablePolicy(params, zeros_mask(params.config.num_layers), prompt, length).distribution().total()}
    for index, mask in enumerate(ensemble.masks):
        totals[f"member_{index}"] = EnumerablePolicy(params, mask, prompt, length).distribution().total()
    totals["mixture"] = mean_behavior_policy(ensemble, params, prompt, length).total()
    worst = max(abs(t - 1.0) for t in totals.values())
    return CheckResult(
        name="normalization",
        status=CheckStatus.PASS if worst <= NORMALIZATION_TOLERANCE else CheckStatus.FAIL,
        band=NORMALIZATION_TOLERANCE,
        details={**totals, "max_error": worst},
    )


def check_estimator_identity(
    params: PolicyParams, ensemble: EnsembleSpec, prompt, length: int, f: SequenceFunction, tolerance: float
) -> CheckResult:
    """sum eta'(seq) h_base(seq) f(seq) == E_pi[f] for every member and for the 1/|Z| average."""
    prompt = np.asarray(prompt, dtype=np.int64)
    target = EnumerablePolicy(params, zeros_mask(params.config.num_layers), prompt, length).distribution()
    exact = exact_expected_value(target, f)
    values = f(target.sequences)
    details: Dict[str, float] = {}
    member_values = []
    for index, mask in enumerate(ensemble.masks):
        member = EnumerablePolicy(params, mask, prompt, length).distribution()
        h = np.exp(target.logprobs - member.logprobs)
        weighted = float(np.sum(member.probabilities * h * values))
        member_values.append(weighted)
        details[f"member_{index}"] = weighted
    averaged = float(np.dot(ensemble.weights, member_values))
    details["averaged"] = averaged
    error = max(abs(v - exact) for v in [*member_values, averaged])
    details["max_error"] = error
    return CheckResult(
        name="estimator_identity",
        status=CheckStatus.PASS if error <= tolerance else CheckStatus.FAIL,
        estimate=averaged,
        exact=exact,
        band=tolerance,
        details=details,
    )


def check_unbiasedness(
    params: PolicyParams,
    ensemble: EnsembleSpec,
    prompt,
    length: int,
    f: SequenceFunction,
    n_samples: int,
    tolerance: float,
    seed: int,
    weighting: MitigationTag = MitigationTag.BASE,
    name: str = "unbiasedness",
    samples: Optional[EnsembleSamples] = None,
) -> CheckResult:
    """Monte-Carlo mean of h * f(seq) over ensemble samples against the exact E_pi[f].

    With `weighting=PRACTICAL` (h = 1) the check is a negative control: it passes when the
    estimate falls OUTSIDE the band, demonstrating the bias of the unweighted estimator.
    """
    prompt = np.asarray(prompt, dtype=np.int64)
    target = EnumerablePolicy(params, zeros_mask(params.config.num_layers), prompt, length).distribution()
    exact = exact_expected_value(target, f)
    if samples is None:
        samples = draw_ensemble_samples(params, ensemble, prompt, length, n_samples, seed)
    h = np.exp(samples.log_h) if weighting == MitigationTag.BASE else np.ones_like(samples.log_h)
    terms = h * f(samples.sequences)
    estimate = float(terms.mean())
    se, band = _band(terms, tolerance)
    inside = abs(estimate - exact) <= band
    negative = weighting != MitigationTag.BASE
    return CheckResult(
        name=name,
        status=CheckStatus.PASS if inside != negative else CheckStatus.FAIL,
        estimate=estimate,
        exact=exact,
        standard_error=se,
        band=band,
        details={"bias": estimate - exact, "samples": float(terms.size)},
    )


def coordinate_score(
    params: PolicyParams, name: str, index: Sequence[int], prompt: np.ndarray, length: int, step: float = 1e-5
) -> np.ndarray:
    """d log pi(seq) / d theta_j for every enumerated sequence, by central differences."""
    tensor = params[name]
    position = tuple(int(i) for i in index)
    original = float(tensor.data[position])
    mask = zeros_mask(params.config.num_layers)
    try:
        tensor.data[position] = original + step
        upper = EnumerablePolicy(params, mask, prompt, length).distribution().logprobs
        tensor.data[position] = original - step
        lower = EnumerablePolicy(params, mask, prompt, length).distribution().logprobs
    finally:
        tensor.data[position] = original
    return (upper - lower) / (2.0 * step)


def check_gradient_unbiasedness(
    params: PolicyParams,
    ensemble: EnsembleSpec,
    prompt,
    length: int,
    f: SequenceFunction,
    param_name: str,
    param_index: Sequence[int],
    n_samples: int,
    tolerance: float,
    seed: int,
    samples: Optional[EnsembleSamples] = None,
) -> CheckResult:
    """Projects the policy gradient of E_pi[f] onto one parameter coordinate.

    Exact value: sum_seq pi(seq) f(seq) d log pi(seq)/d theta_j. Estimator: mean of
    h_base * f * d log pi/d theta_j over ensemble samples.
    """
    if param_name not in params.tensors:
        raise ContractError(f"unknown parameter {param_name!r}")
    prompt = np.asarray(prompt, dtype=np.int64)
    target = EnumerablePolicy(params, zeros_mask(params.config.num_layers), prompt, length).distribution()
    score = coordinate_score(params, param_name, param_index, prompt, length)
    values = f(target.sequences)
    exact = float(np.sum(target.probabilities * values * score))

    if samples is None:
        samples = draw_ensemble_samples(params, ensemble, prompt, length, n_samples, seed, stream_id=2)
    codes = sequence_codes(samples.sequences, params.config.vocab_size)
    terms = np.exp(samples.log_h) * values[codes] * score[codes]
    estimate = float(terms.mean())
    se, band = _band(terms, tolerance)
    return CheckResult(
        name="gradient_unbiasedness",
        status=CheckStatus.PASS if abs(estimate - exact) <= band else CheckStatus.FAIL,
        estimate=estimate,
        exact=exact,
        standard_error=se,
        band=band,
        details={"bias": estimate - exact},
    )


def check_variance_bound(
    samples: EnsembleSamples,
    mode: MitigationMode,
    clamp: float = 1e4,
    name: Optional[str] = None,
) -> CheckResult:
    """Empirical max and variance of h_m on the given samples.

    Retrace passes iff max h <= lambda; Practical iff the variance is exactly zero; Base is
    reported without a verdict.
    """
    weights, clamped = apply_mitigation(mode, samples.log_h, clamp)
    maximum, variance = float(weights.max()), float(weights.var())
    if mode.tag == MitigationTag.RETRACE:
        status = CheckStatus.PASS if maximum <= mode.lam else CheckStatus.FAIL
    elif mode.tag == MitigationTag.PRACTICAL:
        status = CheckStatus.PASS if variance == 0.0 else CheckStatus.FAIL
    else:
        status = CheckStatus.REPORT
    return CheckResult(
        name=name or f"variance_{mode.tag.value}",
        status=status,
        estimate=variance,
        band=mode.lam,
        details={"max": maximum, "variance": variance, "clamp_count": float(clamped), "samples": float(weights.size)},
    )


def check_paired_variance(samples: EnsembleSamples, lam: float, clamp: float = 1e4) -> CheckResult:
    """Base-mode variance must exceed Retrace's on the same off-policy samples."""
    base, _ = apply_mitigation(MitigationMode(tag=MitigationTag.BASE), samples.log_h, clamp)
    retrace, _ = apply_mitigation(MitigationMode(tag=MitigationTag.RETRACE, lam=lam), samples.log_h, clamp)
    base_var, retrace_var = float(base.var()), float(retrace.var())
    return CheckResult(
        name="variance_base_exceeds_retrace",
        status=CheckStatus.PASS if base_var > retrace_var else CheckStatus.FAIL,
        details={"base_variance": base_var, "retrace_variance": retrace_var},
    )


def most_biased_target(params: PolicyParams, ensemble: EnsembleSpec, prompt, length: int) -> int:
    """Last-token indicator with the largest exact gap between the mixture and the target."""
    prompt = np.asarray(prompt, dtype=np.int64)
    target = EnumerablePolicy(params, zeros_mask(params.config.num_layers), prompt, length).distribution()
    mixture = mean_behavior_policy(ensemble, params, prompt, length)
    gaps = [
        abs(exact_expected_value(mixture, last_token_indicator(t)) - exact_expected_value(target, last_token_indicator(t)))
        for t in range(params.config.vocab_size)
    ]
    return int(np.argmax(gaps))


def run_theory_suite(cfg: TheoryConfig, seed: int) -> TheoryReport:
    params = micro_model(cfg, seed)
    layers = params.config.num_layers
    ensemble = EnsembleSpec(masks_from_index_lists(cfg.ensemble, layers))
    control = EnsembleSpec(masks_from_index_lists(cfg.negative_control, layers))
    prompt, length = np.asarray(cfg.prompt, dtype=np.int64), cfg.completion_length
    f = last_token_indicator(cfg.target_token)
    logger.info(
        "Running theory checks",
        extra={"ctx": {"vocab": cfg.vocab_size, "length": length, "ensemble": cfg.ensemble, "samples": cfg.n_samples}},
    )

    samples = draw_ensemble_samples(params, ensemble, prompt, length, cfg.n_samples, seed)
    control_samples = draw_ensemble_samples(params, control, prompt, length, cfg.n_samples, seed, stream_id=3)
    control_target = most_biased_target(params, control, prompt, length)

    checks = [
        check_normalization(params, ensemble, prompt, length),
        check_estimator_identity(params, ensemble, prompt, length, f, cfg.tolerance),
        check_unbiasedness(params, ensemble, prompt, length, f, cfg.n_samples, cfg.tolerance, seed, samples=samples),
        check_unbiasedness(
            params, control, prompt, length, last_token_indicator(control_target), cfg.n_samples, cfg.tolerance, seed,
            weighting=MitigationTag.PRACTICAL, name="negative_control_unweighted", samples=control_samples,
        ),
        check_gradient_unbiasedness(
            params, ensemble, prompt, length, f, cfg.gradient_param, cfg.gradient_index, cfg.n_samples, cfg.tolerance, seed,
        ),
        check_variance_bound(samples, MitigationMode(tag=MitigationTag.PRACTICAL)),
        check_variance_bound(samples, MitigationMode(tag=MitigationTag.RETRACE, lam=cfg.lam)),
        check_variance_bound(control_samples, MitigationMode(tag=MitigationTag.RETRACE, lam=cfg.lam), name="variance_retrace_control"),
        check_variance_bound(control_samples, MitigationMode(tag=MitigationTag.BASE), name="variance_base_control"),
        check_paired_variance(control_samples, cfg.lam),
    ]
    for check in checks:
        logger.info("Theory check", extra={"ctx": {"name": check.name, "status": check.status.value}})
    return TheoryReport(checks=checks)
