"""Importance-sampling ratio h_base and its mitigations h_1 (practical) and h_lambda (retrace).

Ratios are formed in the log domain and exponentiated once per sequence.
"""
import logging
import math
from typing import Tuple

import numpy as np

from app.core.errors import ConfigurationError, NumericError
from app.models.common import MitigationTag
from app.models.config import MitigationMode

logger = logging.getLogger(__name__)

DEFAULT_RATIO_CLAMP = 1e4


def h_base(target_logprob: float, behavior_logprob: float) -> float:
    if not (math.isfinite(target_logprob) and math.isfinite(behavior_logprob)):
        raise NumericError(f"non-finite log-probabilities: target={target_logprob}, behavior={behavior_logprob}")
    return math.exp(target_logprob - behavior_logprob)


def h_practical() -> float:
    return 1.0


def h_retrace(lam: float, h_base_value: float) -> float:
    if not 0.0 < lam <= 1.0:
        raise ConfigurationError(f"lambda must lie in (0, 1], got {lam}")
    if h_base_value < 0 or not math.isfinite(h_base_value):
        raise NumericError(f"invalid importance ratio {h_base_value}")
    return lam * min(1.0, h_base_value)


def token_log_ratios(target_logprobs: np.ndarray, behavior_logprobs: np.ndarray) -> np.ndarray:
    """log pi(y_l|.) - log eta'(y_l|.) per token, in float64."""
    target = np.asarray(target_logprobs, dtype=np.float64)
    behavior = np.asarray(behavior_logprobs, dtype=np.float64)
    if target.shape != behavior.shape:
        raise ConfigurationError(f"log-prob shapes differ: {target.shape} vs {behavior.shape}")
    if not (np.all(np.isfinite(target)) and np.all(np.isfinite(behavior))):
        raise NumericError("non-finite log-probabilities in ratio computation")
    return target - behavior


def sequence_log_ratio(target_logprobs: np.ndarray, behavior_logprobs: np.ndarray) -> np.ndarray:
    """log h_base per sequence: the sum of per-token log-ratios over the last axis."""
    return token_log_ratios(target_logprobs, behavior_logprobs).sum(axis=-1)


def apply_mitigation(
    mode: MitigationMode,
    log_ratios: np.ndarray,
    clamp: float = DEFAULT_RATIO_CLAMP,
) -> Tuple[np.ndarray, int]:
    """Per-sequence weights h_m from sequence log-ratios, plus the clamp-trigger count.

    The clamp applies to Base mode only; Retrace is already bounded by lambda.
    """
    log_ratios = np.asarray(log_ratios, dtype=np.float64)
    if not np.all(np.isfinite(log_ratios)):
        raise NumericError("non-finite log-ratios")
    if mode.tag == MitigationTag.PRACTICAL:
        return np.ones_like(log_ratios), 0
    ratios = np.exp(log_ratios)
    if mode.tag == MitigationTag.RETRACE:
        return mode.lam * np.minimum(1.0, ratios), 0
    clamped = ratios > clamp
    count = int(clamped.sum())
    if count:
        logger.debug("Clamped importance ratios", extra={"ctx": {"count": count, "clamp": clamp}})
    return np.where(clamped, clamp, ratios), count
