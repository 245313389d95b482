import itertools
import math

import numpy as np
import pytest

from app.core.errors import ConfigurationError, NumericError
from app.core.seeding import stream
from app.models.common import Precision
from app.models.config import MitigationMode, ModelConfig
from app.services.autodiff import softmax_array
from app.services.layer_skip import mask_from_indices
from app.services.off_policy import (
    apply_mitigation,
    h_base,
    h_practical,
    h_retrace,
    sequence_log_ratio,
    token_log_ratios,
)
from app.services.transformer import TokenSequence, forward_logits, init_params, sequence_logprob

BASE = MitigationMode(tag="base")
PRACTICAL = MitigationMode(tag="practical")


def test_h_base_is_the_probability_ratio():
    assert h_base(math.log(0.2), math.log(0.4)) == pytest.approx(0.5)
    assert h_base(-1.3, -1.3) == 1.0


def test_h_base_rejects_non_finite():
    with pytest.raises(NumericError):
        h_base(float("-inf"), -1.0)


def test_practical_weight_is_one():
    assert h_practical() == 1.0


@pytest.mark.parametrize("lam,h,expected", [(1.0, 0.5, 0.5), (1.0, 3.0, 1.0), (0.9, 2.0, 0.9), (0.5, 0.2, 0.1)])
def test_retrace_truncates(lam, h, expected):
    assert h_retrace(lam, h) == pytest.approx(expected)


def test_retrace_lambda_range():
    with pytest.raises(ConfigurationError):
        h_retrace(0.0, 1.0)
    with pytest.raises(ConfigurationError):
        h_retrace(1.5, 1.0)


def test_retrace_rejects_negative_ratio():
    with pytest.raises(NumericError):
        h_retrace(1.0, -0.1)


def test_retrace_lambda_defaults_to_one():
    assert MitigationMode(tag="retrace").lam == 1.0


def test_sequence_ratio_is_product_of_token_ratios():
    target = np.log(np.array([[0.5, 0.25], [0.1, 0.9]]))
    behavior = np.log(np.array([[0.25, 0.25], [0.2, 0.3]]))
    np.testing.assert_allclose(np.exp(sequence_log_ratio(target, behavior)), [2.0, 1.5])


def test_token_ratio_shape_mismatch():
    with pytest.raises(ConfigurationError):
        token_log_ratios(np.zeros((2, 3)), np.zeros((2, 2)))


def test_apply_mitigation_modes():
    log_ratios = np.log(np.array([0.5, 2.0, 20000.0]))
    base, clamped = apply_mitigation(BASE, log_ratios, clamp=1e4)
    np.testing.assert_allclose(base, [0.5, 2.0, 1e4])
    assert clamped == 1

    practical, _ = apply_mitigation(PRACTICAL, log_ratios)
    np.testing.assert_array_equal(practical, np.ones(3))

    retrace, _ = apply_mitigation(MitigationMode(tag="retrace", lam=0.8), log_ratios)
    np.testing.assert_allclose(retrace, [0.4, 0.8, 0.8])
    assert retrace.max() <= 0.8


def test_on_policy_weights_are_one():
    weights, _ = apply_mitigation(BASE, np.zeros(4))
    np.testing.assert_array_equal(weights, np.ones(4))


def _two_token_probability(params, prompt, a, b, mask=None):
    logits = forward_logits(params, np.array([*prompt, a, b]), mask).data
    return softmax_array(logits[len(prompt) - 1])[a] * softmax_array(logits[len(prompt)])[b]


def test_enumerated_two_token_ratios_against_one_skipped_layer():
    config = ModelConfig(
        num_layers=3, width=8, num_heads=2, vocab_size=5, max_sequence_length=4,
        mlp_ratio=2, init_scale=0.5, precision=Precision.FLOAT64,
    )
    params = init_params(config, stream(11, "init"))
    skipped = mask_from_indices([1], 3, border_b=1)
    prompt = np.array([0, 1])

    target_mass = behavior_mass = reweighted = 0.0
    for a, b in itertools.product(range(5), repeat=2):
        seq = TokenSequence(prompt=prompt, completion=np.array([a, b]))
        ratio = h_base(sequence_logprob(params, seq), sequence_logprob(params, seq, skipped))
        pi = _two_token_probability(params, prompt, a, b)
        eta = _two_token_probability(params, prompt, a, b, skipped)
        assert ratio == pytest.approx(pi / eta, rel=1e-10)
        target_mass += pi
        behavior_mass += eta
        reweighted += eta * ratio

    assert target_mass == pytest.approx(1.0, abs=1e-12)
    assert behavior_mass == pytest.approx(1.0, abs=1e-12)
    assert reweighted == pytest.approx(1.0, abs=1e-12)
