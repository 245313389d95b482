import numpy as np
import pytest

from app.core.errors import ContractError
from app.models.common import CheckStatus, MitigationTag
from app.models.config import MitigationMode, TheoryConfig
from app.services.layer_skip import masks_from_index_lists, zeros_mask
from app.services.theory_checks import (
    EnsembleSpec,
    EnumerablePolicy,
    check_estimator_identity,
    check_normalization,
    check_paired_variance,
    check_unbiasedness,
    check_variance_bound,
    constant_one,
    draw_ensemble_samples,
    enumerate_sequences,
    exact_expected_value,
    last_token_indicator,
    mean_behavior_policy,
    micro_model,
    most_biased_target,
    run_theory_suite,
    sequence_codes,
)

PROMPT = np.array([0, 1])


@pytest.fixture(scope="module")
def micro():
    cfg = TheoryConfig(completion_length=3, n_samples=20_000)
    params = micro_model(cfg, seed=7)
    ensemble = EnsembleSpec(masks_from_index_lists(cfg.ensemble, cfg.num_layers))
    return cfg, params, ensemble


def test_enumeration_order_and_codes():
    seqs = enumerate_sequences(3, 2)
    assert seqs.shape == (9, 2)
    np.testing.assert_array_equal(seqs[5], [1, 2])
    np.testing.assert_array_equal(sequence_codes(seqs, 3), np.arange(9))


def test_enumeration_limit():
    with pytest.raises(ContractError):
        enumerate_sequences(6, 7)


def test_empty_ensemble():
    with pytest.raises(ContractError):
        EnsembleSpec([])


def test_every_policy_is_normalized(micro):
    cfg, params, ensemble = micro
    result = check_normalization(params, ensemble, PROMPT, cfg.completion_length)
    assert result.status == CheckStatus.PASS
    assert result.details["max_error"] < 1e-9


def test_expected_value_of_one_is_one(micro):
    cfg, params, _ = micro
    policy = EnumerablePolicy(params, zeros_mask(cfg.num_layers), PROMPT, cfg.completion_length)
    assert exact_expected_value(policy, constant_one) == pytest.approx(1.0, abs=1e-12)


def test_estimator_identity_holds_per_member_and_averaged(micro):
    cfg, params, ensemble = micro
    result = check_estimator_identity(params, ensemble, PROMPT, cfg.completion_length, last_token_indicator(0), 1e-9)
    assert result.status == CheckStatus.PASS
    assert result.details["averaged"] == pytest.approx(result.exact, abs=1e-9)


def test_mixture_is_the_member_average(micro):
    cfg, params, ensemble = micro
    mixture = mean_behavior_policy(ensemble, params, PROMPT, cfg.completion_length)
    members = [EnumerablePolicy(params, m, PROMPT, cfg.completion_length).distribution().probabilities for m in ensemble.masks]
    np.testing.assert_allclose(mixture.probabilities, np.mean(members, axis=0), rtol=1e-12)


def test_importance_weighted_estimate_is_unbiased(micro):
    cfg, params, ensemble = micro
    result = check_unbiasedness(
        params, ensemble, PROMPT, cfg.completion_length, last_token_indicator(0), cfg.n_samples, cfg.tolerance, seed=7
    )
    assert result.status == CheckStatus.PASS
    assert abs(result.details["bias"]) <= result.band


def test_samples_follow_the_member_assignment(micro):
    cfg, params, ensemble = micro
    samples = draw_ensemble_samples(params, ensemble, PROMPT, cfg.completion_length, 500, seed=1)
    assert samples.sequences.shape == (500, cfg.completion_length)
    assert set(np.unique(samples.members)) <= {0, 1, 2}
    assert np.all(np.isfinite(samples.log_h))


def test_unweighted_estimator_is_biased_under_deep_skipping(micro):
    cfg, params, _ = micro
    control = EnsembleSpec(masks_from_index_lists([[1, 2]], cfg.num_layers))
    target = most_biased_target(params, control, PROMPT, cfg.completion_length)
    result = check_unbiasedness(
        params, control, PROMPT, cfg.completion_length, last_token_indicator(target), cfg.n_samples, cfg.tolerance,
        seed=7, weighting=MitigationTag.PRACTICAL, name="negative_control",
    )
    assert result.status == CheckStatus.PASS
    assert abs(result.details["bias"]) > result.band


def test_weight_bounds(micro):
    cfg, params, _ = micro
    control = EnsembleSpec(masks_from_index_lists([[1, 2]], cfg.num_layers))
    samples = draw_ensemble_samples(params, control, PROMPT, cfg.completion_length, 5000, seed=2)

    retrace = check_variance_bound(samples, MitigationMode(tag="retrace", lam=0.9))
    assert retrace.status == CheckStatus.PASS and retrace.details["max"] <= 0.9
    practical = check_variance_bound(samples, MitigationMode(tag="practical"))
    assert practical.status == CheckStatus.PASS and practical.details["variance"] == 0.0
    assert check_variance_bound(samples, MitigationMode(tag="base")).status == CheckStatus.REPORT
    assert check_paired_variance(samples, 0.9).status == CheckStatus.PASS


def test_full_suite_passes_on_the_default_micro_model():
    report = run_theory_suite(TheoryConfig(completion_length=3, n_samples=20_000), seed=7)
    assert report.passed, [(c.name, c.status) for c in report.checks]
    assert len(report.checks) == 10
