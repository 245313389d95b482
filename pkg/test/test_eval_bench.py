import numpy as np
import pytest

from app.core.errors import ConfigurationError, ContractError
from app.models.common import CheckStatus
from app.models.config import DecodeConfig, ThroughputConfig
from app.models.metrics import EvalResult, RunSummary, ThroughputSample
from app.services.eval_bench import (
    check_throughput_scaling,
    delta_report,
    evaluate_pass_at_1,
    instance_label,
    linear_fit,
    measure_throughput,
    mitigation_stability,
    summarize_extremes,
    throughput_mask,
)
from app.services.task_suite import PAD, reference_completion


def _summary(ratio, mode, accuracies, lam=None, tokens=1000, seconds=1.0):
    return RunSummary(
        run_id=f"{ratio}-{mode}",
        ratio_x=ratio,
        border_b=1,
        mitigation=mode,
        lam=lam,
        generated_tokens=tokens,
        generation_seconds=seconds,
        total_seconds=2 * seconds,
        eval=EvalResult(
            benchmark_names=["tier0", "tier1"],
            benchmark_accuracies=accuracies,
            aggregate=float(np.mean(accuracies)),
            decode_temperature=0.6,
            decode_top_p=0.95,
        ),
    )


def test_pass_at_1_with_oracle_and_null_generators(one_digit_data):
    _, benches = one_digit_data

    def oracle(bench, index):
        return np.array([reference_completion(p, 10) for p in bench.problems])

    def null(bench, index):
        return np.full((len(bench), 10), PAD)

    decode = DecodeConfig()
    assert evaluate_pass_at_1(None, benches, decode, 10, 0, generate_fn=oracle).aggregate == 1.0
    result = evaluate_pass_at_1(None, benches, decode, 10, 0, generate_fn=null)
    assert result.benchmark_accuracies == [0.0, 0.0]
    assert result.benchmark_names == ["tier0", "tier1"]


def test_pass_at_1_with_policy_is_deterministic(tiny_params, one_digit_data):
    _, benches = one_digit_data
    a = evaluate_pass_at_1(tiny_params, benches, DecodeConfig(), 10, seed=1)
    b = evaluate_pass_at_1(tiny_params, benches, DecodeConfig(), 10, seed=1)
    assert a == b
    assert 0.0 <= a.aggregate <= 1.0


def test_pass_at_1_needs_benchmarks():
    with pytest.raises(ContractError):
        evaluate_pass_at_1(None, [], DecodeConfig(), 10, 0)


def test_delta_report_relative_and_absolute():
    reports = {r.metric: r for r in delta_report({"accuracy": 0.55, "tokens_per_sec": 120.0}, {"accuracy": 0.5, "tokens_per_sec": 100.0})}
    assert reports["accuracy"].delta == pytest.approx(10.0)
    assert reports["accuracy"].delta_abs == pytest.approx(0.05)
    assert reports["tokens_per_sec"].delta == pytest.approx(20.0)


def test_delta_report_zero_baseline_is_absolute_only():
    (report,) = delta_report({"accuracy": 0.2}, {"accuracy": 0.0})
    assert report.absolute_only and report.delta is None
    assert report.delta_abs == pytest.approx(0.2)


def test_throughput_mask_respects_border():
    mask = throughput_mask(8, 1, 3, seed=0)
    assert mask.skip_count == 3 and 0 not in mask.indices and 7 not in mask.indices
    assert throughput_mask(8, 1, 0, seed=0).indices == []
    with pytest.raises(ConfigurationError):
        throughput_mask(4, 1, 3, seed=0)


def test_measure_throughput_reports_consistent_rates(tiny_params):
    cfg = ThroughputConfig(skip_counts=[0, 2], num_prompts=2, group_size=2, completion_length=3, repetitions=2, warmup=0)
    prompts = np.array([[12, 1, 10, 2, 11, 17], [12, 3, 10, 4, 11, 17]])
    samples = measure_throughput(tiny_params, cfg, prompts, seed=0)
    assert [s.skipped_layers for s in samples] == [0, 2]
    for s in samples:
        assert s.total_tokens == 12
        assert len(s.repetitions) == 2
        assert s.tokens_per_sec == pytest.approx(s.total_tokens / s.wall_seconds)


def test_linear_fit_on_a_line():
    slope, intercept, r2 = linear_fit([0, 1, 2, 3], [10.0, 12.0, 14.0, 16.0])
    assert (slope, intercept, r2) == pytest.approx((2.0, 10.0, 1.0))


def _sample(skipped, rate):
    return ThroughputSample(skipped_layers=skipped, total_tokens=int(rate), wall_seconds=1.0, tokens_per_sec=float(int(rate)))


def test_throughput_scaling_check():
    good = [_sample(k, 100 * 8 / (8 - k)) for k in range(4)]
    result = check_throughput_scaling(good, 8)
    assert result.status == CheckStatus.PASS
    assert result.details["quarter_gain"] > 0.10

    flat = [_sample(k, 100) for k in range(4)]
    assert check_throughput_scaling(flat, 8).status == CheckStatus.FAIL


def test_rate_must_match_tokens_over_seconds():
    with pytest.raises(ValueError):
        ThroughputSample(skipped_layers=0, total_tokens=100, wall_seconds=2.0, tokens_per_sec=100.0)


def test_extremes_pick_best_and_worst():
    baseline = _summary(0.0, "base", [0.5, 0.5])
    instances = [
        _summary(0.125, "base", [0.6, 0.5]),
        _summary(0.125, "practical", [0.3, 0.4]),
        _summary(0.125, "retrace", [0.5, 0.52], lam=1.0),
    ]
    table = summarize_extremes(instances, baseline)
    assert table.best.instance == instance_label(instances[0])
    assert table.worst.instance == instance_label(instances[1])
    assert table.worst.benchmark_deltas == pytest.approx([-0.2, -0.1])
    assert table.worst.mean_abs_delta == pytest.approx(0.15)


def test_stability_tally_counts_neutral_first():
    baseline = _summary(0.0, "base", [0.5, 0.5])
    instances = [
        _summary(0.125, "base", [0.6, 0.6]),
        _summary(0.125, "practical", [0.3, 0.3]),
        _summary(0.125, "retrace", [0.505, 0.5], lam=1.0),
        _summary(0.25, "base", [0.2, 0.2]),
        _summary(0.25, "practical", [0.55, 0.55]),
        _summary(0.25, "retrace", [0.45, 0.45], lam=1.0),
    ]
    tallies = {t.mitigation: t for t in mitigation_stability(instances, baseline, threshold=0.01)}
    assert (tallies["base"].best, tallies["base"].worst) == (1, 1)
    assert (tallies["practical"].best, tallies["practical"].worst) == (1, 1)
    assert tallies["retrace(1)"].neutral == 1
    assert tallies["retrace(1)"].best == tallies["retrace(1)"].worst == 0
