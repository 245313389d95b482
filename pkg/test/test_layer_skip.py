import numpy as np
import pytest
from pydantic import ValidationError

from app.core.errors import ConfigurationError, ContractError
from app.core.seeding import stream
from app.models.config import SkipConfig
from app.services.layer_skip import (
    as_mask,
    mask_from_indices,
    masks_from_index_lists,
    sample_mask,
    skip_count,
    valid_set,
)


@pytest.mark.parametrize(
    "layers,ratio,expected",
    [
        (28, 0.05, 1),
        (28, 0.10, 3),
        (28, 0.15, 4),
        (8, 0.25, 2),
        (8, 0.125, 1),
        (8, 0.01, 1),
        (8, 0.0, 0),
    ],
)
def test_skip_count_rounds_half_up(layers, ratio, expected):
    assert skip_count(SkipConfig(num_layers=layers, ratio_x=ratio, border_b=1)) == expected


def test_valid_set_protects_borders():
    assert valid_set(SkipConfig(num_layers=8, border_b=2)) == [2, 3, 4, 5]


def test_skip_count_exceeding_valid_set_is_rejected():
    with pytest.raises(ValidationError):
        SkipConfig(num_layers=4, ratio_x=0.75, border_b=1)


def test_border_leaving_no_layer_is_rejected():
    with pytest.raises(ValidationError):
        SkipConfig(num_layers=4, ratio_x=0.25, border_b=2)


# Upper 1% points of the chi-square distribution.
CHI2_CRITICAL_01 = {5: 15.086, 14: 29.141}


def test_sampled_masks_hold_count_and_border_over_random_configs():
    rng = stream(0, "configs")
    for draw in range(10_000):
        layers = int(rng.integers(2, 33))
        border = int(rng.integers(0, (layers - 1) // 2 + 1))
        available = layers - 2 * border
        count = int(rng.integers(0, min(available, layers - 1) + 1))
        cfg = SkipConfig(num_layers=layers, ratio_x=count / layers, border_b=border)
        mask = sample_mask(cfg, stream(draw, "mask", 0))
        assert skip_count(cfg) == count
        assert mask.sigma.sum() == count == mask.skip_count
        assert set(np.unique(mask.sigma)) <= {0, 1}
        assert not mask.sigma[:border].any() and not mask.sigma[layers - border:].any()


def _chi_square(observed, expected):
    observed = np.asarray(observed, dtype=float)
    return float(np.sum((observed - expected) ** 2 / expected))


def test_mask_sampling_is_uniform_over_valid_layers():
    cfg = SkipConfig(num_layers=8, ratio_x=0.25, border_b=1)
    rng = stream(1, "mask", 0)
    draws = 10_000
    counts = np.zeros(8)
    pairs = {}
    for _ in range(draws):
        mask = sample_mask(cfg, rng)
        counts += mask.sigma
        key = tuple(mask.indices)
        pairs[key] = pairs.get(key, 0) + 1

    assert counts[0] == 0 and counts[7] == 0
    np.testing.assert_allclose(counts[1:7] / draws, 2 / 6, atol=0.02)
    assert _chi_square(counts[1:7], 2 * draws / 6) < CHI2_CRITICAL_01[5]
    assert len(pairs) == 15
    assert _chi_square(list(pairs.values()), draws / 15) < CHI2_CRITICAL_01[14]


def test_same_stream_gives_same_mask():
    cfg = SkipConfig(num_layers=8, ratio_x=0.25, border_b=1)
    assert sample_mask(cfg, stream(3, "mask", 5)).indices == sample_mask(cfg, stream(3, "mask", 5)).indices


def test_mask_from_indices_rejects_border_layers():
    with pytest.raises(ConfigurationError):
        mask_from_indices([0], 4, border_b=1)


def test_as_mask_checks_length():
    assert as_mask(None, 5).skip_count == 0
    assert as_mask([0, 1, 0], 3).indices == [1]
    with pytest.raises(ConfigurationError):
        as_mask(np.zeros(4), 3)


def test_masks_from_index_lists():
    masks = masks_from_index_lists([[1], [1, 2]], 4)
    assert [m.indices for m in masks] == [[1], [1, 2]]


def test_as_mask_rejects_non_binary_entries():
    with pytest.raises(ContractError):
        as_mask([0, 2, 0], 3)
    with pytest.raises(ContractError):
        as_mask(np.array([0.0, 0.5, 0.0]), 3)
