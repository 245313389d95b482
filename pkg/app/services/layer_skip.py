"""Layer-skipping module: valid layers, skip counts and uniform skip-mask sampling.

The skip count uses round-half-up of |T|·x (at least one layer when x > 0); this is
the rule that reproduces the published skip table (28 layers: 5% -> 1, 10% -> 3,
15% -> 4). Exactly `border_b` indices are protected at each end of the network.
"""
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, List, Sequence

import numpy as np

from app.core.errors import ConfigurationError, ContractError
from app.models.config import SkipConfig


@dataclass(frozen=True)
class SkipMask:
    sigma: np.ndarray = field(repr=False)
    skip_count: int

    @property
    def indices(self) -> List[int]:
        return [int(i) for i in np.flatnonzero(self.sigma)]

    @property
    def num_layers(self) -> int:
        return int(self.sigma.shape[0])

    def __repr__(self) -> str:
        return f"SkipMask(skipped={self.indices}, num_layers={self.num_layers})"


def valid_set(cfg: SkipConfig) -> List[int]:
    size = cfg.num_layers - 2 * cfg.border_b
    if size <= 0:
        raise ConfigurationError(
            f"border_b={cfg.border_b} leaves no valid layer in a {cfg.num_layers}-layer model"
        )
    return list(range(cfg.border_b, cfg.num_layers - cfg.border_b))


def skip_count(cfg: SkipConfig) -> int:
    if cfg.ratio_x == 0:
        return 0
    scaled = (Decimal(cfg.num_layers) * Decimal(str(cfg.ratio_x))).quantize(Decimal("1"), rounding=ROUND_HALF_UP)
    count = max(1, int(scaled))
    available = len(valid_set(cfg))
    if count > available:
        raise ConfigurationError(
            f"skip count {count} exceeds the {available} valid layers (x={cfg.ratio_x}, b={cfg.border_b})"
        )
    return count


def zeros_mask(num_layers: int) -> SkipMask:
    return SkipMask(sigma=np.zeros(num_layers, dtype=np.int8), skip_count=0)


def mask_from_indices(indices: Iterable[int], num_layers: int, border_b: int = 0) -> SkipMask:
    """Builds a mask skipping exactly `indices`; every index must be a valid layer."""
    chosen = sorted({int(i) for i in indices})
    valid = set(valid_set(SkipConfig.model_construct(ratio_x=0.0, border_b=border_b, num_layers=num_layers)))
    invalid = [i for i in chosen if i not in valid]
    if invalid:
        raise ConfigurationError(f"layers {invalid} are outside the valid set for b={border_b}")
    sigma = np.zeros(num_layers, dtype=np.int8)
    sigma[chosen] = 1
    return SkipMask(sigma=sigma, skip_count=len(chosen))


def sample_mask(cfg: SkipConfig, rng: np.random.Generator) -> SkipMask:
    """Draws `skip_count` distinct valid layers uniformly without replacement."""
    count = skip_count(cfg)
    if count == 0:
        return zeros_mask(cfg.num_layers)
    chosen = rng.choice(np.asarray(valid_set(cfg)), size=count, replace=False)
    sigma = np.zeros(cfg.num_layers, dtype=np.int8)
    sigma[chosen] = 1
    return SkipMask(sigma=sigma, skip_count=count)


def as_mask(mask, num_layers: int) -> SkipMask:
    """Accepts a SkipMask, a 0/1 vector or None (no skipping)."""
    if mask is None:
        return zeros_mask(num_layers)
    if isinstance(mask, SkipMask):
        result = mask
    else:
        raw = np.asarray(mask)
        if not np.all((raw == 0) | (raw == 1)):
            raise ContractError("skip mask entries must be 0 or 1")
        sigma = raw.astype(np.int8)
        result = SkipMask(sigma=sigma, skip_count=int(sigma.sum()))
    if result.num_layers != num_layers:
        raise ConfigurationError(f"mask has {result.num_layers} entries for a {num_layers}-layer model")
    return result


def sample_ensemble(cfg: SkipConfig, rng: np.random.Generator, size: int) -> List[SkipMask]:
    return [sample_mask(cfg, rng) for _ in range(size)]


def masks_from_index_lists(index_lists: Sequence[Sequence[int]], num_layers: int) -> List[SkipMask]:
    return [mask_from_indices(indices, num_layers) for indices in index_lists]
