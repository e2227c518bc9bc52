"""Patch-grid masking: unstructured, channel-structured and time-structured.

Grid rows are subcarrier bands, grid columns are time steps.  Channel masking
removes whole rows, time masking removes whole columns.
"""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, DataError


class MaskStrategy(str, Enum):
    UNSTRUCTURED = "unstructured"
    CHANNEL = "channel_structured"
    TIME = "time_structured"

    @classmethod
    def parse(cls, value) -> "MaskStrategy":
        if isinstance(value, cls):
            return value
        aliases = {"channel": cls.CHANNEL, "time": cls.TIME, "random": cls.UNSTRUCTURED}
        key = str(value).lower()
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(
                f"unknown mask strategy {value!r}; expected unstructured, channel or time"
            ) from None


@dataclass(frozen=True)
class MaskSpec:
    strategy: MaskStrategy
    ratio: float
    masked: np.ndarray  # sorted int64 patch indices
    grid_rows: int
    grid_cols: int

    @property
    def n(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def visible(self) -> np.ndarray:
        keep = np.ones(self.n, dtype=bool)
        keep[self.masked] = False
        return np.flatnonzero(keep)


def masked_count(units: int, ratio: float) -> int:
    """ceil(ratio * units), evaluated on the decimal value of ``ratio``.

    Plain float products overshoot (0.07 * 100 == 7.000000000000001), so the
    product is taken in exact rational arithmetic.
    """
    return min(units, math.ceil(Fraction(repr(float(ratio))) * units))


def check_ratio(ratio: float) -> float:
    ratio = float(ratio)
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in [0, 1), got {ratio}")
    return ratio


def sample_mask(grid_rows: int, grid_cols: int, strategy="unstructured", ratio: float = 0.8,
                rng: np.random.Generator | None = None) -> MaskSpec:
    strategy = MaskStrategy.parse(strategy)
    ratio = check_ratio(ratio)
    if grid_rows <= 0 or grid_cols <= 0:
        raise ConfigError(f"mask grid must be positive, got {grid_rows}x{grid_cols}")
    rng = rng if rng is not None else np.random.default_rng()
    grid = np.arange(grid_rows * grid_cols).reshape(grid_rows, grid_cols)

    if strategy is MaskStrategy.UNSTRUCTURED:
        k = masked_count(grid.size, ratio)
        masked = rng.permutation(grid.size)[:k]
    elif strategy is MaskStrategy.CHANNEL:
        rows = rng.permutation(grid_rows)[:masked_count(grid_rows, ratio)]
        masked = grid[rows].ravel()
    else:
        cols = rng.permutation(grid_cols)[:masked_count(grid_cols, ratio)]
        masked = grid[:, cols].ravel()
    return MaskSpec(strategy, ratio, np.sort(masked).astype(np.int64), grid_rows, grid_cols)


def apply_mask(tokens, mask: MaskSpec, grid: tuple[int, int] | None = None):
    """Keep the visible tokens of ``tokens`` (shape (..., n, d)) in original order.

    Returns ``(visible_tokens, visible_indices, masked_indices)``.
    """
    n = tokens.shape[-2]
    if grid is not None and tuple(grid) != (mask.grid_rows, mask.grid_cols):
        raise DataError(f"mask grid {(mask.grid_rows, mask.grid_cols)} != token grid {tuple(grid)}")
    if n != mask.n:
        raise DataError(f"mask covers {mask.n} patches but tokens hold {n}")
    vis = mask.visible
    return tokens[..., vis, :], vis, mask.masked


def scatter_tokens(visible, visible_idx, masked_idx, fill):
    """Place visible rows back at their indices; masked rows take ``fill``."""
    n = len(visible_idx) + len(masked_idx)
    out = np.empty((*visible.shape[:-2], n, visible.shape[-1]), dtype=visible.dtype)
    out[..., visible_idx, :] = visible
    out[..., masked_idx, :] = fill
    return out
