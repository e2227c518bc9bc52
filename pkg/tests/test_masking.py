import math
from decimal import Decimal

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wifipose.errors import ConfigError, DataError
from wifipose.masking import MaskStrategy, apply_mask, masked_count, sample_mask, scatter_tokens

STRATEGIES = list(MaskStrategy)


def decimal_ceil(ratio, units):
    """Oracle: ceil on the decimal literal of the ratio."""
    return math.ceil(Decimal(repr(float(ratio))) * units)


def test_eighty_percent_of_ten():
    m = sample_mask(2, 5, "unstructured", 0.8, np.random.default_rng(0))
    assert len(m.masked) == 8


def test_zero_ratio_masks_nothing():
    for s in STRATEGIES:
        m = sample_mask(3, 4, s, 0.0, np.random.default_rng(0))
        assert m.masked.size == 0
        np.testing.assert_array_equal(m.visible, np.arange(12))


def test_channel_half_of_four_rows():
    m = sample_mask(4, 5, "channel", 0.5, np.random.default_rng(3))
    assert len(m.masked) == 10
    rows = np.unique(m.masked // 5)
    assert len(rows) == 2
    for r in rows:
        assert set(range(r * 5, r * 5 + 5)) <= set(m.masked.tolist())


def test_time_masks_whole_columns():
    m = sample_mask(4, 6, "time", 0.3, np.random.default_rng(4))
    cols = np.unique(m.masked % 6)
    assert len(cols) == math.ceil(0.3 * 6)
    assert len(m.masked) == len(cols) * 4


def test_float_overshoot_is_not_rounded_up():
    # 0.07 * 100 evaluates to 7.000000000000001 in binary floating point
    assert 0.07 * 100 > 7
    assert masked_count(100, 0.07) == 7
    assert masked_count(100, 0.29) == 29


def test_ratio_out_of_range():
    for bad in (1.0, -0.1, 1.5):
        with pytest.raises(ConfigError):
            sample_mask(2, 2, "unstructured", bad)


def test_unknown_strategy():
    with pytest.raises(ConfigError, match="unknown mask strategy"):
        MaskStrategy.parse("diagonal")
    assert MaskStrategy.parse("channel") is MaskStrategy.CHANNEL
    assert MaskStrategy.parse("time_structured") is MaskStrategy.TIME


def test_same_seed_same_mask():
    for s in STRATEGIES:
        a = sample_mask(5, 7, s, 0.6, np.random.default_rng(9))
        b = sample_mask(5, 7, s, 0.6, np.random.default_rng(9))
        np.testing.assert_array_equal(a.masked, b.masked)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.floats(0, 0.999), st.sampled_from(STRATEGIES),
       st.integers(0, 2**32 - 1))
def test_partition_and_cardinality(rows, cols, ratio, strategy, seed):
    m = sample_mask(rows, cols, strategy, ratio, np.random.default_rng(seed))
    n = rows * cols
    both = np.concatenate([m.masked, m.visible])
    np.testing.assert_array_equal(np.sort(both), np.arange(n))
    if strategy is MaskStrategy.UNSTRUCTURED:
        assert len(m.masked) == decimal_ceil(ratio, n)
    elif strategy is MaskStrategy.CHANNEL:
        assert len(m.masked) == decimal_ceil(ratio, rows) * cols
    else:
        assert len(m.masked) == decimal_ceil(ratio, cols) * rows


# -- apply_mask ------------------------------------------------------------------


def test_empty_mask_keeps_everything(rng):
    tokens = rng.normal(size=(6, 4))
    m = sample_mask(2, 3, "unstructured", 0.0, rng)
    vis, vis_idx, msk_idx = apply_mask(tokens, m)
    np.testing.assert_array_equal(vis, tokens)
    np.testing.assert_array_equal(vis_idx, np.arange(6))
    assert msk_idx.size == 0


def test_all_but_one(rng):
    tokens = rng.normal(size=(10, 3))
    m = sample_mask(2, 5, "unstructured", 0.9, rng)
    vis, vis_idx, _ = apply_mask(tokens, m)
    assert vis.shape == (1, 3)
    np.testing.assert_array_equal(vis[0], tokens[vis_idx[0]])


def test_gather_scatter_round_trip(rng):
    tokens = rng.normal(size=(2, 12, 5))
    m = sample_mask(3, 4, "unstructured", 0.5, rng)
    vis, vis_idx, msk_idx = apply_mask(tokens, m, grid=(3, 4))
    assert np.all(np.diff(vis_idx) > 0)  # relative order preserved
    filled = scatter_tokens(vis, vis_idx, msk_idx, tokens[:, msk_idx])
    np.testing.assert_array_equal(filled, tokens)


def test_grid_mismatch_rejected(rng):
    m = sample_mask(3, 4, "unstructured", 0.5, rng)
    with pytest.raises(DataError):
        apply_mask(np.zeros((12, 2)), m, grid=(4, 3))
    with pytest.raises(DataError):
        apply_mask(np.zeros((10, 2)), m)


def test_unstructured_marginal_is_uniform():
    gen = np.random.default_rng(2024)
    counts = np.zeros(20)
    for _ in range(2000):
        counts[sample_mask(4, 5, "unstructured", 0.5, gen).masked] += 1
    assert np.all(np.abs(counts / 2000 - 0.5) < 0.05)
