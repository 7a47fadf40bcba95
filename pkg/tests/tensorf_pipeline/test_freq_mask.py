import math

import numpy as np
import pytest

from few_tensorf.errors import MaskError
from few_tensorf.tensorf_pipeline.freq_mask import (
    FrequencyMaskSchedule,
    apply_mask,
    dynamic_mask,
    encoding_length,
    fixed_ratio_mask,
    positional_encoding,
    positional_encoding_backward,
)


def test_dynamic_mask_at_start_keeps_three_entries():
    np.testing.assert_array_equal(dynamic_mask(0, 100, 10), [1, 1, 1, 0, 0, 0, 0, 0, 0, 0])


def test_dynamic_mask_fractional_entry():
    np.testing.assert_allclose(dynamic_mask(25, 100, 10), [1, 1, 1, 1, 1, 0.5, 0, 0, 0, 0])


@pytest.mark.parametrize("t", [100, 101, 5000])
def test_dynamic_mask_after_horizon_is_ones(t):
    np.testing.assert_array_equal(dynamic_mask(t, 100, 16), np.ones(16))


def test_dynamic_mask_short_vector_is_full_from_start():
    np.testing.assert_array_equal(dynamic_mask(0, 100, 2), [1, 1])


def test_dynamic_mask_is_monotone():
    for t in np.linspace(0, 120, 50).astype(int):
        for length in range(1, 51):
            mask = dynamic_mask(int(t), 100, length)
            assert mask.shape == (length,)
            assert np.all((mask >= 0) & (mask <= 1))
            assert np.all(np.diff(mask) <= 0)
            later = dynamic_mask(int(t) + 1, 100, length)
            assert np.all(later >= mask)


def test_dynamic_mask_rejects_bad_arguments():
    with pytest.raises(MaskError):
        dynamic_mask(-1, 100, 10)
    with pytest.raises(MaskError):
        dynamic_mask(0, 100, 0)
    with pytest.raises(MaskError):
        dynamic_mask(0, 0, 10)


@pytest.mark.parametrize("ratio, expected_ones", [(0.8, 8), (1.0, 10), (0.0, 0), (0.25, 2)])
def test_fixed_ratio_mask(ratio, expected_ones):
    mask = fixed_ratio_mask(10, ratio)
    assert mask.sum() == expected_ones
    assert np.all(mask[:expected_ones] == 1.0)


def test_fixed_ratio_mask_rejects_ratio_out_of_range():
    with pytest.raises(MaskError):
        fixed_ratio_mask(10, 1.5)


def test_fixed_ratio_mask_uses_exact_floor():
    # 100 * 0.29 == 28.999999999999996 in binary floating point
    assert fixed_ratio_mask(100, 0.29).sum() == math.floor(100 * 0.29) == 28


def test_apply_mask():
    np.testing.assert_array_equal(apply_mask(np.array([2.0, 4.0, 6.0]), np.array([1.0, 0.5, 0.0])), [2, 2, 0])
    values = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(apply_mask(values, np.ones(3)), values)
    assert np.all(apply_mask(values, np.zeros(3)) == 0)


def test_apply_mask_does_not_modify_input():
    values = np.array([1.0, 2.0])
    apply_mask(values, np.zeros(2))
    np.testing.assert_array_equal(values, [1.0, 2.0])


def test_apply_mask_rejects_length_mismatch():
    with pytest.raises(MaskError):
        apply_mask(np.ones(3), np.ones(4))


def test_schedule_horizon_and_modes():
    schedule = FrequencyMaskSchedule(reg_fraction=0.5)
    assert schedule.horizon(100) == 50
    assert FrequencyMaskSchedule(total_reg_iters=7).horizon(100) == 7
    assert FrequencyMaskSchedule(enabled=False).mask(0, 10, 100) is None
    np.testing.assert_array_equal(FrequencyMaskSchedule(mode="fixed_ratio", v_ratio=0.8).mask(0, 10, 100),
                                  fixed_ratio_mask(10, 0.8))
    np.testing.assert_array_equal(schedule.mask(50, 10, 100), np.ones(10))


def test_encoding_of_origin():
    encoded = positional_encoding(np.zeros(3), 1)
    assert encoded.shape == (3 + encoding_length(3, 1),)
    np.testing.assert_array_equal(encoded[:3], 0.0)
    np.testing.assert_array_equal(encoded[3:6], 0.0)
    np.testing.assert_array_equal(encoded[6:9], 1.0)


def test_encoding_sin_and_cos_blocks():
    encoded = positional_encoding(np.array([math.pi / 2, 0.0, 0.0]), 1, np.ones(6))
    np.testing.assert_allclose(encoded[3:6], [1.0, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(encoded[6:9], [0.0, 1.0, 1.0], atol=1e-12)


def test_encoding_is_frequency_major():
    x = np.array([0.3, -0.7])
    encoded = positional_encoding(x, 3)
    for k in range(3):
        block = encoded[2 + 4 * k: 2 + 4 * (k + 1)]
        np.testing.assert_allclose(block, np.concatenate([np.sin(2 ** k * x), np.cos(2 ** k * x)]))


def test_encoding_with_ones_mask_equals_unmasked(rng):
    x = rng.normal(size=(7, 3))
    np.testing.assert_array_equal(positional_encoding(x, 4, np.ones(24)), positional_encoding(x, 4))


def test_encoding_keeps_raw_input_under_zero_mask(rng):
    x = rng.normal(size=(5, 3))
    encoded = positional_encoding(x, 2, np.zeros(12))
    np.testing.assert_array_equal(encoded[:, :3], x)
    assert np.all(encoded[:, 3:] == 0)


def test_encoding_backward_matches_finite_differences(rng):
    x = rng.normal(size=(4, 3))
    mask = dynamic_mask(10, 40, encoding_length(3, 3))
    upstream = rng.normal(size=(4, 3 + encoding_length(3, 3)))
    analytic = positional_encoding_backward(x, 3, mask, upstream)

    eps = 1e-6
    numeric = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        plus, minus = x.copy(), x.copy()
        plus[index] += eps
        minus[index] -= eps
        numeric[index] = np.sum(upstream * (positional_encoding(plus, 3, mask) - positional_encoding(minus, 3, mask)))
        numeric[index] /= 2 * eps
    np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-8)
