import math

import numpy as np
import pytest

from few_tensorf.errors import MetricError
from few_tensorf.evaluation.metrics import mse, psnr, quantize_8bit


@pytest.mark.parametrize("error, expected", [(0.1, 20.0), (0.01, 40.0)])
def test_uniform_error_psnr(error, expected):
    gt = np.full((4, 5, 3), 0.5)
    assert psnr(gt + error, gt) == pytest.approx(expected, abs=1e-9)


def test_identical_images_give_infinity():
    image = np.random.default_rng(0).random((3, 3, 3))
    assert psnr(image, image) == math.inf


def test_psnr_is_symmetric(rng):
    a, b = rng.random((6, 6, 3)), rng.random((6, 6, 3))
    assert psnr(a, b) == psnr(b, a)


def test_small_mse_gives_sixty_decibels():
    gt = np.zeros((10, 10, 3))
    assert psnr(gt + 1e-3, gt) == pytest.approx(60.0, abs=1e-6)


def test_peak_scales_psnr():
    gt = np.zeros((2, 2, 3))
    assert psnr(gt + 25.5, gt, peak=255.0) == pytest.approx(20.0, abs=1e-9)


def test_quantized_psnr_ignores_sub_level_noise():
    gt = np.full((2, 2, 3), 100 / 255)
    assert psnr(gt + 0.001, gt, quantize=True) == math.inf
    np.testing.assert_allclose(quantize_8bit(np.array([0.0, 0.5, 2.0])), [0.0, 128 / 255, 1.0])


def test_metric_errors():
    with pytest.raises(MetricError):
        mse(np.zeros((2, 3)), np.zeros((3, 2)))
    with pytest.raises(MetricError):
        psnr(np.zeros(0), np.zeros(0))


def test_psnr_decreases_as_error_grows(rng):
    gt = rng.random((8, 8, 3))
    direction = rng.choice([-1.0, 1.0], size=gt.shape)
    values = [psnr(gt + scale * direction, gt) for scale in np.geomspace(1e-4, 0.5, 25)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_psnr_ignores_pixel_order(rng):
    pred, gt = rng.random((6, 7, 3)), rng.random((6, 7, 3))
    order = rng.permutation(6 * 7)
    shuffled_pred = pred.reshape(-1, 3)[order].reshape(pred.shape)
    shuffled_gt = gt.reshape(-1, 3)[order].reshape(gt.shape)
    assert psnr(shuffled_pred, shuffled_gt) == pytest.approx(psnr(pred, gt), abs=1e-12)
