import math

import numpy as np

from few_tensorf.errors import MetricError


def quantize_8bit(image: np.ndarray, peak: float = 1.0) -> np.ndarray:
    """Округление к 8-битной шкале с возвратом в диапазон [0, peak]"""
    return np.round(np.clip(np.asarray(image, dtype=np.float64) / peak, 0.0, 1.0) * 255.0) / 255.0 * peak


def mse(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricError(f"Формы изображений не совпадают: {pred.shape} и {gt.shape}")
    if pred.size == 0:
        raise MetricError("Пустые изображения")
    return float(np.mean((pred - gt) ** 2))


def psnr(pred: np.ndarray, gt: np.ndarray, peak: float = 1.0, quantize: bool = False) -> float:
    """
    PSNR = 10 * log10(peak^2 / MSE) по всем пикселям и каналам

    Args:
        pred: Предсказанное изображение
        gt: Эталонное изображение
        peak: Максимальное значение пикселя
        quantize: Округлить оба изображения к 8 битам перед сравнением

    Returns:
        PSNR в децибелах; при MSE = 0 возвращается +inf
    """
    if quantize:
        pred, gt = quantize_8bit(pred, peak), quantize_8bit(gt, peak)
    error = mse(pred, gt)
    if error == 0.0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / error)
