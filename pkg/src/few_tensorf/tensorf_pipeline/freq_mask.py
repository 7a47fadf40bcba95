import math
from enum import Enum
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from few_tensorf.errors import MaskError

# Вектор маски длины L со значениями в [0, 1], невозрастающий по индексу
MaskVector = np.ndarray


class MaskMode(str, Enum):
    DYNAMIC = "dynamic"
    FIXED_RATIO = "fixed_ratio"


class FrequencyMaskSchedule(BaseModel):
    """
    Расписание частотной маски: динамическое (видимая полоса растет до total_reg_iters)
    или с фиксированной долей видимых частот
    """
    model_config = ConfigDict(extra="forbid")

    enabled: bool = True
    mode: MaskMode = MaskMode.DYNAMIC
    total_reg_iters: Optional[int] = Field(default=None, ge=1)
    reg_fraction: float = Field(default=0.9, gt=0.0, le=1.0)
    v_ratio: float = Field(default=0.8, ge=0.0, le=1.0)

    def horizon(self, iterations: int) -> int:
        """Горизонт регуляризации T: явный или доля от общего числа итераций"""
        if self.total_reg_iters is not None:
            return self.total_reg_iters
        return max(1, math.ceil(self.reg_fraction * iterations))

    def mask(self, t: int, length: int, iterations: int) -> Optional[MaskVector]:
        """
        Маска для итерации t; None означает путь без маски

        Args:
            t: Текущая итерация
            length: Длина маскируемого вектора L
            iterations: Общее число итераций обучения
        """
        if not self.enabled:
            return None
        if self.mode == MaskMode.FIXED_RATIO:
            return fixed_ratio_mask(length, self.v_ratio)
        return dynamic_mask(t, self.horizon(iterations), length)


def dynamic_mask(t: int, total_reg_iters: int, length: int) -> MaskVector:
    """
    Динамическая маска: ptr = min(t * L / T + 3, L), первые floor(ptr) элементов равны 1,
    следующий - дробной части ptr, остальные 0. При t >= T маска из единиц.
    """
    if length < 1:
        raise MaskError(f"Длина маски должна быть положительной, получено {length}")
    if t < 0:
        raise MaskError(f"Номер итерации не может быть отрицательным: {t}")
    if total_reg_iters < 1:
        raise MaskError(f"Горизонт регуляризации должен быть положительным: {total_reg_iters}")

    if t >= total_reg_iters:
        return np.ones(length)

    ptr = min(t * length / total_reg_iters + 3.0, float(length))
    int_ptr = int(math.floor(ptr))
    mask = np.zeros(length)
    mask[:int_ptr] = 1.0
    if int_ptr < length:
        mask[int_ptr] = ptr - int_ptr
    return mask


def fixed_ratio_mask(length: int, v_ratio: float) -> MaskVector:
    """Первые floor(L * v_ratio) элементов равны 1, остальные 0"""
    if not 0.0 <= v_ratio <= 1.0:
        raise MaskError(f"Доля видимых частот должна лежать в [0, 1], получено {v_ratio}")
    mask = np.zeros(length)
    mask[:math.floor(length * v_ratio)] = 1.0
    return mask


def apply_mask(values: np.ndarray, mask: MaskVector) -> np.ndarray:
    """Поэлементное произведение по последней оси; вход не изменяется"""
    values = np.asarray(values)
    mask = np.asarray(mask)
    if mask.ndim != 1 or values.shape[-1] != mask.shape[0]:
        raise MaskError(f"Длина маски {mask.shape} не совпадает с длиной вектора {values.shape[-1:]}")
    return values * mask.astype(values.dtype, copy=False)


def encoding_length(dim: int, n_freq: int) -> int:
    return 2 * n_freq * dim


def positional_encoding(x: np.ndarray, n_freq: int, mask: Optional[MaskVector] = None) -> np.ndarray:
    """
    Позиционное кодирование sin/cos на частотах 2^0..2^(n_freq-1).

    Блоки упорядочены по частотам: [sin(2^k x), cos(2^k x)] для k = 0..n_freq-1, так что
    монотонная маска работает как фильтр низких частот. Исходный вход идет первым без маски.

    Args:
        x: Точки или направления (..., dim)
        n_freq: Число частот
        mask: Маска длины 2 * n_freq * dim (опционально)

    Returns:
        Массив (..., dim + 2 * n_freq * dim)
    """
    x = np.asarray(x)
    if n_freq == 0:
        return x.copy()
    freqs = (2.0 ** np.arange(n_freq)).astype(x.dtype)
    scaled = x[..., None, :] * freqs[:, None]
    encoded = np.stack([np.sin(scaled), np.cos(scaled)], axis=-2)
    encoded = encoded.reshape(*x.shape[:-1], encoding_length(x.shape[-1], n_freq))
    if mask is not None:
        encoded = apply_mask(encoded, mask)
    return np.concatenate([x, encoded], axis=-1)


def positional_encoding_backward(x: np.ndarray, n_freq: int, mask: Optional[MaskVector],
                                 d_out: np.ndarray) -> np.ndarray:
    """Градиент по входу кодирования при заданном градиенте по выходу (..., dim + 2 * n_freq * dim)"""
    x = np.asarray(x)
    dim = x.shape[-1]
    d_x = d_out[..., :dim].copy()
    if n_freq == 0:
        return d_x
    d_encoded = d_out[..., dim:]
    if mask is not None:
        d_encoded = apply_mask(d_encoded, mask)
    d_encoded = d_encoded.reshape(*x.shape[:-1], n_freq, 2, dim)
    freqs = (2.0 ** np.arange(n_freq)).astype(x.dtype)
    scaled = x[..., None, :] * freqs[:, None]
    d_x += ((d_encoded[..., 0, :] * np.cos(scaled) - d_encoded[..., 1, :] * np.sin(scaled)) * freqs[:, None]).sum(axis=-2)
    return d_x
