from dataclasses import dataclass
from typing import Optional

import numpy as np

from few_tensorf.config import ModelConfig, MaskSchedulesConfig
from few_tensorf.tensorf_pipeline.decoder import MLPDecoder
from few_tensorf.tensorf_pipeline.factor_grid import (
    FactorizedAppearanceGrid,
    FactorizedDensityGrid,
    GridGeometry,
)
from few_tensorf.tensorf_pipeline.freq_mask import MaskVector, encoding_length

# Независимые потоки случайности от одного seed
INIT_STREAM_DENSITY = 1
INIT_STREAM_APPEARANCE = 2
INIT_STREAM_DECODER = 3


def decoder_input_dim(feature_dim: int, n_freq_features: int, n_freq_view: int) -> int:
    return feature_dim + 3 + encoding_length(feature_dim, n_freq_features) + encoding_length(3, n_freq_view)


@dataclass
class FieldMasks:
    """Маски одной итерации; None - путь без маски"""
    density: Optional[MaskVector] = None
    appearance: Optional[MaskVector] = None
    encoding_features: Optional[MaskVector] = None
    encoding_view: Optional[MaskVector] = None


@dataclass
class RadianceField:
    """Все обучаемые части модели: сетки плотности и внешнего вида и декодер цвета"""
    density: FactorizedDensityGrid
    appearance: FactorizedAppearanceGrid
    decoder: MLPDecoder
    n_freq_features: int
    n_freq_view: int

    @property
    def geometry(self) -> GridGeometry:
        return self.density.geometry

    @property
    def dtype(self) -> np.dtype:
        return self.density.dtype

    def parameters(self) -> dict[str, np.ndarray]:
        """Плоский словарь параметров с префиксами density., appearance., decoder."""
        params = {}
        for prefix, part in (("density", self.density), ("appearance", self.appearance), ("decoder", self.decoder)):
            params.update({f"{prefix}.{name}": value for name, value in part.parameters().items()})
        return params

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(value) for name, value in self.parameters().items()}

    def masks_at(self, schedules: MaskSchedulesConfig, t: int, iterations: int) -> FieldMasks:
        """Маски всех трех расписаний на итерации t"""
        return FieldMasks(
            density=schedules.density.mask(t, self.density.n_components, iterations),
            appearance=schedules.appearance.mask(t, self.appearance.feature_dim, iterations),
            encoding_features=schedules.encoding.mask(
                t, encoding_length(self.appearance.feature_dim, self.n_freq_features), iterations),
            encoding_view=schedules.encoding.mask(t, encoding_length(3, self.n_freq_view), iterations),
        )

    def full_masks(self) -> FieldMasks:
        """Маски из единиц: полная модель без подавления частот"""
        return FieldMasks(
            density=np.ones(self.density.n_components),
            appearance=np.ones(self.appearance.feature_dim),
            encoding_features=np.ones(encoding_length(self.appearance.feature_dim, self.n_freq_features)),
            encoding_view=np.ones(encoding_length(3, self.n_freq_view)),
        )


def build_field(config: ModelConfig, seed: int) -> RadianceField:
    """
    Создает модель со случайной инициализацией, детерминированной по seed

    Args:
        config: Параметры модели
        seed: Зерно генератора

    Returns:
        Инициализированная модель RadianceField
    """
    dtype = np.dtype(config.dtype)
    geometry = GridGeometry(config.resolution, config.aabb_min, config.aabb_max)
    density = FactorizedDensityGrid.random(
        geometry, config.density_rank, config.decomposition, config.density_activation,
        scale=config.density_init_scale, rng=np.random.default_rng([seed, INIT_STREAM_DENSITY]), dtype=dtype,
    )
    appearance = FactorizedAppearanceGrid.random(
        geometry, config.appearance_rank, config.feature_dim, config.decomposition,
        scale=config.appearance_init_scale, rng=np.random.default_rng([seed, INIT_STREAM_APPEARANCE]), dtype=dtype,
    )
    decoder = MLPDecoder.initialize(
        decoder_input_dim(config.feature_dim, config.n_freq_features, config.n_freq_view),
        tuple(config.decoder_hidden), rng=np.random.default_rng([seed, INIT_STREAM_DECODER]), dtype=dtype,
    )
    return RadianceField(density, appearance, decoder, config.n_freq_features, config.n_freq_view)
