import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

import numpy as np

from few_tensorf.config import RenderConfig
from few_tensorf.tensorf_pipeline.factor_grid import GridCache, GridGeometry
from few_tensorf.tensorf_pipeline.decoder import DecoderCache
from few_tensorf.tensorf_pipeline.field import FieldMasks, RadianceField
from few_tensorf.tensorf_pipeline.freq_mask import (
    apply_mask,
    encoding_length,
    positional_encoding,
    positional_encoding_backward,
)

if TYPE_CHECKING:
    from few_tensorf.training.state import TrainState

logger = logging.getLogger("FewT.Renderer")


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise ValueError(f"Направление луча должно быть единичным, |d| = {np.linalg.norm(self.direction)}")
        if not 0 <= self.near < self.far:
            raise ValueError(f"Требуется 0 <= near < far, получено near={self.near}, far={self.far}")


@dataclass
class RayBatch:
    """Пакет лучей: начала, единичные направления и (опционально) эталонные цвета"""
    origins: np.ndarray
    directions: np.ndarray
    colors: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.origins.shape[0]

    def subset(self, indices: np.ndarray) -> "RayBatch":
        colors = None if self.colors is None else self.colors[indices]
        return RayBatch(self.origins[indices], self.directions[indices], colors)


@dataclass
class CompositeResult:
    rgb: np.ndarray
    opacity: np.ndarray
    weights: np.ndarray
    transmittance: np.ndarray


@dataclass
class RenderCache:
    t_values: np.ndarray
    deltas: np.ndarray
    valid: np.ndarray
    sample_colors: np.ndarray
    composite: CompositeResult
    raw: np.ndarray
    density_cache: GridCache
    appearance_cache: GridCache
    masked_features: np.ndarray
    decoder_cache: DecoderCache
    masks: FieldMasks


@dataclass
class RenderResult:
    colors: np.ndarray
    opacity: np.ndarray
    occlusion: float
    weights: np.ndarray
    sigma: np.ndarray
    cache: Optional[RenderCache] = None


def intersect_aabb(origins: np.ndarray, directions: np.ndarray, geometry: GridGeometry,
                   near: float, far: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Пересечение лучей с AABB методом слоев, суженное до [near, far]

    Returns:
        Начало и конец отрезка внутри AABB и признак попадания
    """
    lo = np.asarray(geometry.aabb_min, dtype=origins.dtype)
    hi = np.asarray(geometry.aabb_max, dtype=origins.dtype)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    t_enter = np.fmax.reduce(np.fmin(t0, t1), axis=-1)
    t_exit = np.fmin.reduce(np.fmax(t0, t1), axis=-1)
    t_enter = np.maximum(t_enter, near)
    t_exit = np.minimum(t_exit, far)
    return t_enter, t_exit, t_exit > t_enter


def sample_along_rays(origins: np.ndarray, directions: np.ndarray, geometry: Optional[GridGeometry],
                      near: float, far: float, n_samples: int,
                      rng: Optional[np.random.Generator] = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Стратифицированные отсчеты вдоль лучей. Без rng берутся середины страт, с rng -
    равномерный сдвиг внутри страты. Длина интервала равна ширине страты.

    Returns:
        Позиции t (n, s), длины интервалов (n, s), признак попадания в AABB (n,)
    """
    if n_samples < 2:
        raise ValueError(f"Требуется не меньше двух отсчетов на луч, получено {n_samples}")
    n = origins.shape[0]
    dtype = origins.dtype
    if geometry is None:
        t_enter = np.full(n, near, dtype=dtype)
        t_exit = np.full(n, far, dtype=dtype)
        hit = np.ones(n, dtype=bool)
    else:
        t_enter, t_exit, hit = intersect_aabb(origins, directions, geometry, near, far)

    with np.errstate(invalid="ignore"):
        width = (np.where(hit, t_exit - t_enter, 0) / n_samples).astype(dtype)
    start = np.where(hit, t_enter, 0).astype(dtype)
    offsets = np.full((n, n_samples), 0.5, dtype=dtype) if rng is None else rng.random((n, n_samples)).astype(dtype)
    t_values = start[:, None] + (np.arange(n_samples, dtype=dtype) + offsets) * width[:, None]
    deltas = np.repeat(width[:, None], n_samples, axis=1)
    return t_values, deltas, hit


def sample_ray(ray: Ray, n_samples: int, jitter: bool = False, rng_seed: int = 0,
               geometry: Optional[GridGeometry] = None) -> tuple[np.ndarray, np.ndarray]:
    """Отсчеты одного луча; промах мимо AABB дает пустые массивы"""
    rng = np.random.default_rng(rng_seed) if jitter else None
    t_values, deltas, hit = sample_along_rays(ray.origin[None], ray.direction[None], geometry,
                                              ray.near, ray.far, n_samples, rng)
    if not hit[0]:
        return np.empty(0), np.empty(0)
    return t_values[0], deltas[0]


def composite(sigma: np.ndarray, deltas: np.ndarray, colors: np.ndarray,
              background: np.ndarray) -> CompositeResult:
    """
    Объемный рендеринг излучение-поглощение:
    alpha_i = 1 - exp(-sigma_i delta_i), T_i = prod_{j<i}(1 - alpha_j), w_i = T_i alpha_i,
    цвет = sum w_i c_i + (1 - sum w_i) * фон

    Args:
        sigma: Плотности (n, s)
        deltas: Длины интервалов (n, s)
        colors: Цвета отсчетов (n, s, 3)
        background: Цвет фона (3,)
    """
    tau = sigma * deltas
    zeros = np.zeros((tau.shape[0], 1), dtype=tau.dtype)
    transmittance = np.exp(-np.concatenate([zeros, np.cumsum(tau, axis=1)], axis=1))
    alpha = -np.expm1(-tau)
    weights = transmittance[:, :-1] * alpha
    opacity = weights.sum(axis=1)
    background = np.asarray(background, dtype=tau.dtype)
    rgb = (weights[..., None] * colors).sum(axis=1) + (1 - opacity)[:, None] * background
    return CompositeResult(rgb, opacity, weights, transmittance)


def composite_backward(result: CompositeResult, deltas: np.ndarray, colors: np.ndarray,
                       background: np.ndarray, d_rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Градиенты композитинга по плотностям и цветам отсчетов.
    d rgb / d tau_j = T_{j+1} c_j - sum_{i>j} w_i c_i - T_final * фон
    """
    weighted = result.weights[..., None] * colors
    later = np.cumsum(weighted[:, ::-1], axis=1)[:, ::-1] - weighted
    background = np.asarray(background, dtype=deltas.dtype)
    t_next = result.transmittance[:, 1:, None]
    t_final = result.transmittance[:, -1:, None]
    d_tau = ((t_next * colors - later - t_final * background) * d_rgb[:, None, :]).sum(axis=-1)
    d_colors = result.weights[..., None] * d_rgb[:, None, :]
    return d_tau * deltas, d_colors


def occlusion_loss(sigma: np.ndarray, k: int) -> float:
    """Средняя плотность первых min(K, s) отсчетов каждого луча, усредненная по пакету"""
    if k < 1:
        raise ValueError(f"Размер приближенной к камере области K должен быть положительным, получено {k}")
    if sigma.shape[0] == 0:
        return 0.0
    k = min(k, sigma.shape[1])
    return float(sigma[:, :k].mean(axis=1).mean())


def occlusion_loss_grad(shape: tuple[int, int], k: int, dtype=np.float64) -> np.ndarray:
    n_rays, n_samples = shape
    grad = np.zeros(shape, dtype=dtype)
    if n_rays:
        k = min(k, n_samples)
        grad[:, :k] = 1.0 / (n_rays * k)
    return grad


def _encode(field: RadianceField, masked_features: np.ndarray, directions: np.ndarray,
            masks: FieldMasks) -> np.ndarray:
    return np.concatenate([
        positional_encoding(masked_features, field.n_freq_features, masks.encoding_features),
        positional_encoding(directions, field.n_freq_view, masks.encoding_view),
    ], axis=-1)


def render_rays(field: RadianceField, origins: np.ndarray, directions: np.ndarray, settings: RenderConfig,
                masks: Optional[FieldMasks] = None, rng: Optional[np.random.Generator] = None,
                keep_cache: bool = True) -> RenderResult:
    """
    Полный прямой проход по пакету лучей: отсчеты -> плотность с маской -> признаки с маской ->
    кодирование с маской -> декодер -> композитинг

    Args:
        field: Модель
        origins: Начала лучей (n, 3)
        directions: Единичные направления (n, 3)
        settings: Параметры рендеринга
        masks: Частотные маски (None - без масок)
        rng: Генератор для случайного сдвига отсчетов (None - середины страт)
        keep_cache: Сохранять ли промежуточные значения для обратного прохода

    Returns:
        Цвета, непрозрачность, член окклюзии, веса и плотности отсчетов
    """
    masks = masks if masks is not None else FieldMasks()
    dtype = field.dtype
    origins = np.asarray(origins, dtype=dtype).reshape(-1, 3)
    directions = np.asarray(directions, dtype=dtype).reshape(-1, 3)
    n_rays, n_samples = origins.shape[0], settings.n_samples
    background = np.asarray(settings.background, dtype=dtype)

    t_values, deltas, hit = sample_along_rays(origins, directions, field.geometry, settings.near,
                                              settings.far, n_samples, rng)
    valid = np.repeat(hit, n_samples)
    points = (origins[:, None, :] + t_values[..., None] * directions[:, None, :]).reshape(-1, 3)[valid]
    points = field.geometry.clip(points)
    sample_dirs = np.broadcast_to(directions[:, None, :], (n_rays, n_samples, 3)).reshape(-1, 3)[valid]

    raw, density_cache = field.density.raw_density(points, masks.density)
    sigma_valid = field.density.activate(raw)

    features, appearance_cache = field.appearance.features(points)
    masked_features = features if masks.appearance is None else apply_mask(features, masks.appearance)
    encoded = _encode(field, masked_features, sample_dirs, masks)
    rgb_valid, decoder_cache = field.decoder.forward(encoded)

    sigma = np.zeros(n_rays * n_samples, dtype=dtype)
    sigma[valid] = sigma_valid
    sigma = sigma.reshape(n_rays, n_samples)
    sample_colors = np.zeros((n_rays * n_samples, 3), dtype=dtype)
    sample_colors[valid] = rgb_valid
    sample_colors = sample_colors.reshape(n_rays, n_samples, 3)

    result = composite(sigma, deltas, sample_colors, background)
    occlusion = occlusion_loss(sigma, settings.occlusion_k)

    cache = None
    if keep_cache:
        cache = RenderCache(t_values, deltas, valid, sample_colors, result, raw, density_cache,
                            appearance_cache, masked_features, decoder_cache, masks)
    return RenderResult(result.rgb, result.opacity, occlusion, result.weights, sigma, cache)


def render_backward(field: RadianceField, result: RenderResult, settings: RenderConfig,
                    d_colors: np.ndarray, d_occlusion: float, grads: dict[str, np.ndarray]) -> None:
    """
    Обратный проход: накапливает в grads (ключи как в field.parameters()) градиенты
    по цветам пикселей и члену окклюзии
    """
    cache = result.cache
    if cache is None:
        raise ValueError("Обратный проход требует кэша прямого прохода (keep_cache=True)")
    masks = cache.masks
    background = np.asarray(settings.background, dtype=field.dtype)

    d_sigma, d_sample_colors = composite_backward(cache.composite, cache.deltas, cache.sample_colors,
                                                  background, d_colors)
    if d_occlusion:
        d_sigma = d_sigma + d_occlusion * occlusion_loss_grad(d_sigma.shape, settings.occlusion_k, d_sigma.dtype)
    d_sigma_valid = d_sigma.reshape(-1)[cache.valid]
    d_rgb_valid = d_sample_colors.reshape(-1, 3)[cache.valid]

    sections = {prefix: {name.split(".", 1)[1]: value for name, value in grads.items()
                         if name.startswith(prefix + ".")}
                for prefix in ("density", "appearance", "decoder")}

    d_encoded = field.decoder.backward(cache.decoder_cache, d_rgb_valid, sections["decoder"])
    feature_block = field.appearance.feature_dim + encoding_length(field.appearance.feature_dim, field.n_freq_features)
    d_masked = positional_encoding_backward(cache.masked_features, field.n_freq_features,
                                            masks.encoding_features, d_encoded[:, :feature_block])
    d_features = d_masked if masks.appearance is None else apply_mask(d_masked, masks.appearance)
    field.appearance.features_backward(cache.appearance_cache, d_features, sections["appearance"])

    d_raw = d_sigma_valid * field.density.activation_grad(cache.raw)
    field.density.raw_backward(cache.density_cache, d_raw, sections["density"], masks.density)


def render_batch(state: "TrainState", rays: RayBatch, t: int,
                 rng: Optional[np.random.Generator] = None) -> RenderResult:
    """
    Рендеринг пакета лучей с масками, вычисленными по расписаниям конфигурации на итерации t
    """
    config = state.config
    masks = state.field.masks_at(config.trainer.masks, t, config.trainer.iterations)
    return render_rays(state.field, rays.origins, rays.directions, config.render, masks, rng)


def render_chunked(field: RadianceField, origins: np.ndarray, directions: np.ndarray, settings: RenderConfig,
                   masks: Optional[FieldMasks] = None) -> tuple[np.ndarray, np.ndarray]:
    """Рендеринг большого числа лучей частями без сохранения кэша; возвращает цвета и непрозрачность"""
    colors, opacity = [], []
    for start in range(0, origins.shape[0], settings.chunk_size):
        stop = start + settings.chunk_size
        result = render_rays(field, origins[start:stop], directions[start:stop], settings, masks, keep_cache=False)
        colors.append(result.colors)
        opacity.append(result.opacity)
    if not colors:
        return np.zeros((0, 3), dtype=field.dtype), np.zeros(0, dtype=field.dtype)
    return np.concatenate(colors), np.concatenate(opacity)
