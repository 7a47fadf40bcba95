import numpy as np

from few_tensorf.config import RunConfig, build_run_config
from few_tensorf.tensorf_pipeline.factor_grid import GridGeometry


def tiny_config(**sections) -> RunConfig:
    """Конфигурация небольшой модели в float64 для быстрых тестов"""
    payload = {
        "seed": 3,
        "dataset": {"analytic": {"kind": "sphere", "image_size": 8, "n_views": 3, "n_test_views": 2,
                                 "samples_per_ray": 64}},
        "model": {"resolution": [6, 6, 6], "density_rank": 2, "appearance_rank": 2, "feature_dim": 4,
                  "decoder_hidden": [8], "n_freq_features": 1, "n_freq_view": 1, "dtype": "float64",
                  "density_init_scale": 0.5, "appearance_init_scale": 0.5},
        "render": {"n_samples": 16, "chunk_size": 64},
        "trainer": {"iterations": 5, "ray_batch_size": 32},
    }
    for section, values in sections.items():
        if isinstance(values, dict):
            payload.setdefault(section, {}).update(values)
        else:
            payload[section] = values
    return build_run_config(payload)


def points_inside(geometry: GridGeometry, n: int, rng: np.random.Generator) -> np.ndarray:
    lo = np.asarray(geometry.aabb_min)
    return lo + rng.random((n, 3)) * geometry.extent


def rays_through_box(n: int, rng: np.random.Generator, radius: float = 4.0) -> tuple[np.ndarray, np.ndarray]:
    """Лучи с камер на сфере радиуса radius, направленные примерно в центр сцены"""
    origins = rng.normal(size=(n, 3))
    origins *= radius / np.linalg.norm(origins, axis=1, keepdims=True)
    targets = rng.uniform(-0.5, 0.5, size=(n, 3))
    directions = targets - origins
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return origins, directions
