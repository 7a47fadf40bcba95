import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from few_tensorf.config import RunConfig, TrainerConfig
from few_tensorf.errors import TrainingDivergedError
from few_tensorf.io_utils import write_csv
from few_tensorf.tensorf_pipeline.checkpoint import save_checkpoint
from few_tensorf.tensorf_pipeline.factor_grid import PLANE_AXES
from few_tensorf.tensorf_pipeline.field import RadianceField
from few_tensorf.tensorf_pipeline.renderer import RayBatch, render_backward, render_batch
from few_tensorf.training.optimizer import GRID_GROUP, NETWORK_GROUP, param_group
from few_tensorf.training.state import TrainState

logger = logging.getLogger("FewT.Trainer")

LOSS_LOG_COLUMNS = ["iter", "mse", "occ", "l1", "total", "lr_grid", "lr_mlp", "seconds"]
FINAL_CHECKPOINT = "ckpt_final.fewt"


@dataclass
class LossTerms:
    mse: float
    occlusion: float
    l1: float
    total: float


@dataclass
class TrainResult:
    state: TrainState
    loss_log: pd.DataFrame
    seconds: float


def total_loss(pred: np.ndarray, gt: np.ndarray, occlusion: float, density_factors: list[np.ndarray],
               lambda_occ: float, lambda_l1: float) -> LossTerms:
    """
    Полная функция потерь: MSE цвета + lambda_occ * окклюзия + lambda_l1 * среднее |факторов плотности|

    Args:
        pred: Предсказанные цвета (n, 3)
        gt: Эталонные цвета (n, 3)
        occlusion: Член окклюзии пакета
        density_factors: Все факторы сетки плотности
        lambda_occ: Вес окклюзии
        lambda_l1: Вес L1-регуляризации

    Returns:
        Значения отдельных членов и их взвешенная сумма
    """
    if pred.shape != gt.shape:
        raise ValueError(f"Формы предсказания {pred.shape} и эталона {gt.shape} не совпадают")
    mse = float(np.mean((np.asarray(pred, dtype=np.float64) - gt) ** 2)) if pred.size else 0.0
    l1 = _mean_abs(density_factors)
    total = mse + lambda_occ * occlusion + lambda_l1 * l1
    return LossTerms(mse, float(occlusion), l1, total)


def _mean_abs(factors: list[np.ndarray]) -> float:
    count = sum(f.size for f in factors)
    if count == 0:
        return 0.0
    return float(sum(np.abs(f, dtype=np.float64).sum() for f in factors) / count)


def lr_schedule(t: int, config: TrainerConfig) -> dict[str, float]:
    """
    Экспоненциальное затухание скорости обучения от начальной до начальной * lr_decay_ratio
    за config.iterations итераций

    Returns:
        Словарь {"grid": ..., "network": ...}
    """
    if t < 0:
        raise ValueError(f"Номер итерации не может быть отрицательным: {t}")
    factor = config.lr_decay_ratio ** (t / config.iterations) if config.lr_decay else 1.0
    return {GRID_GROUP: config.lr_grid * factor, NETWORK_GROUP: config.lr_network * factor}


def inject_floater(field: RadianceField, center: tuple[float, float, float], radius: float,
                   peak: float = 20.0) -> RadianceField:
    """
    Записывает в первую компоненту ранга 0 сетки плотности гауссов сгусток с центром center.
    Для VM заменяются линия и плоскость моды z, для CP - все три линии.

    Args:
        field: Модель (изменяется на месте)
        center: Центр сгустка в мировых координатах
        radius: Стандартное отклонение гауссианы
        peak: Значение сырой плотности в центре
    """
    grid = field.density
    geometry = grid.geometry
    bumps = [np.exp(-0.5 * ((geometry.node_positions(axis) - center[axis]) / radius) ** 2) for axis in range(3)]
    if grid.decomposition == "cp":
        grid.lines[0][0] = peak * bumps[0]
        grid.lines[1][0] = bumps[1]
        grid.lines[2][0] = bumps[2]
    else:
        a, b = PLANE_AXES[2]
        grid.lines[2][0] = bumps[2]
        grid.planes[2][0] = peak * np.outer(bumps[a], bumps[b])
    logger.info(f"Добавлен сгусток плотности в {tuple(center)}, радиус {radius}, пик {peak}")
    return field


def _l1_grads(field: RadianceField, weight: float, grads: dict[str, np.ndarray]) -> None:
    factors = field.density.parameters()
    count = sum(f.size for f in factors.values())
    for name, value in factors.items():
        grads[f"density.{name}"] += (weight / count) * np.sign(value)


def _upsample_field(state: TrainState, resolution: tuple[int, int, int]) -> None:
    field = state.field
    field.density = field.density.upsample(resolution)
    field.appearance = field.appearance.upsample(resolution)
    state.optimizer.reset([name for name in field.parameters() if param_group(name) == GRID_GROUP])


def _write_log(out_dir: Optional[Path], rows: list[dict]) -> pd.DataFrame:
    frame = pd.DataFrame(rows, columns=LOSS_LOG_COLUMNS)
    frame["iter"] = frame["iter"].astype(int)
    if out_dir is not None:
        write_csv(out_dir / "loss.csv", frame)
    return frame


def train(config: RunConfig, rays: RayBatch, state: Optional[TrainState] = None,
          out_dir: Optional[Path] = None, progress: bool = True) -> TrainResult:
    """
    Обучение модели градиентным спуском с Adam

    На каждой итерации t из всех пикселей обучающих видов с возвращением выбирается пакет лучей
    (генератор default_rng([seed, t])), рендерится с масками итерации t, выполняется обратный
    проход и шаг Adam, затем применяется расписание повышения разрешения.

    Args:
        config: Конфигурация запуска
        rays: Все обучающие лучи с эталонными цветами
        state: Состояние для продолжения обучения (None - новая модель)
        out_dir: Каталог для loss.csv и чекпоинтов (None - ничего не записывать)
        progress: Показывать ли индикатор прогресса

    Returns:
        Итоговое состояние, журнал потерь и время обучения в секундах
    """
    if len(rays) == 0 or rays.colors is None:
        raise ValueError("Обучение требует непустого набора лучей с эталонными цветами")
    trainer = config.trainer
    state = state if state is not None else TrainState.initial(config)
    out_dir = Path(out_dir) if out_dir is not None else None
    upsample_at = {int(it): tuple(res) for it, res in trainer.upsample_schedule}

    rows: list[dict] = []
    start_time = time.perf_counter()
    first, last = state.t, trainer.iterations
    logger.info(f"Начало обучения: итерации {first}..{last}, лучей в наборе {len(rays)}, "
                f"пакет {trainer.ray_batch_size}")

    for t in tqdm(range(first, last), desc="Обучение", total=last - first, disable=not progress):
        rng = np.random.default_rng([config.seed, t])
        batch = rays.subset(rng.integers(0, len(rays), size=trainer.ray_batch_size))
        result = render_batch(state, batch, t, rng if trainer.jitter else None)

        field = state.field
        terms = total_loss(result.colors, batch.colors, result.occlusion,
                           list(field.density.parameters().values()), trainer.lambda_occ, trainer.lambda_l1)
        if not np.isfinite(terms.total):
            _write_log(out_dir, rows)
            logger.error(f"Неконечное значение функции потерь на итерации {t}, обучение прервано")
            raise TrainingDivergedError(f"Функция потерь стала неконечной на итерации {t}; "
                                        f"последний сохраненный чекпоинт сохранен без изменений")

        grads = field.zero_grads()
        d_colors = (2.0 / result.colors.size) * (result.colors - batch.colors.astype(field.dtype))
        render_backward(field, result, config.render, d_colors, trainer.lambda_occ, grads)
        if trainer.lambda_l1:
            _l1_grads(field, trainer.lambda_l1, grads)

        lrs = lr_schedule(t, trainer)
        state.optimizer.step(field.parameters(), grads, lrs)
        state.t = t + 1

        if state.t in upsample_at:
            _upsample_field(state, upsample_at[state.t])

        rows.append({
            "iter": t,
            "mse": terms.mse,
            "occ": terms.occlusion,
            "l1": terms.l1,
            "total": terms.total,
            "lr_grid": lrs[GRID_GROUP],
            "lr_mlp": lrs[NETWORK_GROUP],
            "seconds": time.perf_counter() - start_time,
        })

        if out_dir is not None and trainer.checkpoint_every and state.t % trainer.checkpoint_every == 0 \
                and state.t < last:
            save_checkpoint(out_dir / f"ckpt_{state.t:06d}.fewt", state)

    seconds = time.perf_counter() - start_time
    frame = _write_log(out_dir, rows)
    if out_dir is not None:
        save_checkpoint(out_dir / FINAL_CHECKPOINT, state)
    if rows:
        logger.info(f"Обучение завершено за {seconds:.2f} секунд, итоговая MSE {rows[-1]['mse']:.6f}")
    else:
        logger.info("Дополнительных итераций нет, состояние не изменено")
    return TrainResult(state, frame, seconds)
