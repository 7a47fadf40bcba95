import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from few_tensorf.config import RunConfig, config_hash
from few_tensorf.data_processing.blender_loader import PosedImage, generate_rays
from few_tensorf.errors import DatasetError
from few_tensorf.evaluation.metrics import psnr
from few_tensorf.io_utils import write_csv, write_json, write_png
from few_tensorf.tensorf_pipeline.field import FieldMasks, RadianceField
from few_tensorf.tensorf_pipeline.renderer import render_chunked

logger = logging.getLogger("FewT.Evaluator")


@dataclass
class EvalReport:
    """Результаты оценки на отложенных видах"""
    views: list[int]
    psnr_values: list[float]
    train_seconds: Optional[float]
    config_hash: str

    @property
    def mean_psnr(self) -> float:
        if not self.psnr_values:
            return math.nan
        return float(np.mean(self.psnr_values))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"view": self.views, "psnr": self.psnr_values})

    def to_json(self) -> dict:
        def _number(value: Optional[float]):
            if value is None or math.isfinite(value):
                return value
            return str(value)

        return {
            "mean_psnr": _number(self.mean_psnr),
            "per_view": [{"view": v, "psnr": _number(p)} for v, p in zip(self.views, self.psnr_values)],
            "n_views": len(self.views),
            "train_seconds": self.train_seconds,
            "config_hash": self.config_hash,
        }

    def write(self, out_dir: Path) -> None:
        write_csv(Path(out_dir) / "report.csv", self.to_frame())
        write_json(Path(out_dir) / "report.json", self.to_json())


def render_view(field: RadianceField, image: PosedImage, config: RunConfig,
                masks: Optional[FieldMasks] = None) -> np.ndarray:
    rays = generate_rays(image.camera)
    colors, _ = render_chunked(field, rays.origins, rays.directions, config.render, masks)
    return colors.reshape(image.camera.height, image.camera.width, 3)


def evaluate(field: RadianceField, config: RunConfig, images: Sequence[PosedImage],
             out_dir: Optional[Path] = None, train_seconds: Optional[float] = None,
             views: Optional[Sequence[int]] = None, threads: int = 1) -> EvalReport:
    """
    Рендерит отложенные виды полной моделью (маски из единиц), считает PSNR и записывает изображения и отчет

    Args:
        field: Обученная модель
        config: Конфигурация запуска
        images: Тестовый split
        out_dir: Каталог для test_XXX.png, report.csv и report.json (None - без записи)
        train_seconds: Время обучения для отчета
        views: Индексы видов (None - все)
        threads: Число потоков рендеринга

    Returns:
        EvalReport с PSNR по видам
    """
    if not images:
        raise DatasetError("Тестовый split пуст")
    views = list(range(len(images))) if views is None else [int(v) for v in views]
    invalid = [v for v in views if not 0 <= v < len(images)]
    if invalid:
        raise DatasetError(f"Индексы видов {invalid} вне диапазона 0..{len(images) - 1}")

    masks = field.full_masks()
    start = time.perf_counter()
    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        rendered = list(executor.map(lambda v: render_view(field, images[v], config, masks), views))

    values = [psnr(np.clip(pred, 0.0, 1.0), images[v].rgb, quantize=config.eval.quantized_psnr)
              for v, pred in zip(views, rendered)]
    report = EvalReport(views, values, train_seconds, config_hash(config))
    logger.info(f"Оценка {len(views)} видов за {time.perf_counter() - start:.2f} секунд, "
                f"средний PSNR {report.mean_psnr:.3f} дБ")

    if out_dir is not None:
        out_dir = Path(out_dir)
        if config.eval.save_images:
            for v, pred in zip(views, rendered):
                write_png(out_dir / f"test_{v:03}.png", pred)
        report.write(out_dir)
    return report
