import json
import logging
import subprocess
import time
from argparse import Namespace
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import pandas as pd

from few_tensorf.config import (
    RunConfig,
    Settings,
    build_run_config,
    config_hash,
    deep_merge,
    load_run_config,
)
from few_tensorf.data_processing.analytic_scene import analytic_scene_from_config, make_analytic_scene
from few_tensorf.data_processing.blender_loader import PosedImage, few_shot_subset, load_scene, rays_from_images
from few_tensorf.errors import ConfigError
from few_tensorf.evaluation.evaluator import evaluate
from few_tensorf.evaluation.mesh_export import export_mesh
from few_tensorf.io_utils import atomic_write_text, write_csv, write_json
from few_tensorf.logging_config import setup_logging
from few_tensorf.tensorf_pipeline.checkpoint import load_checkpoint
from few_tensorf.training.trainer import train

logger = logging.getLogger("FewT.CLI")

ROOT_DIR = Path(__file__).resolve().parent.parent.parent.parent


@dataclass
class RunDataset:
    """Обучающие и тестовые изображения запуска и сведения для манифеста"""
    train: list[PosedImage]
    test: list[PosedImage]
    view_ids: list[int]
    source: str


def git_revision() -> str:
    try:
        result = subprocess.run(["git", "rev-parse", "HEAD"], cwd=ROOT_DIR, capture_output=True, text=True,
                                timeout=10, check=True)
        return result.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _cli_overrides(args: Namespace) -> list[str]:
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "out", None) is not None:
        overrides.append(f"output_dir={json.dumps(str(args.out))}")
    return overrides


def build_dataset(config: RunConfig, threads: int = 1) -> RunDataset:
    """
    Загружает сцену из dataset.root или создает аналитическую сцену и выбирает обучающие виды

    Args:
        config: Конфигурация запуска
        threads: Число потоков загрузки и рендеринга

    Returns:
        RunDataset с обучающими и тестовыми изображениями
    """
    dataset = config.dataset
    if dataset.root is not None:
        scene = load_scene(dataset.root, config.render.background, dataset.downscale, threads)
        train_images, test_images, source = scene["train"], scene.get(dataset.test_split, []), str(dataset.root)
    else:
        analytic = analytic_scene_from_config(config, threads)
        train_images, test_images, source = analytic.train, analytic.test, f"analytic:{analytic.kind}"
    selected, ids = few_shot_subset(train_images, dataset.view_ids, dataset.view_count, config.seed)
    return RunDataset(selected, test_images, ids, source)


def _manifest(config: RunConfig, dataset: RunDataset, train_seconds: float, wall_seconds: float) -> dict[str, Any]:
    return {
        "config_hash": config_hash(config),
        "seed": config.seed,
        "git_revision": git_revision(),
        "wall_seconds": wall_seconds,
        "train_seconds": train_seconds,
        "iterations": config.trainer.iterations,
        "view_ids": dataset.view_ids,
        "downscale": config.dataset.downscale,
        "dataset_source": dataset.source,
    }


def run_training(config: RunConfig, out_dir: Path, settings: Settings,
                 dataset: Optional[RunDataset] = None) -> tuple[RunDataset, Any]:
    start = time.perf_counter()
    dataset = dataset if dataset is not None else build_dataset(config, settings.threads)
    atomic_write_text(out_dir / "config.json", config.model_dump_json(indent=2) + "\n")
    result = train(config, rays_from_images(dataset.train), out_dir=out_dir)
    write_json(out_dir / "manifest.json", _manifest(config, dataset, result.seconds, time.perf_counter() - start))
    return dataset, result


def cmd_train(args: Namespace, settings: Settings) -> int:
    """Обучение по конфигурации: ckpt_final.fewt, loss.csv и manifest.json в каталоге запуска"""
    config = load_run_config(args.config, _cli_overrides(args))
    out_dir = Path(config.output_dir)
    setup_logging(out_dir / "logs", settings.log_level)
    logger.info(f"Запуск обучения, хэш конфигурации {config_hash(config)}")
    _, result = run_training(config, out_dir, settings)
    logger.info(f"Результаты обучения сохранены в {out_dir} ({result.seconds:.2f} с)")
    return 0


def _parse_views(raw: Optional[str]) -> Optional[list[int]]:
    if raw is None:
        return None
    try:
        return [int(item) for item in raw.split(",") if item.strip()]
    except ValueError as e:
        raise ConfigError(f"--views ожидает список индексов через запятую, получено '{raw}'") from e


def cmd_eval(args: Namespace, settings: Settings) -> int:
    """Оценка чекпоинта на тестовом split: test_XXX.png, report.csv, report.json"""
    checkpoint = Path(args.checkpoint)
    if not checkpoint.exists():
        raise FileNotFoundError(f"Чекпоинт не найден: {checkpoint}")
    views = _parse_views(args.views)
    state = load_checkpoint(checkpoint)

    overrides = list(args.set or [])
    if args.dataset is not None:
        overrides.append(f"dataset.root={json.dumps(str(args.dataset))}")
    config = build_run_config(state.config.model_dump(mode="json"), overrides) if overrides else state.config
    out_dir = Path(args.out) if args.out is not None else Path(config.output_dir) / "eval"
    setup_logging(out_dir / "logs", settings.log_level)

    dataset = build_dataset(config, settings.threads)
    report = evaluate(state.field, config, dataset.test, out_dir, views=views if views is not None else config.eval.views,
                      threads=settings.threads)
    logger.info(f"Средний PSNR {report.mean_psnr:.3f} дБ, отчет в {out_dir}")
    return 0


def _markdown_table(frame: pd.DataFrame) -> str:
    def _cell(value: Any) -> str:
        return f"{value:.3f}" if isinstance(value, float) else str(value)

    header = "| " + " | ".join(frame.columns) + " |"
    rule = "| " + " | ".join("---" for _ in frame.columns) + " |"
    rows = ["| " + " | ".join(_cell(v) for v in row) + " |" for row in frame.itertuples(index=False)]
    return "\n".join([header, rule, *rows]) + "\n"


def load_bench_matrix(path: Path) -> tuple[dict[str, Any], dict[str, dict[str, Any]]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Матрица сравнения не найдена: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            matrix = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Некорректный JSON в {path}: {e}") from e
    if not isinstance(matrix, dict) or not isinstance(matrix.get("variants"), dict) or not matrix["variants"]:
        raise ConfigError(f"Матрица {path} должна содержать непустой объект variants")
    unknown = set(matrix) - {"base", "variants"}
    if unknown:
        raise ConfigError(f"Неизвестные ключи матрицы {path}: {sorted(unknown)}")
    return matrix.get("base", {}), matrix["variants"]


def cmd_bench(args: Namespace, settings: Settings) -> int:
    """
    Обучение и оценка всех вариантов матрицы с одинаковыми seed и данными;
    таблица сравнения в bench.md и bench.csv
    """
    base, variants = load_bench_matrix(args.config)
    extra = list(args.set or [])
    if args.seed is not None:
        extra.append(f"seed={args.seed}")
    configs = {name: build_run_config(deep_merge(base, overrides or {}), extra) for name, overrides in variants.items()}

    out_dir = Path(args.out) if args.out is not None else Path(next(iter(configs.values())).output_dir)
    setup_logging(out_dir / "logs", settings.log_level)
    datasets: dict[str, RunDataset] = {}
    rows = []
    for name, config in configs.items():
        logger.info(f"Вариант {name}: хэш конфигурации {config_hash(config)}")
        run_dir = out_dir / name
        config = config.model_copy(update={"output_dir": run_dir})
        try:
            key = json.dumps([config.seed, config.dataset.model_dump(mode="json"),
                              config.model.aabb_min, config.model.aabb_max,
                              config.render.near, config.render.far, config.render.background])
            if key not in datasets:
                datasets[key] = build_dataset(config, settings.threads)
            dataset, result = run_training(config, run_dir, settings, datasets[key])
            report = evaluate(result.state.field, config, dataset.test, run_dir, result.seconds,
                              views=config.eval.views, threads=settings.threads)
            rows.append({"variant": name, "mean_psnr": report.mean_psnr, "train_seconds": result.seconds,
                         "status": "ok"})
        except Exception as e:
            logger.error(f"Вариант {name} завершился ошибкой: {e}", exc_info=True)
            rows.append({"variant": name, "mean_psnr": float("nan"), "train_seconds": float("nan"),
                         "status": f"failed: {type(e).__name__}"})

    frame = pd.DataFrame(rows, columns=["variant", "mean_psnr", "train_seconds", "status"])
    write_csv(out_dir / "bench.csv", frame)
    atomic_write_text(out_dir / "bench.md", _markdown_table(frame))
    logger.info(f"Сравнение {len(rows)} вариантов сохранено в {out_dir}")
    return 0 if all(row["status"] == "ok" for row in rows) else 1


def cmd_mesh(args: Namespace, settings: Settings) -> int:
    """Экспорт изоповерхности плотности чекпоинта в STL или OBJ"""
    checkpoint = Path(args.checkpoint)
    if not checkpoint.exists():
        raise FileNotFoundError(f"Чекпоинт не найден: {checkpoint}")
    state = load_checkpoint(checkpoint)
    export = state.config.export
    iso = args.iso if args.iso is not None else export.iso
    resolution = args.resolution if args.resolution is not None else export.resolution
    fmt = args.format if args.format is not None else export.format
    out_dir = Path(args.out) if args.out is not None else Path(state.config.output_dir)
    setup_logging(out_dir / "logs", settings.log_level)
    export_mesh(state.field.density, out_dir / f"mesh.{fmt}", iso=iso, resolution=resolution, fmt=fmt)
    return 0


def cmd_make_scene(args: Namespace, settings: Settings) -> int:
    """Создание аналитической сцены в формате NeRF-synthetic"""
    out_dir = Path(args.out)
    setup_logging(out_dir / "logs", settings.log_level)
    scene = make_analytic_scene(kind=args.kind, image_size=args.resolution, n_views=args.views,
                                n_test_views=args.test_views, seed=args.seed if args.seed is not None else 0,
                                samples_per_ray=args.samples, threads=settings.threads)
    scene.write(out_dir)
    return 0
