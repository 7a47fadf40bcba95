import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from tqdm import tqdm

from few_tensorf.errors import DatasetError
from few_tensorf.tensorf_pipeline.renderer import RayBatch

logger = logging.getLogger("FewT.Dataset")

SPLITS = ("train", "val", "test")
# Восемь обучающих видов blender-сцен в общепринятом разбиении для обучения по 8 видам
DEFAULT_BLENDER_VIEW_IDS = (26, 86, 2, 55, 75, 93, 16, 73)


@dataclass
class CameraModel:
    """Пинхол-камера в соглашении OpenGL: взгляд вдоль -z, ось y вверх"""
    width: int
    height: int
    camera_angle_x: float
    pose: np.ndarray

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.pose.shape != (4, 4):
            raise DatasetError(f"Матрица позы должна иметь форму 4x4, получено {self.pose.shape}")
        if not 0.0 < self.camera_angle_x < math.pi:
            raise DatasetError(f"camera_angle_x должен лежать в (0, pi), получено {self.camera_angle_x}")
        rotation = self.pose[:3, :3]
        if not np.allclose(rotation @ rotation.T, np.eye(3), atol=1e-4):
            raise DatasetError("Блок вращения позы камеры не ортонормирован")

    @property
    def focal(self) -> float:
        return 0.5 * self.width / math.tan(0.5 * self.camera_angle_x)

    @property
    def n_pixels(self) -> int:
        return self.width * self.height


@dataclass
class PosedImage:
    """Изображение, наложенное на фон, с альфа-каналом и камерой"""
    camera: CameraModel
    rgb: np.ndarray
    alpha: np.ndarray
    source_path: Optional[Path] = None

    def __post_init__(self):
        expected = (self.camera.height, self.camera.width)
        if self.rgb.shape != (*expected, 3) or self.alpha.shape != expected:
            raise DatasetError(f"Размер изображения {self.rgb.shape[:2]} не совпадает с камерой {expected}: "
                               f"{self.source_path}")


def _read_transforms(path: Path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            meta = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetError(f"Некорректный JSON в {path}: {e}") from e
    if not isinstance(meta, dict) or "camera_angle_x" not in meta or not isinstance(meta.get("frames"), list):
        raise DatasetError(f"В {path} нет ключей camera_angle_x и frames")
    return meta


def _frame_path(root: Path, file_path: str) -> Path:
    path = root / file_path
    return path if path.suffix else path.with_suffix(".png")


def load_image(path: Path, background: Sequence[float], downscale: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """
    Загружает PNG, накладывает RGBA на фон и приводит значения к [0, 1]

    Args:
        path: Путь к изображению
        background: Цвет фона RGB
        downscale: Целочисленный коэффициент уменьшения

    Returns:
        RGB (H, W, 3) и альфа-канал (H, W)
    """
    if not path.exists():
        raise FileNotFoundError(f"Изображение не найдено: {path}")
    with Image.open(path) as image:
        image = image.convert("RGBA")
        if downscale > 1:
            image = image.resize((image.width // downscale, image.height // downscale), Image.Resampling.BOX)
        pixels = np.asarray(image, dtype=np.float64) / 255.0
    alpha = pixels[..., 3]
    rgb = pixels[..., :3] * alpha[..., None] + np.asarray(background, dtype=np.float64) * (1.0 - alpha[..., None])
    return rgb, alpha


def load_split(root: Path, split: str, background: Sequence[float] = (1.0, 1.0, 1.0), downscale: int = 1,
               threads: int = 1) -> list[PosedImage]:
    """
    Загружает один split сцены в формате NeRF-synthetic

    Args:
        root: Каталог сцены
        split: Имя split (train, val, test)
        background: Цвет фона для альфа-композитинга
        downscale: Коэффициент уменьшения изображений
        threads: Число потоков декодирования

    Returns:
        Список PosedImage в порядке кадров
    """
    root = Path(root)
    meta_path = root / f"transforms_{split}.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"Файл разметки не найден: {meta_path}")
    meta = _read_transforms(meta_path)
    frames = meta["frames"]
    if not frames:
        logger.warning(f"Split {split} в {root} не содержит кадров")
        return []

    paths = []
    for i, frame in enumerate(frames):
        if "file_path" not in frame or "transform_matrix" not in frame:
            raise DatasetError(f"Кадр {i} в {meta_path} не содержит file_path и transform_matrix")
        paths.append(_frame_path(root, frame["file_path"]))

    def _load(path: Path) -> tuple[np.ndarray, np.ndarray]:
        return load_image(path, background, downscale)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        decoded = list(tqdm(executor.map(_load, paths), total=len(paths), desc=f"Загрузка {split}", leave=False))

    images = []
    for frame, path, (rgb, alpha) in zip(frames, paths, decoded):
        height, width = alpha.shape
        for key, actual in (("w", width), ("h", height)):
            if key in meta and int(meta[key]) // downscale != actual:
                raise DatasetError(f"Размер {path} ({width}x{height}) не совпадает с {key}={meta[key]} в {meta_path}")
        try:
            camera = CameraModel(width, height, float(meta["camera_angle_x"]), np.asarray(frame["transform_matrix"]))
        except DatasetError as e:
            raise DatasetError(f"{path}: {e}") from e
        images.append(PosedImage(camera, rgb, alpha, path))
    logger.info(f"Загружено {len(images)} изображений split {split} из {root}")
    return images


def load_scene(root: Path, background: Sequence[float] = (1.0, 1.0, 1.0), downscale: int = 1,
               threads: int = 1) -> dict[str, list[PosedImage]]:
    """Загружает все имеющиеся split сцены; transforms_train.json обязателен"""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"Каталог сцены не найден: {root}")
    scene = {}
    for split in SPLITS:
        if split == "train" or (root / f"transforms_{split}.json").exists():
            scene[split] = load_split(root, split, background, downscale, threads)
    return scene


def generate_rays(camera: CameraModel, pixel_indices: Optional[np.ndarray] = None) -> RayBatch:
    """
    Лучи через центры пикселей: для пикселя (u, v) направление в системе камеры
    normalize(((u + 0.5 - W/2) / f, -(v + 0.5 - H/2) / f, -1)), затем поворот позой

    Args:
        camera: Камера
        pixel_indices: Плоские индексы v * W + u (None - все пиксели)

    Returns:
        Пакет лучей с началом в центре камеры
    """
    if pixel_indices is None:
        pixel_indices = np.arange(camera.n_pixels)
    pixel_indices = np.asarray(pixel_indices, dtype=np.int64).reshape(-1)
    if pixel_indices.size and (pixel_indices.min() < 0 or pixel_indices.max() >= camera.n_pixels):
        raise DatasetError(f"Индексы пикселей выходят за пределы изображения {camera.width}x{camera.height}")
    v, u = np.divmod(pixel_indices, camera.width)
    focal = camera.focal
    directions = np.stack([
        (u + 0.5 - camera.width / 2) / focal,
        -(v + 0.5 - camera.height / 2) / focal,
        -np.ones(pixel_indices.shape[0]),
    ], axis=-1)
    directions = directions @ camera.pose[:3, :3].T
    directions /= np.linalg.norm(directions, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.pose[:3, 3], directions.shape).copy()
    return RayBatch(origins, directions)


def rays_from_images(images: Sequence[PosedImage]) -> RayBatch:
    """Все лучи набора изображений с эталонными цветами пикселей"""
    batches = []
    for image in images:
        rays = generate_rays(image.camera)
        rays.colors = image.rgb.reshape(-1, 3)
        batches.append(rays)
    if not batches:
        return RayBatch(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)))
    return RayBatch(
        np.concatenate([b.origins for b in batches]),
        np.concatenate([b.directions for b in batches]),
        np.concatenate([b.colors for b in batches]),
    )


def few_shot_subset(images: Sequence[PosedImage], view_ids: Optional[Sequence[int]] = None,
                    count: Optional[int] = None, seed: int = 0) -> tuple[list[PosedImage], list[int]]:
    """
    Выбор обучающих видов для few-shot режима

    Args:
        images: Все изображения split
        view_ids: Явный список индексов (используется как есть, в заданном порядке)
        count: Число видов, равномерно распределенных по списку со случайным сдвигом
        seed: Зерно сдвига

    Returns:
        Выбранные изображения и их индексы
    """
    n = len(images)
    if view_ids is not None:
        ids = [int(i) for i in view_ids]
        invalid = [i for i in ids if not 0 <= i < n]
        if invalid:
            raise DatasetError(f"Индексы видов {invalid} вне диапазона 0..{n - 1}")
    elif count is not None:
        if count > n:
            raise DatasetError(f"Запрошено {count} видов, доступно только {n}")
        step = n / count
        offset = np.random.default_rng(seed).uniform(0.0, step)
        ids = [min(int(math.floor(offset + k * step)), n - 1) for k in range(count)]
    else:
        ids = list(range(n))
    logger.info(f"Выбраны обучающие виды: {ids}")
    return [images[i] for i in ids], ids
