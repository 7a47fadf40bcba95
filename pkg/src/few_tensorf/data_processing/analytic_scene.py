import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from tqdm import tqdm

from few_tensorf.config import RunConfig
from few_tensorf.data_processing.blender_loader import CameraModel, PosedImage, generate_rays
from few_tensorf.io_utils import write_json, write_png
from few_tensorf.tensorf_pipeline.factor_grid import GridGeometry
from few_tensorf.tensorf_pipeline.renderer import composite, sample_along_rays

logger = logging.getLogger("FewT.AnalyticScene")

SCENE_KINDS = ("sphere", "boxes", "sphere_and_boxes", "empty")
SPHERE_DENSITY = 50.0
SPHERE_RADIUS = 0.5
SPHERE_COLOR = (0.85, 0.35, 0.2)
RENDER_CHUNK = 512


@dataclass(frozen=True)
class AnalyticBox:
    center: tuple[float, float, float]
    half_size: tuple[float, float, float]
    color: tuple[float, float, float]
    density: float = SPHERE_DENSITY


SCENE_BOXES = (
    AnalyticBox((0.8, -0.6, -0.2), (0.25, 0.25, 0.25), (0.2, 0.7, 0.3)),
    AnalyticBox((-0.7, 0.6, 0.3), (0.2, 0.3, 0.2), (0.2, 0.3, 0.85)),
)


@dataclass
class AnalyticField:
    """Поле с известными плотностью и цветом: сфера и/или кубоиды постоянной плотности"""
    sphere: bool = True
    boxes: tuple[AnalyticBox, ...] = ()
    sphere_density: float = SPHERE_DENSITY
    sphere_radius: float = SPHERE_RADIUS

    @classmethod
    def of_kind(cls, kind: str) -> "AnalyticField":
        if kind not in SCENE_KINDS:
            raise ValueError(f"Неизвестный тип аналитической сцены: {kind}")
        return cls(sphere=kind in ("sphere", "sphere_and_boxes"),
                   boxes=SCENE_BOXES if kind in ("boxes", "sphere_and_boxes") else ())

    def density_and_color(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        points = np.asarray(points, dtype=np.float64)
        sigma = np.zeros(points.shape[:-1])
        color = np.zeros(points.shape)
        # кубоиды не пересекаются со сферой
        for box in self.boxes:
            inside = np.all(np.abs(points - np.asarray(box.center)) <= np.asarray(box.half_size), axis=-1)
            sigma[inside] = box.density
            color[inside] = box.color
        if self.sphere:
            inside = np.linalg.norm(points, axis=-1) <= self.sphere_radius
            sigma[inside] = self.sphere_density
            color[inside] = SPHERE_COLOR
        return sigma, color

    def density(self, points: np.ndarray) -> np.ndarray:
        return self.density_and_color(points)[0]


@dataclass
class AnalyticScene:
    kind: str
    analytic: AnalyticField
    camera_angle_x: float
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    train: list[PosedImage] = field(default_factory=list)
    test: list[PosedImage] = field(default_factory=list)

    def splits(self) -> dict[str, list[PosedImage]]:
        return {"train": self.train, "test": self.test}

    def write(self, out_dir: Path) -> None:
        """
        Сохраняет сцену в формате NeRF-synthetic: transforms_{train,test}.json и RGBA PNG,
        где альфа-канал равен непрозрачности, а цвет хранится без домножения на альфу

        Args:
            out_dir: Каталог сцены
        """
        out_dir = Path(out_dir)
        background = np.asarray(self.background)
        for split, images in self.splits().items():
            frames = []
            for i, image in enumerate(images):
                name = f"r_{i:03}"
                alpha = image.alpha[..., None]
                premultiplied = image.rgb - (1.0 - alpha) * background
                straight = np.divide(premultiplied, alpha, out=np.zeros_like(premultiplied), where=alpha > 0)
                rgba = np.concatenate([np.clip(straight, 0.0, 1.0), alpha], axis=-1)
                write_png(out_dir / split / f"{name}.png", rgba)
                frames.append({"file_path": f"./{split}/{name}", "transform_matrix": image.camera.pose.tolist()})
            write_json(out_dir / f"transforms_{split}.json",
                       {"camera_angle_x": self.camera_angle_x, "frames": frames})
        logger.info(f"Аналитическая сцена {self.kind} записана в {out_dir}")


def look_at_pose(position: np.ndarray, target: Sequence[float] = (0.0, 0.0, 0.0),
                 up: Sequence[float] = (0.0, 0.0, 1.0)) -> np.ndarray:
    """Поза камера-в-мир (4x4) для камеры в position, смотрящей на target вдоль своей оси -z"""
    position = np.asarray(position, dtype=np.float64)
    z_axis = position - np.asarray(target, dtype=np.float64)
    z_axis /= np.linalg.norm(z_axis)
    x_axis = np.cross(np.asarray(up, dtype=np.float64), z_axis)
    x_axis /= np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = x_axis, y_axis, z_axis, position
    return pose


def ring_poses(n_views: int, radius: float, rng: np.random.Generator, phase: float = 0.0) -> list[np.ndarray]:
    """Камеры на кольце вокруг начала координат со случайным сдвигом азимута и возвышения"""
    poses = []
    for k in range(n_views):
        azimuth = 2 * math.pi * (k + phase + rng.uniform(-0.25, 0.25)) / n_views
        elevation = math.radians(rng.uniform(15.0, 45.0))
        position = radius * np.array([
            math.cos(elevation) * math.cos(azimuth),
            math.cos(elevation) * math.sin(azimuth),
            math.sin(elevation),
        ])
        poses.append(look_at_pose(position))
    return poses


def render_analytic(analytic: AnalyticField, camera: CameraModel, geometry: GridGeometry, near: float, far: float,
                    n_samples: int, background: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """
    Рендерит аналитическое поле той же квадратурой, что и основной рендерер (середины страт)

    Returns:
        RGB (H, W, 3), наложенный на фон, и непрозрачность (H, W)
    """
    rays = generate_rays(camera)
    colors, opacity = [], []
    for start in range(0, len(rays), RENDER_CHUNK):
        origins = rays.origins[start:start + RENDER_CHUNK]
        directions = rays.directions[start:start + RENDER_CHUNK]
        t_values, deltas, _ = sample_along_rays(origins, directions, geometry, near, far, n_samples)
        points = origins[:, None, :] + t_values[..., None] * directions[:, None, :]
        sigma, sample_colors = analytic.density_and_color(points)
        result = composite(sigma, deltas, sample_colors, np.asarray(background, dtype=np.float64))
        colors.append(result.rgb)
        opacity.append(result.opacity)
    shape = (camera.height, camera.width)
    return np.concatenate(colors).reshape(*shape, 3), np.concatenate(opacity).reshape(shape)


def make_analytic_scene(kind: str = "sphere_and_boxes", image_size: int = 100, n_views: int = 8,
                        n_test_views: int = 0, seed: int = 0, samples_per_ray: int = 1024,
                        camera_radius: float = 4.0, camera_angle_x: float = 0.6911112070083618,
                        aabb_min: Sequence[float] = (-1.5, -1.5, -1.5), aabb_max: Sequence[float] = (1.5, 1.5, 1.5),
                        near: float = 2.0, far: float = 6.0, background: Sequence[float] = (1.0, 1.0, 1.0),
                        threads: int = 1) -> AnalyticScene:
    """
    Создает сцену с известным полем и изображениями, отрендеренными той же квадратурой,
    что и в обучении, при большом числе отсчетов

    Args:
        kind: sphere, boxes, sphere_and_boxes или empty
        image_size: Ширина и высота изображений
        n_views: Число обучающих видов
        n_test_views: Число отложенных видов на отдельном кольце
        seed: Зерно положения камер
        samples_per_ray: Отсчетов на луч
        camera_radius: Радиус кольца камер
        camera_angle_x: Горизонтальный угол обзора
        aabb_min: Нижняя граница сцены
        aabb_max: Верхняя граница сцены
        near: Ближняя граница луча
        far: Дальняя граница луча
        background: Цвет фона
        threads: Число потоков рендеринга

    Returns:
        AnalyticScene с обучающим и тестовым split
    """
    analytic = AnalyticField.of_kind(kind)
    geometry = GridGeometry((2, 2, 2), tuple(aabb_min), tuple(aabb_max))
    rng = np.random.default_rng(seed)
    train_poses = ring_poses(n_views, camera_radius, rng)
    test_poses = ring_poses(n_test_views, camera_radius, rng, phase=0.5)
    cameras = [CameraModel(image_size, image_size, camera_angle_x, pose) for pose in train_poses + test_poses]

    def _render(camera: CameraModel) -> PosedImage:
        rgb, alpha = render_analytic(analytic, camera, geometry, near, far, samples_per_ray, background)
        return PosedImage(camera, rgb, alpha)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        images = list(tqdm(executor.map(_render, cameras), total=len(cameras),
                           desc=f"Рендеринг сцены {kind}", leave=False))
    logger.info(f"Создана аналитическая сцена {kind}: {n_views} обучающих и {n_test_views} тестовых видов "
                f"{image_size}x{image_size}")
    return AnalyticScene(kind, analytic, camera_angle_x, tuple(background), images[:n_views], images[n_views:])


def analytic_scene_from_config(config: RunConfig, threads: int = 1) -> AnalyticScene:
    """Аналитическая сцена по разделу dataset.analytic конфигурации запуска"""
    scene = config.dataset.analytic
    return make_analytic_scene(
        kind=scene.kind,
        image_size=scene.image_size,
        n_views=scene.n_views,
        n_test_views=scene.n_test_views,
        seed=config.seed,
        samples_per_ray=scene.samples_per_ray,
        camera_radius=scene.camera_radius,
        camera_angle_x=scene.camera_angle_x,
        aabb_min=config.model.aabb_min,
        aabb_max=config.model.aabb_max,
        near=config.render.near,
        far=config.render.far,
        background=config.render.background,
        threads=threads,
    )
