import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
from skimage import measure

from few_tensorf.errors import GridCapacityError
from few_tensorf.io_utils import atomic_write_bytes, atomic_write_text
from few_tensorf.tensorf_pipeline.factor_grid import DEFAULT_DENSE_CAP, FactorizedDensityGrid

logger = logging.getLogger("FewT.Mesh")

# Запись треугольника бинарного STL: нормаль, три вершины, атрибут
STL_TRIANGLE = np.dtype([
    ("normal", "<f4", (3,)),
    ("vertex0", "<f4", (3,)),
    ("vertex1", "<f4", (3,)),
    ("vertex2", "<f4", (3,)),
    ("attr", "<u2"),
])
STL_HEADER = b"few-tensorf density isosurface".ljust(80, b"\0")
EVAL_CHUNK = 65536

DensitySource = Union[FactorizedDensityGrid, Callable[[np.ndarray], np.ndarray]]


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    @property
    def n_triangles(self) -> int:
        return int(self.faces.shape[0])

    @property
    def is_empty(self) -> bool:
        return self.n_triangles == 0


def sample_density(source: DensitySource, resolution: int, aabb_min: Sequence[float], aabb_max: Sequence[float],
                   cap: int = DEFAULT_DENSE_CAP) -> np.ndarray:
    """Активированная плотность в узлах регулярной сетки resolution^3 внутри AABB"""
    if resolution ** 3 > cap:
        raise GridCapacityError(f"Сетка {resolution}^3 превышает лимит плотной реконструкции {cap}")
    axes = [np.linspace(lo, hi, resolution) for lo, hi in zip(aabb_min, aabb_max)]
    points = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    evaluate = source.eval_density if isinstance(source, FactorizedDensityGrid) else source
    values = np.concatenate([np.asarray(evaluate(points[i:i + EVAL_CHUNK]), dtype=np.float64)
                             for i in range(0, points.shape[0], EVAL_CHUNK)])
    return values.reshape(resolution, resolution, resolution)


def extract_mesh(volume: np.ndarray, iso: float, aabb_min: Sequence[float],
                 aabb_max: Sequence[float]) -> TriangleMesh:
    """
    Изоповерхность плотности классическим алгоритмом marching cubes (таблица на 256 случаев)

    Args:
        volume: Плотность в узлах сетки (Nx, Ny, Nz)
        iso: Уровень изоповерхности
        aabb_min: Мировые координаты узла (0, 0, 0)
        aabb_max: Мировые координаты последнего узла

    Returns:
        Вершины в мировых координатах и треугольники
    """
    volume = np.asarray(volume, dtype=np.float64)
    if not volume.min() < iso < volume.max():
        logger.warning(f"Ни один воксель не пересекает уровень {iso}: сетка пуста")
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    lo = np.asarray(aabb_min, dtype=np.float64)
    spacing = (np.asarray(aabb_max, dtype=np.float64) - lo) / (np.asarray(volume.shape) - 1)
    vertices, faces, _, _ = measure.marching_cubes(volume, level=iso, spacing=tuple(spacing), method="lorensen")
    return TriangleMesh(vertices + lo, faces.astype(np.int64))


def stl_bytes(mesh: TriangleMesh) -> bytes:
    triangles = np.zeros(mesh.n_triangles, dtype=STL_TRIANGLE)
    if not mesh.is_empty:
        corners = mesh.vertices[mesh.faces]
        normals = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
        lengths = np.linalg.norm(normals, axis=-1, keepdims=True)
        triangles["normal"] = np.divide(normals, lengths, out=np.zeros_like(normals), where=lengths > 0)
        triangles["vertex0"] = corners[:, 0]
        triangles["vertex1"] = corners[:, 1]
        triangles["vertex2"] = corners[:, 2]
    buffer = io.BytesIO()
    buffer.write(STL_HEADER)
    buffer.write(np.uint32(mesh.n_triangles).astype("<u4").tobytes())
    buffer.write(triangles.tobytes())
    return buffer.getvalue()


def obj_text(mesh: TriangleMesh) -> str:
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    return "\n".join(lines) + "\n"


def export_mesh(source: DensitySource, path: Path, iso: float = 25.0, resolution: int = 128,
                fmt: str = "stl", aabb_min: Optional[Sequence[float]] = None,
                aabb_max: Optional[Sequence[float]] = None) -> TriangleMesh:
    """
    Экспортирует изоповерхность плотности в бинарный STL или OBJ

    Args:
        source: Сетка плотности или векторизованная функция плотности
        path: Путь к файлу
        iso: Уровень изоповерхности
        resolution: Число узлов по каждой оси
        fmt: "stl" или "obj"
        aabb_min: Нижняя граница (по умолчанию из геометрии сетки)
        aabb_max: Верхняя граница (по умолчанию из геометрии сетки)

    Returns:
        Извлеченная сетка треугольников
    """
    if fmt not in ("stl", "obj"):
        raise ValueError(f"Неизвестный формат сетки: {fmt}")
    if aabb_min is None or aabb_max is None:
        if not isinstance(source, FactorizedDensityGrid):
            raise ValueError("Для функции плотности необходимо указать aabb_min и aabb_max")
        aabb_min, aabb_max = source.geometry.aabb_min, source.geometry.aabb_max

    volume = sample_density(source, resolution, aabb_min, aabb_max)
    mesh = extract_mesh(volume, iso, aabb_min, aabb_max)
    if fmt == "stl":
        atomic_write_bytes(Path(path), stl_bytes(mesh))
    else:
        atomic_write_text(Path(path), obj_text(mesh))
    logger.info(f"Сетка из {mesh.n_triangles} треугольников сохранена в {path}")
    return mesh
