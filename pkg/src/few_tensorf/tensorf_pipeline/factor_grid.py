import itertools
import logging
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from few_tensorf.errors import GridCapacityError, GridError
from few_tensorf.tensorf_pipeline.freq_mask import apply_mask

logger = logging.getLogger("FewT.FactorGrid")

DEFAULT_DENSE_CAP = 2 ** 24
MODE_NAMES = ("x", "y", "z")
# VM: линия вдоль оси m, плоскость над двумя дополнительными осями
PLANE_AXES = ((1, 2), (0, 2), (0, 1))

Decomposition = Literal["vm", "cp"]
DensityActivation = Literal["softplus", "relu"]


@dataclass(frozen=True)
class GridGeometry:
    """
    Регулярная сетка в мировых координатах. Узел i лежит в aabb_min + i * extent / (N - 1),
    поэтому углы AABB являются узлами сетки.
    """
    resolution: tuple[int, int, int]
    aabb_min: tuple[float, float, float]
    aabb_max: tuple[float, float, float]

    def __post_init__(self):
        resolution = tuple(int(n) for n in self.resolution)
        aabb_min = tuple(float(v) for v in self.aabb_min)
        aabb_max = tuple(float(v) for v in self.aabb_max)

        if len(resolution) != 3 or len(aabb_min) != 3 or len(aabb_max) != 3:
            raise GridError("Геометрия сетки должна быть трехмерной")
        if any(n < 2 for n in resolution):
            raise GridError(f"Каждое измерение сетки должно быть не меньше 2, получено {resolution}")
        if not all(lo < hi for lo, hi in zip(aabb_min, aabb_max)):
            raise GridError(f"Требуется aabb_min < aabb_max покомпонентно: {aabb_min} / {aabb_max}")

        object.__setattr__(self, "resolution", resolution)
        object.__setattr__(self, "aabb_min", aabb_min)
        object.__setattr__(self, "aabb_max", aabb_max)

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.aabb_max) - np.asarray(self.aabb_min)

    @property
    def voxel_size(self) -> np.ndarray:
        return self.extent / (np.asarray(self.resolution) - 1)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.resolution))

    def contains(self, points: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.aabb_min, dtype=points.dtype)
        hi = np.asarray(self.aabb_max, dtype=points.dtype)
        return np.all((points >= lo) & (points <= hi), axis=-1)

    def clip(self, points: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.aabb_min, dtype=points.dtype)
        hi = np.asarray(self.aabb_max, dtype=points.dtype)
        return np.clip(points, lo, hi)

    def to_index_coords(self, points: np.ndarray) -> np.ndarray:
        """Непрерывные индексные координаты в [0, N - 1] по каждой оси"""
        lo = np.asarray(self.aabb_min, dtype=points.dtype)
        scale = ((np.asarray(self.resolution) - 1) / self.extent).astype(points.dtype)
        return (points - lo) * scale

    def with_resolution(self, resolution: tuple[int, int, int]) -> "GridGeometry":
        return GridGeometry(tuple(resolution), self.aabb_min, self.aabb_max)

    def node_positions(self, axis: int) -> np.ndarray:
        return np.linspace(self.aabb_min[axis], self.aabb_max[axis], self.resolution[axis])


def _axis_stencil(coords: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    i0 = np.clip(np.floor(coords), 0, n - 2).astype(np.intp)
    return i0, coords - i0.astype(coords.dtype)


def trilinear_stencil(geometry: GridGeometry, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Восемь узлов трилинейной интерполяции и их веса

    Args:
        geometry: Геометрия сетки
        points: Точки внутри AABB, массив (n, 3)

    Returns:
        Плоские индексы узлов (n, 8) в C-порядке и веса (n, 8)
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    coords = geometry.to_index_coords(geometry.clip(points))
    _, ny, nz = geometry.resolution
    stencils = [_axis_stencil(coords[:, axis], geometry.resolution[axis]) for axis in range(3)]

    indices, weights = [], []
    for dx, dy, dz in itertools.product((0, 1), repeat=3):
        (ix, wx), (iy, wy), (iz, wz) = stencils
        indices.append(((ix + dx) * ny + (iy + dy)) * nz + (iz + dz))
        weights.append((wx if dx else 1 - wx) * (wy if dy else 1 - wy) * (wz if dz else 1 - wz))
    return np.stack(indices, axis=1), np.stack(weights, axis=1)


def interpolate_dense(volume: np.ndarray, geometry: GridGeometry, points: np.ndarray) -> np.ndarray:
    """
    Трилинейная интерполяция плотного массива (Nx, Ny, Nz[, C]); точки вне AABB дают ноль
    """
    volume = np.asarray(volume)
    if volume.shape[:3] != geometry.resolution:
        raise GridError(f"Форма массива {volume.shape[:3]} не совпадает с сеткой {geometry.resolution}")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    flat = volume.reshape(geometry.n_voxels, -1)
    indices, weights = trilinear_stencil(geometry, points)
    values = np.einsum("nk,nkc->nc", weights, flat[indices])
    values *= geometry.contains(points)[:, None]
    return values[:, 0] if volume.ndim == 3 else values


def _resample_axis(array: np.ndarray, axis: int, new_n: int) -> np.ndarray:
    n = array.shape[axis]
    if new_n == n:
        return array.copy()
    positions = np.linspace(0.0, n - 1, new_n)
    i0 = np.clip(np.floor(positions), 0, n - 2).astype(np.intp)
    shape = [1] * array.ndim
    shape[axis] = new_n
    w = (positions - i0).astype(array.dtype).reshape(shape)
    return np.take(array, i0, axis=axis) * (1 - w) + np.take(array, i0 + 1, axis=axis) * w


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class GridCache:
    """Промежуточные значения прямого прохода, нужные для обратного"""
    inside: np.ndarray
    stencils: list[tuple[np.ndarray, np.ndarray]]
    line_values: list[np.ndarray]
    plane_values: Optional[list[np.ndarray]]
    components: np.ndarray


class FactorizedGrid:
    """
    Низкоранговое разложение трехмерной сетки признаков.

    VM: компонента (r, m) равна v^m_r(координата m) * M^m_r(две дополнительные координаты),
    компоненты упорядочены по рангам: индекс 3r + m. CP: одна компонента на ранг,
    произведение трех линий.
    """

    def __init__(self, geometry: GridGeometry, rank: int, decomposition: Decomposition = "vm",
                 lines: Optional[list[np.ndarray]] = None, planes: Optional[list[np.ndarray]] = None,
                 dtype: np.dtype = np.float64):
        if rank < 1:
            raise GridError(f"Ранг разложения должен быть положительным, получено {rank}")
        if decomposition not in ("vm", "cp"):
            raise GridError(f"Неизвестный тип разложения: {decomposition}")

        self.geometry = geometry
        self.rank = int(rank)
        self.decomposition = decomposition
        self.dtype = np.dtype(dtype)

        if lines is None:
            lines = [np.zeros((rank, n), dtype=self.dtype) for n in geometry.resolution]
        if planes is None and decomposition == "vm":
            planes = [np.zeros((rank, geometry.resolution[a], geometry.resolution[b]), dtype=self.dtype)
                      for a, b in PLANE_AXES]

        self.lines = [np.ascontiguousarray(line, dtype=self.dtype) for line in lines]
        self.planes = None if decomposition == "cp" else [np.ascontiguousarray(p, dtype=self.dtype) for p in planes]
        self._validate_factors()

    def _validate_factors(self) -> None:
        if len(self.lines) != 3:
            raise GridError("Требуется ровно три набора линейных факторов")
        for m, line in enumerate(self.lines):
            expected = (self.rank, self.geometry.resolution[m])
            if line.shape != expected:
                raise GridError(f"Линия моды {MODE_NAMES[m]}: форма {line.shape}, ожидалась {expected}")
        if self.planes is not None:
            if len(self.planes) != 3:
                raise GridError("Требуется ровно три набора плоскостных факторов")
            for m, (a, b) in enumerate(PLANE_AXES):
                expected = (self.rank, self.geometry.resolution[a], self.geometry.resolution[b])
                if self.planes[m].shape != expected:
                    raise GridError(f"Плоскость моды {MODE_NAMES[m]}: форма {self.planes[m].shape}, ожидалась {expected}")

    @staticmethod
    def _random_factors(geometry: GridGeometry, rank: int, decomposition: Decomposition, scale: float,
                        rng: np.random.Generator, dtype) -> tuple[list[np.ndarray], Optional[list[np.ndarray]]]:
        lines = [(scale * rng.standard_normal((rank, n))).astype(dtype) for n in geometry.resolution]
        planes = None
        if decomposition == "vm":
            planes = [(scale * rng.standard_normal((rank, geometry.resolution[a], geometry.resolution[b]))).astype(dtype)
                      for a, b in PLANE_AXES]
        return lines, planes

    @property
    def n_components(self) -> int:
        return 3 * self.rank if self.decomposition == "vm" else self.rank

    def parameters(self) -> dict[str, np.ndarray]:
        params = {f"line_{name}": line for name, line in zip(MODE_NAMES, self.lines)}
        if self.planes is not None:
            params.update({f"plane_{name}": plane for name, plane in zip(MODE_NAMES, self.planes)})
        return params

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(value) for name, value in self.parameters().items()}

    @staticmethod
    def _interp_line(line: np.ndarray, stencil: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
        i0, w = stencil
        return (line[:, i0] * (1 - w) + line[:, i0 + 1] * w).T

    @staticmethod
    def _interp_plane(plane: np.ndarray, stencil_a, stencil_b) -> np.ndarray:
        ia, wa = stencil_a
        ib, wb = stencil_b
        return (plane[:, ia, ib] * ((1 - wa) * (1 - wb))
                + plane[:, ia + 1, ib] * (wa * (1 - wb))
                + plane[:, ia, ib + 1] * ((1 - wa) * wb)
                + plane[:, ia + 1, ib + 1] * (wa * wb)).T

    def components(self, points: np.ndarray) -> tuple[np.ndarray, GridCache]:
        """
        Значения всех компонент разложения в точках

        Args:
            points: Мировые координаты (n, 3)

        Returns:
            Компоненты (n, n_components) и кэш для обратного прохода
        """
        points = np.asarray(points, dtype=self.dtype).reshape(-1, 3)
        n = points.shape[0]
        inside = self.geometry.contains(points).astype(self.dtype)
        coords = self.geometry.to_index_coords(self.geometry.clip(points))
        stencils = [_axis_stencil(coords[:, axis], self.geometry.resolution[axis]) for axis in range(3)]
        line_values = [self._interp_line(self.lines[m], stencils[m]) for m in range(3)]

        plane_values = None
        if self.decomposition == "vm":
            plane_values = [self._interp_plane(self.planes[m], stencils[a], stencils[b])
                            for m, (a, b) in enumerate(PLANE_AXES)]
            comps = np.stack([line_values[m] * plane_values[m] for m in range(3)], axis=-1).reshape(n, 3 * self.rank)
        else:
            comps = line_values[0] * line_values[1] * line_values[2]

        comps = comps * inside[:, None]
        return comps, GridCache(inside, stencils, line_values, plane_values, comps)

    @staticmethod
    def _scatter_line(grad: np.ndarray, stencil, upstream: np.ndarray) -> None:
        rank, n = grad.shape
        i0, w = stencil
        offsets = np.arange(rank) * n
        for index, weight in ((i0, 1 - w), (i0 + 1, w)):
            flat = (index[:, None] + offsets[None, :]).ravel()
            grad += np.bincount(flat, weights=(upstream * weight[:, None]).ravel(),
                                minlength=rank * n).reshape(rank, n)

    @staticmethod
    def _scatter_plane(grad: np.ndarray, stencil_a, stencil_b, upstream: np.ndarray) -> None:
        rank, na, nb = grad.shape
        ia, wa = stencil_a
        ib, wb = stencil_b
        offsets = np.arange(rank) * na * nb
        for da, weight_a in ((0, 1 - wa), (1, wa)):
            for db, weight_b in ((0, 1 - wb), (1, wb)):
                flat = (((ia + da) * nb + (ib + db))[:, None] + offsets[None, :]).ravel()
                weights = (upstream * (weight_a * weight_b)[:, None]).ravel()
                grad += np.bincount(flat, weights=weights, minlength=rank * na * nb).reshape(rank, na, nb)

    def components_backward(self, cache: GridCache, d_components: np.ndarray, grads: dict[str, np.ndarray]) -> None:
        """
        Накапливает градиенты факторов в буфер grads по градиенту компонент (n, n_components)
        """
        d = d_components * cache.inside[:, None]
        if self.decomposition == "vm":
            d = d.reshape(-1, self.rank, 3)
            for m, (a, b) in enumerate(PLANE_AXES):
                dm = d[:, :, m]
                self._scatter_line(grads[f"line_{MODE_NAMES[m]}"], cache.stencils[m], dm * cache.plane_values[m])
                self._scatter_plane(grads[f"plane_{MODE_NAMES[m]}"], cache.stencils[a], cache.stencils[b],
                                    dm * cache.line_values[m])
        else:
            lx, ly, lz = cache.line_values
            self._scatter_line(grads["line_x"], cache.stencils[0], d * ly * lz)
            self._scatter_line(grads["line_y"], cache.stencils[1], d * lx * lz)
            self._scatter_line(grads["line_z"], cache.stencils[2], d * lx * ly)

    def dense_components(self, cap: int = DEFAULT_DENSE_CAP) -> np.ndarray:
        """Плотный массив компонент (Nx, Ny, Nz, n_components) в узлах сетки"""
        if self.geometry.n_voxels > cap:
            raise GridCapacityError(
                f"Плотная реконструкция {self.geometry.resolution} = {self.geometry.n_voxels} вокселей "
                f"превышает лимит {cap}"
            )
        lx, ly, lz = self.lines
        if self.decomposition == "cp":
            return np.einsum("rx,ry,rz->xyzr", lx, ly, lz)
        px, py, pz = self.planes
        stacked = np.stack([
            np.einsum("rx,ryz->xyzr", lx, px),
            np.einsum("ry,rxz->xyzr", ly, py),
            np.einsum("rz,rxy->xyzr", lz, pz),
        ], axis=-1)
        return stacked.reshape(*self.geometry.resolution, 3 * self.rank)

    def _upsampled_factors(self, new_resolution: tuple[int, int, int]) -> tuple[GridGeometry, list, Optional[list]]:
        new_resolution = tuple(int(n) for n in new_resolution)
        if any(new < old for new, old in zip(new_resolution, self.geometry.resolution)):
            raise GridError(f"Уменьшение разрешения запрещено: {self.geometry.resolution} -> {new_resolution}")
        geometry = self.geometry.with_resolution(new_resolution)
        lines = [_resample_axis(line, 1, new_resolution[m]) for m, line in enumerate(self.lines)]
        planes = None
        if self.planes is not None:
            planes = [_resample_axis(_resample_axis(plane, 1, new_resolution[a]), 2, new_resolution[b])
                      for plane, (a, b) in zip(self.planes, PLANE_AXES)]
        logger.info(f"Повышение разрешения сетки: {self.geometry.resolution} -> {new_resolution}")
        return geometry, lines, planes


class FactorizedDensityGrid(FactorizedGrid):
    """Сетка плотности G_sigma: сумма компонент с активацией softplus или relu"""

    def __init__(self, geometry: GridGeometry, rank: int, decomposition: Decomposition = "vm",
                 lines=None, planes=None, activation: DensityActivation = "softplus", dtype=np.float64):
        super().__init__(geometry, rank, decomposition, lines, planes, dtype)
        if activation not in ("softplus", "relu"):
            raise GridError(f"Неизвестная активация плотности: {activation}")
        self.activation = activation

    @classmethod
    def random(cls, geometry: GridGeometry, rank: int, decomposition: Decomposition = "vm",
               activation: DensityActivation = "softplus", scale: float = 0.1,
               rng: Optional[np.random.Generator] = None, dtype=np.float64) -> "FactorizedDensityGrid":
        rng = rng if rng is not None else np.random.default_rng(0)
        lines, planes = cls._random_factors(geometry, rank, decomposition, scale, rng, dtype)
        return cls(geometry, rank, decomposition, lines, planes, activation, dtype)

    def activate(self, raw: np.ndarray) -> np.ndarray:
        return softplus(raw) if self.activation == "softplus" else np.maximum(raw, 0)

    def activation_grad(self, raw: np.ndarray) -> np.ndarray:
        return sigmoid(raw) if self.activation == "softplus" else (raw > 0).astype(raw.dtype)

    def raw_density(self, points: np.ndarray, mask: Optional[np.ndarray] = None) -> tuple[np.ndarray, GridCache]:
        """
        Сумма компонент до активации; маска (если задана) умножается на компоненты

        Returns:
            Сырые значения (n,) и кэш прямого прохода
        """
        comps, cache = self.components(points)
        if mask is not None:
            comps = apply_mask(comps, mask)
        return comps.sum(axis=1), cache

    def eval_density(self, points: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
        raw, cache = self.raw_density(points, mask)
        return self.activate(raw) * cache.inside

    def raw_backward(self, cache: GridCache, d_raw: np.ndarray, grads: dict[str, np.ndarray],
                     mask: Optional[np.ndarray] = None) -> None:
        d_components = np.repeat(d_raw[:, None], self.n_components, axis=1)
        if mask is not None:
            d_components = d_components * mask
        self.components_backward(cache, d_components, grads)

    def grad_factors(self, points: np.ndarray, upstream: np.ndarray, mask: Optional[np.ndarray] = None,
                     grads: Optional[dict[str, np.ndarray]] = None) -> dict[str, np.ndarray]:
        """
        Градиент сырой плотности по всем факторам, умноженный на upstream

        Args:
            points: Точки (n, 3)
            upstream: Градиент по сырой плотности (n,)
            mask: Маска компонент (опционально)
            grads: Буфер для накопления (создается при отсутствии)

        Returns:
            Буфер градиентов той же структуры, что и parameters()
        """
        grads = grads if grads is not None else self.zero_grads()
        _, cache = self.raw_density(points, mask)
        self.raw_backward(cache, np.asarray(upstream, dtype=self.dtype).reshape(-1), grads, mask)
        return grads

    def dense_reconstruct(self, cap: int = DEFAULT_DENSE_CAP) -> np.ndarray:
        return self.dense_components(cap).sum(axis=-1)

    def upsample(self, new_resolution: tuple[int, int, int]) -> "FactorizedDensityGrid":
        geometry, lines, planes = self._upsampled_factors(new_resolution)
        return FactorizedDensityGrid(geometry, self.rank, self.decomposition, lines, planes,
                                     self.activation, self.dtype)


class FactorizedAppearanceGrid(FactorizedGrid):
    """Сетка внешнего вида G_c: компоненты, спроецированные базисом b на P признаков"""

    def __init__(self, geometry: GridGeometry, rank: int, feature_dim: int, decomposition: Decomposition = "vm",
                 lines=None, planes=None, basis: Optional[np.ndarray] = None, dtype=np.float64):
        super().__init__(geometry, rank, decomposition, lines, planes, dtype)
        if feature_dim < 3:
            raise GridError(f"Размерность признаков P должна быть не меньше 3, получено {feature_dim}")
        self.feature_dim = int(feature_dim)
        if basis is None:
            basis = np.zeros((self.n_components, feature_dim), dtype=self.dtype)
        self.basis = np.ascontiguousarray(basis, dtype=self.dtype)
        if self.basis.shape != (self.n_components, self.feature_dim):
            raise GridError(f"Базис формы {self.basis.shape}, ожидалась {(self.n_components, self.feature_dim)}")

    @classmethod
    def random(cls, geometry: GridGeometry, rank: int, feature_dim: int, decomposition: Decomposition = "vm",
               scale: float = 0.1, rng: Optional[np.random.Generator] = None,
               dtype=np.float64) -> "FactorizedAppearanceGrid":
        rng = rng if rng is not None else np.random.default_rng(0)
        lines, planes = cls._random_factors(geometry, rank, decomposition, scale, rng, dtype)
        n_components = 3 * rank if decomposition == "vm" else rank
        gaussian = rng.standard_normal((n_components, feature_dim))
        if n_components >= feature_dim:
            basis, _ = np.linalg.qr(gaussian)
        else:
            basis = np.linalg.qr(gaussian.T)[0].T
        return cls(geometry, rank, feature_dim, decomposition, lines, planes, basis.astype(dtype), dtype)

    def parameters(self) -> dict[str, np.ndarray]:
        return super().parameters() | {"basis": self.basis}

    def features(self, points: np.ndarray) -> tuple[np.ndarray, GridCache]:
        comps, cache = self.components(points)
        return comps @ self.basis, cache

    def eval_appearance(self, points: np.ndarray) -> np.ndarray:
        return self.features(points)[0]

    def features_backward(self, cache: GridCache, d_features: np.ndarray, grads: dict[str, np.ndarray]) -> None:
        grads["basis"] += cache.components.T @ d_features
        self.components_backward(cache, d_features @ self.basis.T, grads)

    def grad_factors(self, points: np.ndarray, upstream: np.ndarray,
                     grads: Optional[dict[str, np.ndarray]] = None) -> dict[str, np.ndarray]:
        grads = grads if grads is not None else self.zero_grads()
        _, cache = self.features(points)
        self.features_backward(cache, np.asarray(upstream, dtype=self.dtype).reshape(-1, self.feature_dim), grads)
        return grads

    def dense_reconstruct(self, cap: int = DEFAULT_DENSE_CAP) -> np.ndarray:
        """Плотные признаки (Nx, Ny, Nz, P), по одному массиву на канал в последней оси"""
        return self.dense_components(cap) @ self.basis

    def upsample(self, new_resolution: tuple[int, int, int]) -> "FactorizedAppearanceGrid":
        geometry, lines, planes = self._upsampled_factors(new_resolution)
        return FactorizedAppearanceGrid(geometry, self.rank, self.feature_dim, self.decomposition,
                                        lines, planes, self.basis.copy(), self.dtype)


def eval_density(grid: FactorizedDensityGrid, points: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    return grid.eval_density(points, mask)


def eval_appearance(grid: FactorizedAppearanceGrid, points: np.ndarray) -> np.ndarray:
    return grid.eval_appearance(points)


def dense_reconstruct(grid: FactorizedGrid, cap: int = DEFAULT_DENSE_CAP) -> np.ndarray:
    return grid.dense_reconstruct(cap)


def grad_factors(grid: FactorizedGrid, points: np.ndarray, upstream: np.ndarray) -> dict[str, np.ndarray]:
    return grid.grad_factors(points, upstream)


def upsample(grid: FactorizedGrid, new_resolution: tuple[int, int, int]) -> FactorizedGrid:
    return grid.upsample(new_resolution)
