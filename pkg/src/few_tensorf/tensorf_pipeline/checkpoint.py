"""
Бинарный формат чекпоинта (версия 1), все значения little-endian, массивы f32 построчно:

    "FEWT" | u32 версия | u8 разложение (0 VM, 1 CP) | u8 активация (0 softplus, 1 relu) | u16 резерв
    | u32 Nx Ny Nz | f32 aabb_min[3] aabb_max[3] | u32 R_sigma R_c P | u32 t
    | u32 n_layers | u32 widths[n_layers + 1]
    | факторы плотности | факторы внешнего вида | базис (n_comp, P) | веса и смещения декодера
    | u8 has_optimizer | [для каждого параметра: u32 step, m, v]
    | u32 config_len | JSON конфигурации запуска
"""
import io
import logging
import struct
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from few_tensorf.config import RunConfig
from few_tensorf.errors import CheckpointError, CheckpointVersionError
from few_tensorf.io_utils import atomic_write_bytes
from few_tensorf.tensorf_pipeline.decoder import MLPDecoder
from few_tensorf.tensorf_pipeline.factor_grid import (
    PLANE_AXES,
    FactorizedAppearanceGrid,
    FactorizedDensityGrid,
    GridGeometry,
)
from few_tensorf.tensorf_pipeline.field import RadianceField
from few_tensorf.training.optimizer import AdamMoments, AdamOptimizer
from few_tensorf.training.state import TrainState

logger = logging.getLogger("FewT.Checkpoint")

MAGIC = b"FEWT"
FORMAT_VERSION = 1
DECOMPOSITIONS = ("vm", "cp")
ACTIVATIONS = ("softplus", "relu")
STORAGE_DTYPE = np.dtype("<f4")


def _write_array(buffer: io.BytesIO, array: np.ndarray) -> None:
    buffer.write(np.ascontiguousarray(array, dtype=STORAGE_DTYPE).tobytes())


def checkpoint_bytes(state: TrainState) -> bytes:
    """Сериализует состояние обучения в байты формата FEWT"""
    field = state.field
    density, appearance, decoder = field.density, field.appearance, field.decoder
    geometry = field.geometry
    buffer = io.BytesIO()

    buffer.write(MAGIC)
    buffer.write(struct.pack("<IBBH", FORMAT_VERSION, DECOMPOSITIONS.index(density.decomposition),
                             ACTIVATIONS.index(density.activation), 0))
    buffer.write(struct.pack("<3I", *geometry.resolution))
    buffer.write(struct.pack("<6f", *geometry.aabb_min, *geometry.aabb_max))
    buffer.write(struct.pack("<4I", density.rank, appearance.rank, appearance.feature_dim, state.t))
    widths = decoder.widths
    buffer.write(struct.pack(f"<I{len(widths)}I", len(widths) - 1, *widths))

    params = field.parameters()
    for value in params.values():
        _write_array(buffer, value)

    moments = state.optimizer.moments
    buffer.write(struct.pack("<B", 1 if moments else 0))
    if moments:
        for name, value in params.items():
            entry = moments.get(name)
            if entry is None:
                entry = AdamMoments(0, np.zeros_like(value), np.zeros_like(value))
            buffer.write(struct.pack("<I", entry.step))
            _write_array(buffer, entry.m)
            _write_array(buffer, entry.v)

    config_json = state.config.model_dump_json().encode("utf-8")
    buffer.write(struct.pack("<I", len(config_json)))
    buffer.write(config_json)
    return buffer.getvalue()


def save_checkpoint(path: Path, state: TrainState) -> None:
    """
    Атомарно сохраняет чекпоинт

    Args:
        path: Путь к файлу
        state: Состояние обучения
    """
    atomic_write_bytes(Path(path), checkpoint_bytes(state))
    logger.info(f"Чекпоинт сохранен: {path} (итерация {state.t})")


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointError(f"Чекпоинт {self.source} обрезан: ожидалось еще {size} байт "
                                  f"со смещения {self.offset}")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, shape: tuple[int, ...], dtype: np.dtype) -> np.ndarray:
        count = int(np.prod(shape))
        raw = np.frombuffer(self.take(count * STORAGE_DTYPE.itemsize), dtype=STORAGE_DTYPE)
        return raw.reshape(shape).astype(dtype)


def _factor_shapes(resolution: tuple[int, int, int], rank: int, decomposition: str) -> list[tuple[int, ...]]:
    shapes = [(rank, n) for n in resolution]
    if decomposition == "vm":
        shapes += [(rank, resolution[a], resolution[b]) for a, b in PLANE_AXES]
    return shapes


def parse_checkpoint(data: bytes, source: str = "<bytes>") -> TrainState:
    """Восстанавливает состояние обучения из байтов формата FEWT"""
    reader = _Reader(data, source)
    if reader.take(4) != MAGIC:
        raise CheckpointError(f"Файл {source} не является чекпоинтом FEWT")
    version, decomposition_code, activation_code, _ = reader.unpack("<IBBH")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(FORMAT_VERSION, version)
    if decomposition_code >= len(DECOMPOSITIONS) or activation_code >= len(ACTIVATIONS):
        raise CheckpointError(f"Неизвестный тип разложения или активации в {source}")
    decomposition = DECOMPOSITIONS[decomposition_code]
    activation = ACTIVATIONS[activation_code]

    resolution = reader.unpack("<3I")
    bounds = reader.unpack("<6f")
    density_rank, appearance_rank, feature_dim, t = reader.unpack("<4I")
    (n_layers,) = reader.unpack("<I")
    widths = reader.unpack(f"<{n_layers + 1}I")

    geometry = GridGeometry(resolution, bounds[:3], bounds[3:])
    float_type = np.float32

    density_shapes = _factor_shapes(resolution, density_rank, decomposition)
    density_factors = [reader.array(shape, float_type) for shape in density_shapes]
    appearance_shapes = _factor_shapes(resolution, appearance_rank, decomposition)
    appearance_factors = [reader.array(shape, float_type) for shape in appearance_shapes]
    n_components = 3 * appearance_rank if decomposition == "vm" else appearance_rank
    basis = reader.array((n_components, feature_dim), float_type)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(reader.array((fan_in, fan_out), float_type))
        biases.append(reader.array((fan_out,), float_type))

    (has_optimizer,) = reader.unpack("<B")
    parameter_shapes = density_shapes + appearance_shapes + [basis.shape]
    for w, b in zip(weights, biases):
        parameter_shapes += [w.shape, b.shape]
    raw_moments = []
    if has_optimizer:
        for shape in parameter_shapes:
            (step,) = reader.unpack("<I")
            raw_moments.append((step, reader.array(shape, float_type), reader.array(shape, float_type)))

    (config_len,) = reader.unpack("<I")
    try:
        config = RunConfig.model_validate_json(reader.take(config_len).decode("utf-8"))
    except (ValidationError, UnicodeDecodeError) as e:
        raise CheckpointError(f"Некорректная конфигурация внутри чекпоинта {source}: {e}") from e
    if reader.offset != len(data):
        raise CheckpointError(f"Лишние {len(data) - reader.offset} байт в конце чекпоинта {source}")

    dtype = np.dtype(config.model.dtype)
    # f32 в заголовке округляет границы; точные значения берутся из конфигурации
    if np.allclose(bounds, (*config.model.aabb_min, *config.model.aabb_max), atol=1e-6):
        geometry = GridGeometry(resolution, config.model.aabb_min, config.model.aabb_max)
    n_lines = 3
    density = FactorizedDensityGrid(
        geometry, density_rank, decomposition, density_factors[:n_lines], density_factors[n_lines:] or None,
        activation, dtype,
    )
    appearance = FactorizedAppearanceGrid(
        geometry, appearance_rank, feature_dim, decomposition, appearance_factors[:n_lines],
        appearance_factors[n_lines:] or None, basis, dtype,
    )
    decoder = MLPDecoder([w.astype(dtype) for w in weights], [b.astype(dtype) for b in biases])
    field = RadianceField(density, appearance, decoder, config.model.n_freq_features, config.model.n_freq_view)

    optimizer = AdamOptimizer(config.trainer.betas, config.trainer.eps)
    for name, (step, m, v) in zip(field.parameters(), raw_moments):
        if step:
            optimizer.moments[name] = AdamMoments(step, m.astype(dtype), v.astype(dtype))
    return TrainState(field, optimizer, config, t)


def load_checkpoint(path: Path) -> TrainState:
    """
    Загружает чекпоинт с проверкой сигнатуры, версии и размеров всех массивов

    Args:
        path: Путь к файлу чекпоинта

    Returns:
        Восстановленное состояние обучения с конфигурацией запуска
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Чекпоинт не найден: {path}")
    state = parse_checkpoint(path.read_bytes(), str(path))
    logger.info(f"Чекпоинт загружен: {path} (итерация {state.t})")
    return state
