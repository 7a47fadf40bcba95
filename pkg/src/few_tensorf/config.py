import hashlib
import json
import os
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from few_tensorf.errors import ConfigError
from few_tensorf.tensorf_pipeline.freq_mask import FrequencyMaskSchedule

Vec3 = tuple[float, float, float]
Res3 = tuple[int, int, int]


class Settings(BaseSettings):
    """Параметры процесса из окружения (префикс FEWT_) и файла .env"""
    model_config = SettingsConfigDict(env_prefix="FEWT_", env_file=".env", extra="ignore")

    threads: int = Field(default_factory=lambda: os.cpu_count() or 1, ge=1)
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"] = "INFO"

    @field_validator("log_level", mode="before")
    @classmethod
    def _upper_level(cls, value: Any) -> Any:
        return value.upper() if isinstance(value, str) else value


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class AnalyticSceneConfig(StrictModel):
    kind: Literal["sphere", "boxes", "sphere_and_boxes", "empty"] = "sphere_and_boxes"
    image_size: int = Field(default=100, ge=2)
    n_views: int = Field(default=8, ge=1)
    n_test_views: int = Field(default=12, ge=0)
    samples_per_ray: int = Field(default=1024, ge=2)
    camera_radius: float = Field(default=4.0, gt=0.0)
    camera_angle_x: float = Field(default=0.6911112070083618, gt=0.0, lt=3.141592653589793)


class DatasetConfig(StrictModel):
    root: Optional[Path] = None
    analytic: AnalyticSceneConfig = Field(default_factory=AnalyticSceneConfig)
    downscale: int = Field(default=1, ge=1)
    view_ids: Optional[list[int]] = None
    view_count: Optional[int] = Field(default=None, ge=1)
    test_split: str = "test"


class ModelConfig(StrictModel):
    resolution: Res3 = (64, 64, 64)
    aabb_min: Vec3 = (-1.5, -1.5, -1.5)
    aabb_max: Vec3 = (1.5, 1.5, 1.5)
    decomposition: Literal["vm", "cp"] = "vm"
    density_rank: int = Field(default=8, ge=1)
    appearance_rank: int = Field(default=16, ge=1)
    feature_dim: int = Field(default=27, ge=3)
    density_activation: Literal["softplus", "relu"] = "softplus"
    density_init_scale: float = Field(default=0.1, ge=0.0)
    appearance_init_scale: float = Field(default=0.1, ge=0.0)
    decoder_hidden: list[int] = [128, 128]
    n_freq_features: int = Field(default=2, ge=0)
    n_freq_view: int = Field(default=2, ge=0)
    dtype: Literal["float32", "float64"] = "float32"

    @model_validator(mode="after")
    def _check_bounds(self) -> "ModelConfig":
        if any(n < 2 for n in self.resolution):
            raise ValueError("каждое измерение resolution должно быть не меньше 2")
        if not all(lo < hi for lo, hi in zip(self.aabb_min, self.aabb_max)):
            raise ValueError("требуется aabb_min < aabb_max покомпонентно")
        return self


class RenderConfig(StrictModel):
    n_samples: int = Field(default=128, ge=2)
    near: float = Field(default=2.0, ge=0.0)
    far: float = Field(default=6.0, gt=0.0)
    background: Vec3 = (1.0, 1.0, 1.0)
    occlusion_samples: Optional[int] = Field(default=None, ge=1)
    chunk_size: int = Field(default=1024, ge=1)

    @model_validator(mode="after")
    def _check_range(self) -> "RenderConfig":
        if self.near >= self.far:
            raise ValueError("требуется near < far")
        return self

    @property
    def occlusion_k(self) -> int:
        """Число приближенных к камере отсчетов: явное или 10% от отсчетов на луч"""
        if self.occlusion_samples is not None:
            return self.occlusion_samples
        return max(1, round(0.1 * self.n_samples))


class MaskSchedulesConfig(StrictModel):
    density: FrequencyMaskSchedule = Field(default_factory=FrequencyMaskSchedule)
    appearance: FrequencyMaskSchedule = Field(default_factory=FrequencyMaskSchedule)
    encoding: FrequencyMaskSchedule = Field(default_factory=FrequencyMaskSchedule)


class TrainerConfig(StrictModel):
    iterations: int = Field(default=15000, ge=1)
    ray_batch_size: int = Field(default=1024, ge=1)
    lr_grid: float = Field(default=0.02, gt=0.0)
    lr_network: float = Field(default=1e-3, gt=0.0)
    betas: tuple[float, float] = (0.9, 0.99)
    eps: float = Field(default=1e-8, gt=0.0)
    lr_decay: bool = True
    lr_decay_ratio: float = Field(default=0.1, gt=0.0)
    lambda_occ: float = Field(default=0.01, ge=0.0)
    lambda_l1: float = Field(default=1e-4, ge=0.0)
    masks: MaskSchedulesConfig = Field(default_factory=MaskSchedulesConfig)
    upsample_schedule: list[tuple[int, Res3]] = []
    checkpoint_every: int = Field(default=0, ge=0)
    jitter: bool = True


class EvalConfig(StrictModel):
    views: Optional[list[int]] = None
    quantized_psnr: bool = False
    save_images: bool = True


class ExportConfig(StrictModel):
    iso: float = 25.0
    resolution: int = Field(default=128, ge=2)
    format: Literal["stl", "obj"] = "stl"


class RunConfig(StrictModel):
    """Полная конфигурация запуска; у каждого поля есть значение по умолчанию"""
    seed: int = Field(default=0, ge=0)
    output_dir: Path = Path("runs/default")
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    render: RenderConfig = Field(default_factory=RenderConfig)
    trainer: TrainerConfig = Field(default_factory=TrainerConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    export: ExportConfig = Field(default_factory=ExportConfig)


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(payload: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """
    Применяет переопределения вида "trainer.iterations=10" к словарю конфигурации

    Args:
        payload: Исходный словарь конфигурации
        overrides: Список строк "ключ.подключ=значение"

    Returns:
        Новый словарь с примененными переопределениями
    """
    result = json.loads(json.dumps(payload, default=str))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"Переопределение '{item}' должно иметь вид ключ=значение")
        key, raw_value = item.split("=", 1)
        parts = key.strip().split(".")
        node = result
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"Ключ '{key}' указывает внутрь не-объекта")
        node[parts[-1]] = _parse_value(raw_value.strip())
    return result


def deep_merge(base: dict[str, Any], update: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _format_validation_error(error: ValidationError) -> str:
    lines = []
    for issue in error.errors():
        location = ".".join(str(part) for part in issue["loc"]) or "<root>"
        lines.append(f"  {location}: {issue['msg']}")
    return "Некорректная конфигурация:\n" + "\n".join(lines)


def build_run_config(payload: dict[str, Any], overrides: Optional[list[str]] = None) -> RunConfig:
    payload = apply_overrides(payload, overrides or [])
    try:
        return RunConfig.model_validate(payload)
    except ValidationError as e:
        raise ConfigError(_format_validation_error(e)) from e


def load_run_config(path: Optional[Path], overrides: Optional[list[str]] = None) -> RunConfig:
    """
    Загружает конфигурацию запуска из JSON-файла с переопределениями

    Args:
        path: Путь к JSON (None - конфигурация по умолчанию)
        overrides: Переопределения "ключ=значение"

    Returns:
        Проверенная конфигурация RunConfig
    """
    payload: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Файл конфигурации не найден: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                payload = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Некорректный JSON в {path}: {e}") from e
        if not isinstance(payload, dict):
            raise ConfigError(f"Корень конфигурации {path} должен быть объектом")
    return build_run_config(payload, overrides)


def config_hash(config: RunConfig) -> str:
    """SHA-256 канонического JSON-представления конфигурации"""
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def describe_config_keys(model: type[BaseModel] = RunConfig, prefix: str = "") -> list[str]:
    """Список всех ключей конфигурации с значениями по умолчанию для --help"""
    lines = []
    defaults = model().model_dump(mode="json")
    for name, field in model.model_fields.items():
        key = f"{prefix}{name}"
        annotation = field.annotation
        if isinstance(annotation, type) and issubclass(annotation, BaseModel):
            lines.extend(describe_config_keys(annotation, prefix=f"{key}."))
        else:
            lines.append(f"  {key} = {json.dumps(defaults[name])}")
    return lines
