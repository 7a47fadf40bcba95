"""Исключения пакета few_tensorf."""


class FewTError(Exception):
    """Базовое исключение пакета"""


class ConfigError(FewTError, ValueError):
    """Некорректная конфигурация запуска"""


class GridError(FewTError, ValueError):
    """Некорректная геометрия или форма факторов тензорной сетки"""


class GridCapacityError(GridError):
    """Плотная реконструкция превышает допустимый объем памяти"""


class MaskError(FewTError, ValueError):
    """Несовпадение длины частотной маски и маскируемого вектора"""


class DecoderError(FewTError, ValueError):
    """Несовпадение размерностей входа декодера"""


class DatasetError(FewTError, ValueError):
    """Некорректный набор данных"""


class CheckpointError(FewTError, ValueError):
    """Поврежденный или несовместимый чекпоинт"""


class CheckpointVersionError(CheckpointError):
    """Версия формата чекпоинта не поддерживается"""

    def __init__(self, expected: int, actual: int):
        self.expected = expected
        self.actual = actual
        super().__init__(f"Неподдерживаемая версия чекпоинта: ожидалась {expected}, получена {actual}")


class MetricError(FewTError, ValueError):
    """Некорректные входные данные метрики"""


class NonFiniteGradientError(FewTError, ArithmeticError):
    """Градиент содержит NaN или Inf"""

    def __init__(self, parameter: str):
        self.parameter = parameter
        super().__init__(f"Неконечный градиент в группе параметров '{parameter}'")


class TrainingDivergedError(FewTError, RuntimeError):
    """Функция потерь стала неконечной во время обучения"""
