from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Union

import numpy as np

from few_tensorf.errors import NonFiniteGradientError

if TYPE_CHECKING:
    from few_tensorf.training.state import TrainState

GRID_GROUP = "grid"
NETWORK_GROUP = "network"


def param_group(name: str) -> str:
    """Группа скорости обучения: факторы сеток или сеть (декодер и базис внешнего вида)"""
    section, _, leaf = name.partition(".")
    if section in ("density", "appearance") and leaf.startswith(("line_", "plane_")):
        return GRID_GROUP
    return NETWORK_GROUP


@dataclass
class AdamMoments:
    step: int
    m: np.ndarray
    v: np.ndarray


class AdamOptimizer:
    """
    Adam с коррекцией смещения. Моменты и счетчик шагов хранятся отдельно для каждого
    параметра, поэтому сброс моментов после повышения разрешения затрагивает только факторы сеток.
    """

    def __init__(self, betas: tuple[float, float] = (0.9, 0.99), eps: float = 1e-8):
        """
        Args:
            betas: Коэффициенты затухания первого и второго моментов
            eps: Добавка к знаменателю
        """
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.moments: dict[str, AdamMoments] = {}

    def _moments_for(self, name: str, param: np.ndarray) -> AdamMoments:
        moments = self.moments.get(name)
        if moments is None or moments.m.shape != param.shape:
            moments = AdamMoments(0, np.zeros_like(param), np.zeros_like(param))
            self.moments[name] = moments
        return moments

    def reset(self, names: Iterable[str]) -> None:
        for name in names:
            self.moments.pop(name, None)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: Union[float, dict[str, float]]) -> None:
        """
        Один шаг Adam; параметры обновляются на месте

        Args:
            params: Параметры модели по именам
            grads: Градиенты с теми же ключами и формами
            lr: Скорость обучения: число или словарь {"grid": ..., "network": ...}
        """
        for name, grad in grads.items():
            if name not in params:
                raise KeyError(f"Градиент для неизвестного параметра: {name}")
            if grad.shape != params[name].shape:
                raise ValueError(f"Форма градиента {name} {grad.shape} не совпадает с параметром {params[name].shape}")
            if not np.all(np.isfinite(grad)):
                raise NonFiniteGradientError(name)

        for name, grad in grads.items():
            param = params[name]
            rate = lr if not isinstance(lr, dict) else lr[param_group(name)]
            moments = self._moments_for(name, param)
            moments.step += 1
            moments.m *= self.beta1
            moments.m += (1 - self.beta1) * grad
            moments.v *= self.beta2
            moments.v += (1 - self.beta2) * grad * grad
            m_hat = moments.m / (1 - self.beta1 ** moments.step)
            v_hat = moments.v / (1 - self.beta2 ** moments.step)
            param -= (rate * m_hat / (np.sqrt(v_hat) + self.eps)).astype(param.dtype, copy=False)


def adam_step(state: "TrainState", gradients: dict[str, np.ndarray],
              lr: Union[float, dict[str, float]]) -> "TrainState":
    """Шаг Adam по всем параметрам модели состояния; счетчик итераций t продвигает вызывающий код"""
    state.optimizer.step(state.field.parameters(), gradients, lr)
    return state
