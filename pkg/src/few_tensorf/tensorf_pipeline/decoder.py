from dataclasses import dataclass
from typing import Optional

import numpy as np

from few_tensorf.errors import DecoderError
from few_tensorf.tensorf_pipeline.factor_grid import sigmoid


@dataclass
class DecoderCache:
    inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]
    output: np.ndarray


class MLPDecoder:
    """
    Функция S: небольшой MLP, переводящий закодированные признаки внешнего вида
    и направление взгляда в цвет RGB. Скрытые слои - relu, выход - sigmoid.
    """

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise DecoderError("Число матриц весов и векторов смещений должно совпадать и быть положительным")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DecoderError(f"Слой {i}: веса {w.shape} и смещения {b.shape} несовместимы")
            if i > 0 and weights[i - 1].shape[1] != w.shape[0]:
                raise DecoderError(f"Слой {i}: вход {w.shape[0]} не совпадает с выходом предыдущего слоя")
        if weights[-1].shape[1] != 3:
            raise DecoderError(f"Выход декодера должен иметь размерность 3, получено {weights[-1].shape[1]}")
        self.weights = [np.ascontiguousarray(w) for w in weights]
        self.biases = [np.ascontiguousarray(b) for b in biases]

    @classmethod
    def initialize(cls, input_dim: int, hidden_widths: tuple[int, ...] = (128, 128),
                   rng: Optional[np.random.Generator] = None, dtype=np.float64) -> "MLPDecoder":
        """He-инициализация из равномерного распределения, нулевые смещения"""
        rng = rng if rng is not None else np.random.default_rng(0)
        widths = [input_dim, *hidden_widths, 3]
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
            biases.append(np.zeros(fan_out, dtype=dtype))
        return cls(weights, biases)

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"w{i}"] = w
            params[f"b{i}"] = b
        return params

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(value) for name, value in self.parameters().items()}

    def forward(self, encoded: np.ndarray) -> tuple[np.ndarray, DecoderCache]:
        if encoded.shape[-1] != self.input_dim:
            raise DecoderError(f"Вход декодера имеет длину {encoded.shape[-1]}, ожидалась {self.input_dim}")
        inputs, pre_activations = [], []
        h = encoded
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w + b
            pre_activations.append(z)
            h = sigmoid(z) if i == last else np.maximum(z, 0)
        return h, DecoderCache(inputs, pre_activations, h)

    def backward(self, cache: DecoderCache, d_rgb: np.ndarray,
                 grads: dict[str, np.ndarray]) -> np.ndarray:
        """
        Накапливает градиенты параметров и возвращает градиент по входу

        Args:
            cache: Кэш прямого прохода
            d_rgb: Градиент по выходу (n, 3)
            grads: Буфер градиентов параметров

        Returns:
            Градиент по закодированному входу (n, input_dim)
        """
        d_z = d_rgb * cache.output * (1 - cache.output)
        for i in range(len(self.weights) - 1, -1, -1):
            grads[f"w{i}"] += cache.inputs[i].T @ d_z
            grads[f"b{i}"] += d_z.sum(axis=0)
            d_h = d_z @ self.weights[i].T
            if i > 0:
                d_z = d_h * (cache.pre_activations[i - 1] > 0)
        return d_h


def decode(decoder: MLPDecoder, encoded: np.ndarray) -> np.ndarray:
    return decoder.forward(encoded)[0]


def decode_backward(decoder: MLPDecoder, encoded: np.ndarray,
                    d_rgb: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Градиенты всех параметров декодера и градиент по входу"""
    _, cache = decoder.forward(encoded)
    grads = decoder.zero_grads()
    d_encoded = decoder.backward(cache, d_rgb, grads)
    return grads, d_encoded
