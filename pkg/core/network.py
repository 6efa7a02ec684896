"""
Минимальная полносвязная сеть с попримерным обратным распространением.

Все параметры сети хранятся в одном плоском векторе ``params`` в порядке
W1 (построчно), b1, W2, b2, ... Слои получают представления (views) этого
вектора, поэтому flatten/unflatten тривиальны и сохраняют порядок.
"""
import logging.config
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import InvalidTarget, NonFiniteGradient, ShapeMismatch
from core.linalg import Rng
from core.logger import logger_config

logging.config.dictConfig(logger_config)
logger = logging.getLogger('misgrad_logger')

CHECKPOINT_MAGIC = 'MISGRAD1'
DEFAULT_FIRST_OMEGA = 30.0


class Activation(Enum):
    """Поддерживаемые функции активации."""
    RELU = 'relu'
    SINE = 'sine'
    IDENTITY = 'identity'


class LossKind(Enum):
    """Поддерживаемые функции потерь."""
    MSE = 'mse'
    CROSS_ENTROPY = 'cross_entropy'


@dataclass
class DenseLayer:
    """Полносвязный слой: a = act(omega · (W x + b))."""
    weights: np.ndarray
    biases: np.ndarray
    activation: Activation
    omega: float = 1.0

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[0]


@dataclass
class SampleGrad:
    """Результат обратного прохода для одного элемента данных."""
    loss: float
    param_grad: np.ndarray
    output_grad: np.ndarray
    index: int = -1


@dataclass
class SampleBatch:
    """Попримерные результаты для пакета: строка i соответствует indices[i]."""
    indices: np.ndarray
    losses: np.ndarray
    param_grads: np.ndarray
    output_grads: np.ndarray
    outputs: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.indices)

    def sample(self, i: int) -> SampleGrad:
        return SampleGrad(
            loss=float(self.losses[i]),
            param_grad=self.param_grads[i],
            output_grad=self.output_grads[i],
            index=int(self.indices[i]),
        )

    def take(self, rows) -> 'SampleBatch':
        """Подпакет из строк ``rows`` (срез или массив номеров)."""
        return SampleBatch(
            indices=self.indices[rows],
            losses=self.losses[rows],
            param_grads=self.param_grads[rows],
            output_grads=self.output_grads[rows],
            outputs=None if self.outputs is None else self.outputs[rows],
        )

    def param_columns(self, columns: np.ndarray) -> np.ndarray:
        """Попримерные градиенты по параметрам с номерами ``columns``."""
        return self.param_grads[:, columns]

    @classmethod
    def from_samples(cls, samples: Sequence[SampleGrad]) -> 'SampleBatch':
        return cls(
            indices=np.array([s.index for s in samples], dtype=np.int64),
            losses=np.array([s.loss for s in samples], dtype=np.float64),
            param_grads=np.stack([s.param_grad for s in samples]),
            output_grads=np.stack([s.output_grad for s in samples]),
        )

    @classmethod
    def concat(cls, parts: Sequence['SampleBatch']) -> 'SampleBatch':
        outputs = None
        if all(p.outputs is not None for p in parts):
            outputs = np.concatenate([p.outputs for p in parts])
        return cls(
            indices=np.concatenate([p.indices for p in parts]),
            losses=np.concatenate([p.losses for p in parts]),
            param_grads=np.concatenate([p.param_grads for p in parts]),
            output_grads=np.concatenate([p.output_grads for p in parts]),
            outputs=outputs,
        )


@dataclass
class WeightedBatch:
    """
    Пакет без попримерных градиентов всех параметров.

    ``grads[k]`` равен Σ_i weights[i, k]·∇L(x_i); попримерно хранятся только
    градиенты параметров выходного слоя (``head_grads``), начиная с номера
    ``head_start`` в плоском векторе.
    """
    indices: np.ndarray
    losses: np.ndarray
    output_grads: np.ndarray
    outputs: np.ndarray
    grads: np.ndarray
    head_grads: np.ndarray
    head_start: int

    def __len__(self) -> int:
        return len(self.indices)

    def param_columns(self, columns: np.ndarray) -> np.ndarray:
        local = np.asarray(columns) - self.head_start
        if np.any(local < 0) or np.any(local >= self.head_grads.shape[1]):
            error_msg = 'Попримерно доступны только параметры выходного слоя'
            logger.error(error_msg)
            raise ShapeMismatch(error_msg)
        return self.head_grads[:, local]


class Network:
    """Последовательность полносвязных слоёв над общим вектором параметров."""

    def __init__(self, shapes: Sequence[Tuple[int, int]], activations: Sequence[Activation],
                 omegas: Optional[Sequence[float]] = None):
        if len(shapes) != len(activations):
            raise ShapeMismatch('Число слоёв не совпадает с числом активаций')
        for (out_prev, _), (_, in_next) in zip(shapes, shapes[1:]):
            if out_prev != in_next:
                error_msg = f'Размерности слоёв не согласованы: {out_prev} -> {in_next}'
                logger.error(error_msg)
                raise ShapeMismatch(error_msg)

        omegas = list(omegas) if omegas is not None else [1.0] * len(shapes)
        self.param_count = sum(out * inp + out for out, inp in shapes)
        self.params = np.zeros(self.param_count, dtype=np.float64)
        self.layers: List[DenseLayer] = []
        self._slices: List[Tuple[slice, slice]] = []

        offset = 0
        for (out, inp), activation, omega in zip(shapes, activations, omegas):
            w_slice = slice(offset, offset + out * inp)
            offset += out * inp
            b_slice = slice(offset, offset + out)
            offset += out
            self._slices.append((w_slice, b_slice))
            self.layers.append(DenseLayer(
                weights=self.params[w_slice].reshape(out, inp),
                biases=self.params[b_slice],
                activation=activation,
                omega=float(omega),
            ))

    @classmethod
    def build(cls, sizes: Sequence[int], hidden: Union[Activation, str], rng: Rng,
              first_omega: float = DEFAULT_FIRST_OMEGA) -> 'Network':
        """
        Создаёт сеть со случайной инициализацией.

        Args:
            sizes: Ширины слоёв, начиная со входа: [in, h1, ..., out]
            hidden: Активация скрытых слоёв; выходной слой всегда линейный
            rng: Источник случайных чисел
            first_omega: Множитель первого синусного слоя

        Returns:
            Network
        """
        hidden = Activation(hidden)
        if len(sizes) < 2:
            raise ShapeMismatch('Нужны как минимум входной и выходной размеры')
        shapes = [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]
        activations = [hidden] * (len(shapes) - 1) + [Activation.IDENTITY]
        omegas = [1.0] * len(shapes)
        if hidden == Activation.SINE and len(shapes) > 1:
            omegas[0] = first_omega

        net = cls(shapes, activations, omegas)
        for i, layer in enumerate(net.layers):
            if layer.activation == Activation.SINE and i == 0:
                bound = 1.0 / layer.fan_in
            else:
                bound = 1.0 / np.sqrt(layer.fan_in)
            layer.weights[...] = (rng.uniform(layer.weights.shape) * 2.0 - 1.0) * bound
            layer.biases[...] = (rng.uniform(layer.biases.shape) * 2.0 - 1.0) * bound
        logger.debug('Создана сеть %s, параметров: %d', list(sizes), net.param_count)
        return net

    @property
    def input_width(self) -> int:
        return self.layers[0].fan_in

    @property
    def output_width(self) -> int:
        return self.layers[-1].fan_out

    def flatten(self) -> np.ndarray:
        return self.params.copy()

    def unflatten(self, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.param_count,):
            error_msg = f'Ожидался вектор длины {self.param_count}, получено {vector.shape}'
            logger.error(error_msg)
            raise ShapeMismatch(error_msg)
        self.params[...] = vector

    def copy(self) -> 'Network':
        shapes = [(layer.fan_out, layer.fan_in) for layer in self.layers]
        clone = Network(shapes, [l.activation for l in self.layers], [l.omega for l in self.layers])
        clone.params[...] = self.params
        return clone


def _activate(activation: Activation, omega: float, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Возвращает значение активации и её производную по z."""
    if activation == Activation.RELU:
        return np.maximum(z, 0.0), (z > 0).astype(np.float64)
    if activation == Activation.SINE:
        return np.sin(omega * z), omega * np.cos(omega * z)
    return z, np.ones_like(z)


def _forward_trace(net: Network, X: np.ndarray):
    activations = [X]
    derivatives = []
    a = X
    for layer in net.layers:
        z = a @ layer.weights.T + layer.biases
        a, da = _activate(layer.activation, layer.omega, z)
        activations.append(a)
        derivatives.append(da)
    return activations, derivatives


def _check_input(net: Network, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != net.input_width:
        error_msg = f'Ширина входа {X.shape[-1]} не совпадает с ожидаемой {net.input_width}'
        logger.error(error_msg)
        raise ShapeMismatch(error_msg)
    return X


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    """Вычисляет m(x, θ) для одного вектора или пакета строк."""
    X = _check_input(net, x)
    single = X.ndim == 1
    activations, _ = _forward_trace(net, np.atleast_2d(X))
    out = activations[-1]
    return out[0] if single else out


def softmax(z: np.ndarray) -> np.ndarray:
    """Softmax по последней оси с вычитанием максимума."""
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _loss_and_output_grad(out: np.ndarray, Y: np.ndarray, loss: LossKind):
    if loss == LossKind.MSE:
        Y = np.asarray(Y, dtype=np.float64).reshape(out.shape)
        residual = out - Y
        return np.sum(residual ** 2, axis=1), 2.0 * residual

    labels = np.asarray(Y).reshape(-1)
    classes = out.shape[1]
    if labels.shape[0] != out.shape[0]:
        raise ShapeMismatch('Число меток не совпадает с числом примеров')
    if np.any(labels < 0) or np.any(labels >= classes) or np.any(labels != np.floor(labels)):
        error_msg = f'Метка класса вне диапазона [0, {classes})'
        logger.error(error_msg)
        raise InvalidTarget(error_msg)
    labels = labels.astype(np.int64)
    shifted = out - np.max(out, axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=1))
    rows = np.arange(out.shape[0])
    losses = log_norm - shifted[rows, labels]
    grads = softmax(out)
    grads[rows, labels] -= 1.0
    return losses, grads


def sample_losses(net: Network, X: np.ndarray, Y: np.ndarray, loss: LossKind) -> np.ndarray:
    """Попримерные значения потерь без обратного прохода."""
    out = forward(net, np.atleast_2d(X))
    return _loss_and_output_grad(np.atleast_2d(out), Y, LossKind(loss))[0]


def _backward_chunk(net: Network, X: np.ndarray, Y: np.ndarray, loss: LossKind,
                    indices: np.ndarray) -> SampleBatch:
    activations, derivatives = _forward_trace(net, X)
    out = activations[-1]
    losses, output_grads = _loss_and_output_grad(out, Y, loss)

    n = X.shape[0]
    param_grads = np.empty((n, net.param_count), dtype=np.float64)
    delta = output_grads * derivatives[-1]
    for l in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[l]
        w_slice, b_slice = net._slices[l]
        a_prev = activations[l]
        param_grads[:, w_slice] = np.einsum('no,ni->noi', delta, a_prev).reshape(n, -1)
        param_grads[:, b_slice] = delta
        if l > 0:
            delta = (delta @ layer.weights) * derivatives[l - 1]

    return SampleBatch(indices=np.asarray(indices, dtype=np.int64), losses=losses,
                       param_grads=param_grads, output_grads=output_grads, outputs=out)


def worker_count() -> int:
    """Число потоков для попримерного обратного прохода (MISGRAD_THREADS)."""
    try:
        return max(1, int(os.environ.get('MISGRAD_THREADS', '1')))
    except ValueError:
        logger.warning('Некорректное значение MISGRAD_THREADS, используется 1 поток')
        return 1


def per_sample_backward_batch(net: Network, X: np.ndarray, Y: np.ndarray,
                              loss: Union[LossKind, str],
                              indices: Optional[np.ndarray] = None) -> SampleBatch:
    """
    Попримерный обратный проход для пакета.

    Результаты возвращаются в порядке строк X независимо от числа потоков.

    Args:
        net: Сеть (только чтение)
        X: Входы (n, d)
        Y: Цели: (n, C) для MSE или (n,) индексы классов
        loss: Вид функции потерь
        indices: Идентификаторы элементов данных для строк X

    Returns:
        SampleBatch с потерями, градиентами параметров и выходного слоя
    """
    loss = LossKind(loss)
    X = _check_input(net, np.atleast_2d(X))
    indices = np.arange(X.shape[0]) if indices is None else np.asarray(indices)
    Y = np.asarray(Y)

    workers = min(worker_count(), X.shape[0])
    if workers <= 1:
        return _backward_chunk(net, X, Y, loss, indices)

    bounds = np.array_split(np.arange(X.shape[0]), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(
            lambda rows: _backward_chunk(net, X[rows], Y[rows], loss, indices[rows]),
            [rows for rows in bounds if len(rows)]))
    return SampleBatch.concat(parts)


def per_sample_backward(net: Network, x: np.ndarray, y, loss: Union[LossKind, str],
                        index: int = -1) -> SampleGrad:
    """Обратный проход для одного элемента данных."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeMismatch('Ожидался один входной вектор')
    loss = LossKind(loss)
    Y = np.asarray([y]) if loss == LossKind.CROSS_ENTROPY else np.atleast_2d(y)
    batch = per_sample_backward_batch(net, x[None, :], Y, loss, np.array([index]))
    return batch.sample(0)


def weighted_backward(net: Network, X: np.ndarray, Y: np.ndarray, loss: Union[LossKind, str],
                      weights: np.ndarray, indices: Optional[np.ndarray] = None) -> WeightedBatch:
    """
    Взвешенные суммы градиентов пакета одним обратным проходом на столбец весов.

    Args:
        net: Сеть (только чтение)
        X: Входы (n, d)
        Y: Цели
        loss: Вид функции потерь
        weights: Веса строк (n,) или (n, K)
        indices: Идентификаторы элементов данных для строк X

    Returns:
        WeightedBatch с grads формы (K, P)
    """
    loss = LossKind(loss)
    X = _check_input(net, np.atleast_2d(X))
    n = X.shape[0]
    indices = np.arange(n) if indices is None else np.asarray(indices)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim == 1:
        weights = weights[:, None]
    if weights.ndim != 2 or weights.shape[0] != n:
        error_msg = f'Веса формы {weights.shape} не подходят пакету из {n} строк'
        logger.error(error_msg)
        raise ShapeMismatch(error_msg)

    activations, derivatives = _forward_trace(net, X)
    out = activations[-1]
    losses, output_grads = _loss_and_output_grad(out, np.asarray(Y), loss)
    delta_out = output_grads * derivatives[-1]
    head_grads = np.concatenate(
        [np.einsum('no,ni->noi', delta_out, activations[-2]).reshape(n, -1), delta_out], axis=1)

    grads = np.empty((weights.shape[1], net.param_count), dtype=np.float64)
    for k in range(weights.shape[1]):
        delta = delta_out * weights[:, k:k + 1]
        for l in range(len(net.layers) - 1, -1, -1):
            w_slice, b_slice = net._slices[l]
            grads[k, w_slice] = (delta.T @ activations[l]).ravel()
            grads[k, b_slice] = delta.sum(axis=0)
            if l > 0:
                delta = (delta @ net.layers[l].weights) * derivatives[l - 1]

    return WeightedBatch(indices=indices.astype(np.int64), losses=losses,
                         output_grads=output_grads, outputs=out, grads=grads,
                         head_grads=head_grads, head_start=net._slices[-1][0].start)


def full_gradient(net: Network, X: np.ndarray, Y: np.ndarray, loss: Union[LossKind, str]) -> np.ndarray:
    """Градиент средней по набору данных функции потерь."""
    n = np.atleast_2d(X).shape[0]
    return weighted_backward(net, X, Y, loss, np.full(n, 1.0 / n)).grads[0]


def _check_gradient(grad: np.ndarray, net: Network) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (net.param_count,):
        error_msg = f'Градиент длины {grad.shape} не совпадает с числом параметров {net.param_count}'
        logger.error(error_msg)
        raise ShapeMismatch(error_msg)
    if not np.all(np.isfinite(grad)):
        error_msg = 'Градиент содержит NaN или Inf'
        logger.error(error_msg)
        raise NonFiniteGradient(error_msg)
    return grad


def sgd_step(net: Network, grad: np.ndarray, lr: float) -> None:
    """θ ← θ − lr·grad."""
    if lr <= 0:
        raise ValueError(f'Скорость обучения должна быть положительной, получено {lr}')
    grad = _check_gradient(grad, net)
    net.params -= lr * grad


@dataclass
class AdamHyper:
    """Гиперпараметры Adam."""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class AdamState:
    """Моменты первого и второго порядка и счётчик шагов."""
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> 'AdamState':
        return cls(m=np.zeros(size), v=np.zeros(size), t=0)


def adam_step(net: Network, grad: np.ndarray, state: AdamState, hyper: AdamHyper) -> None:
    """Шаг Adam с коррекцией смещения моментов."""
    if hyper.lr <= 0:
        raise ValueError(f'Скорость обучения должна быть положительной, получено {hyper.lr}')
    grad = _check_gradient(grad, net)
    if hyper.weight_decay:
        grad = grad + hyper.weight_decay * net.params
    state.t += 1
    state.m = hyper.beta1 * state.m + (1.0 - hyper.beta1) * grad
    state.v = hyper.beta2 * state.v + (1.0 - hyper.beta2) * grad * grad
    m_hat = state.m / (1.0 - hyper.beta1 ** state.t)
    v_hat = state.v / (1.0 - hyper.beta2 ** state.t)
    net.params -= hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)


@dataclass
class Optimizer:
    """Общий интерфейс шага оптимизации: 'sgd' или 'adam'."""
    kind: str
    lr: float
    weight_decay: float = 0.0
    state: Optional[AdamState] = field(default=None, repr=False)

    def step(self, net: Network, grad: np.ndarray) -> None:
        if self.kind == 'sgd':
            if self.weight_decay:
                grad = grad + self.weight_decay * net.params
            sgd_step(net, grad, self.lr)
            return
        if self.state is None:
            self.state = AdamState.zeros(net.param_count)
        adam_step(net, grad, self.state, AdamHyper(lr=self.lr, weight_decay=self.weight_decay))


def positional_encoding(x: np.ndarray, freqs: int) -> np.ndarray:
    """
    Синусоидальное кодирование координат.

    Для входа размерности d возвращает [x, sin(2^0 π x), cos(2^0 π x), ...,
    sin(2^(L-1) π x), cos(2^(L-1) π x)] длины d·(1 + 2L). Работает и для пакета (n, d).
    """
    if freqs < 0:
        raise ValueError(f'Число частот должно быть неотрицательным, получено {freqs}')
    x = np.asarray(x, dtype=np.float64)
    parts = [x]
    for k in range(freqs):
        scale = (2.0 ** k) * np.pi
        parts.append(np.sin(scale * x))
        parts.append(np.cos(scale * x))
    return np.concatenate(parts, axis=-1)


def save_checkpoint(net: Network, path: Union[str, Path]) -> None:
    """Записывает заголовок 'MISGRAD1 <P>' и параметры в little-endian float64."""
    path = Path(path)
    with open(path, 'wb') as f:
        f.write(f'{CHECKPOINT_MAGIC} {net.param_count}\n'.encode('ascii'))
        f.write(net.params.astype('<f8').tobytes())
    logger.info('Контрольная точка сохранена: %s', path)


def load_checkpoint(net: Network, path: Union[str, Path]) -> None:
    """Загружает параметры в сеть той же архитектуры."""
    path = Path(path)
    if not path.exists():
        error_msg = f'Файл не найден: {path}'
        logger.error(error_msg)
        raise FileNotFoundError(error_msg)
    data = path.read_bytes()
    header, sep, payload = data.partition(b'\n')
    parts = header.decode('ascii', errors='replace').split()
    if not sep or len(parts) != 2 or parts[0] != CHECKPOINT_MAGIC or not parts[1].isdigit():
        error_msg = f'Неверный заголовок контрольной точки: {path}'
        logger.error(error_msg)
        raise ShapeMismatch(error_msg)
    count = int(parts[1])
    if count != net.param_count or len(payload) != count * 8:
        error_msg = f'Контрольная точка содержит {count} параметров, сеть ожидает {net.param_count}'
        logger.error(error_msg)
        raise ShapeMismatch(error_msg)
    net.unflatten(np.frombuffer(payload, dtype='<f8'))
