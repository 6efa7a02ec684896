"""
Функции важности элементов данных, вычисляемые по выходу сети.
"""
import logging.config
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Union

import numpy as np

from core.errors import IndexOutOfRange, InvalidTarget, ShapeMismatch
from core.logger import logger_config
from core.network import (Network, SampleBatch, SampleGrad, WeightedBatch,
                          per_sample_backward_batch, softmax)

logging.config.dictConfig(logger_config)
logger = logging.getLogger('misgrad_logger')


class MetricKind(Enum):
    """Поддерживаемые метрики важности."""
    OUTPUT_GRAD_NORM = 'output_grad_norm'
    PER_NODE_GRADS = 'per_node_grads'
    CROSS_ENTROPY_CLOSED_FORM = 'cross_entropy_closed_form'
    LOSS_VALUE = 'loss_value'


@dataclass
class ImportanceMetric:
    """
    Метрика важности и, для векторного режима, источник J компонент.

    Компоненты берутся либо из подмножества выходных узлов (``node_subset``),
    либо, когда распределений больше, чем выходных узлов, из норм групп
    градиента параметров выходного слоя (``param_groups``).
    """
    kind: MetricKind = MetricKind.OUTPUT_GRAD_NORM
    node_subset: Optional[Sequence[int]] = None
    param_groups: Optional[List[np.ndarray]] = None

    def scalar_values(self, batch: Union[SampleBatch, WeightedBatch],
                      targets: Optional[np.ndarray] = None) -> np.ndarray:
        """Скалярная важность для каждой строки пакета."""
        if self.kind == MetricKind.LOSS_VALUE:
            return np.maximum(batch.losses, 0.0)
        if self.kind == MetricKind.CROSS_ENTROPY_CLOSED_FORM:
            if batch.outputs is None or targets is None:
                raise ValueError('Для закрытой формы перекрёстной энтропии нужны логиты и метки')
            return cross_entropy_importances(batch.outputs, targets)
        return np.linalg.norm(batch.output_grads, axis=1)

    def vector_values(self, batch: Union[SampleBatch, WeightedBatch]) -> np.ndarray:
        """Матрица (n, J) векторной важности для строк пакета."""
        if self.param_groups is not None:
            return np.stack([np.linalg.norm(batch.param_columns(group), axis=1)
                             for group in self.param_groups], axis=1)
        width = batch.output_grads.shape[1]
        subset = list(range(width)) if self.node_subset is None else list(self.node_subset)
        _check_subset(subset, width)
        return batch.output_grads[:, subset]


def _check_subset(subset: Sequence[int], width: int) -> None:
    for node in subset:
        if not 0 <= node < width:
            error_msg = f'Номер выходного узла {node} вне диапазона [0, {width})'
            logger.error(error_msg)
            raise IndexOutOfRange(error_msg)


def output_grad_norm(sg: SampleGrad) -> float:
    """L2-норма ∂L/∂m(x, θ)."""
    return float(np.linalg.norm(sg.output_grad))


def per_node_importances(sg: SampleGrad, subset: Sequence[int]) -> np.ndarray:
    """Компоненты ∂L/∂m_j со знаком для узлов из ``subset``."""
    _check_subset(subset, len(sg.output_grad))
    return np.asarray(sg.output_grad)[list(subset)].copy()


def cross_entropy_importances(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Пакетная версия ``cross_entropy_importance``."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    targets = np.asarray(targets).reshape(-1)
    classes = logits.shape[1]
    if np.any(targets < 0) or np.any(targets >= classes):
        error_msg = f'Метка класса вне диапазона [0, {classes})'
        logger.error(error_msg)
        raise InvalidTarget(error_msg)
    diff = softmax(logits)
    diff[np.arange(logits.shape[0]), targets.astype(np.int64)] -= 1.0
    return np.linalg.norm(diff, axis=1)


def cross_entropy_importance(z: np.ndarray, y: int) -> float:
    """
    Важность для перекрёстной энтропии в закрытой форме: ‖softmax(z) − onehot(y)‖.

    Raises:
        InvalidTarget: Если y вне [0, C)
    """
    return float(cross_entropy_importances(np.asarray(z)[None, :], np.array([y]))[0])


def loss_importance(sg: SampleGrad) -> float:
    """Значение потерь, ограниченное снизу нулём."""
    return max(float(sg.loss), 0.0)


def select_node_subset(mean_abs_grads: np.ndarray, count: int) -> list:
    """
    Выбирает ``count`` выходных узлов с наибольшим средним |∂L/∂m_j|.

    Returns:
        Номера узлов в порядке возрастания
    """
    mean_abs_grads = np.asarray(mean_abs_grads, dtype=np.float64)
    if not 1 <= count <= len(mean_abs_grads):
        raise IndexOutOfRange(f'Нельзя выбрать {count} узлов из {len(mean_abs_grads)}')
    order = np.argsort(-mean_abs_grads, kind='stable')[:count]
    return sorted(int(i) for i in order)


def output_layer_groups(net: Network, count: int) -> List[np.ndarray]:
    """
    Делит параметры выходного слоя (веса, затем смещения) на ``count``
    непрерывных групп почти равного размера.

    Returns:
        Список массивов индексов в плоском векторе параметров
    """
    w_slice, b_slice = net._slices[-1]
    params = np.concatenate([np.arange(w_slice.start, w_slice.stop),
                             np.arange(b_slice.start, b_slice.stop)])
    if not 1 <= count <= len(params):
        error_msg = f'Нельзя разбить {len(params)} параметров выходного слоя на {count} групп'
        logger.error(error_msg)
        raise IndexOutOfRange(error_msg)
    return [group for group in np.array_split(params, count)]


def importance_fidelity(net: Network, inputs: np.ndarray, targets: np.ndarray, loss,
                        probs: np.ndarray) -> float:
    """
    L2-расстояние между распределением выборки и эталонным распределением,
    пропорциональным норме полного градиента параметров каждого элемента.

    Args:
        net: Сеть
        inputs: Все входы набора данных
        targets: Все цели
        loss: Вид функции потерь
        probs: Вероятности выборки (N)
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (len(inputs),):
        raise ShapeMismatch(f'Ожидалось {len(inputs)} вероятностей, получено {probs.shape}')
    batch = per_sample_backward_batch(net, inputs, targets, loss)
    norms = np.linalg.norm(batch.param_grads, axis=1)
    total = norms.sum()
    reference = norms / total if total > 0 else np.full(len(norms), 1.0 / len(norms))
    return float(np.linalg.norm(probs - reference))
