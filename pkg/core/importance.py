"""
Постоянная таблица важности элементов данных и дискретные распределения.
"""
import logging.config
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from core.errors import AllZeroImportance, IndexOutOfRange, NonFiniteImportance
from core.linalg import Rng
from core.logger import logger_config

logging.config.dictConfig(logger_config)
logger = logging.getLogger('misgrad_logger')

RECOMMENDED_MOMENTA = (0.0, 0.1, 0.2, 0.3)
DEFAULT_EPSILON_FRACTION = 0.01


@dataclass
class DiscretePdf:
    """Нормированное категориальное распределение с кумулятивной таблицей."""
    probs: np.ndarray
    cumulative: np.ndarray

    @classmethod
    def from_weights(cls, weights: np.ndarray) -> 'DiscretePdf':
        """Строит распределение из неотрицательных весов."""
        weights = np.asarray(weights, dtype=np.float64)
        total = weights.sum()
        if not np.isfinite(total):
            error_msg = 'Веса распределения содержат NaN или Inf'
            logger.error(error_msg)
            raise NonFiniteImportance(error_msg)
        if total <= 0:
            error_msg = 'Все значения важности равны нулю'
            logger.error(error_msg)
            raise AllZeroImportance(error_msg)
        probs = weights / total
        cumulative = np.cumsum(probs)
        cumulative[-1] = 1.0
        return cls(probs=probs, cumulative=cumulative)

    @classmethod
    def uniform(cls, size: int) -> 'DiscretePdf':
        return cls.from_weights(np.ones(size))

    def __len__(self) -> int:
        return len(self.probs)

    def prob(self, idx) -> Union[float, np.ndarray]:
        return self.probs[idx]


class ImportanceTable:
    """
    Ненормированная важность каждого элемента данных.

    В скалярном режиме хранится N неотрицательных чисел, в векторном режиме
    N×J чисел со знаком; при нормализации берётся модуль.
    """

    def __init__(self, size: int, momentum: float = 0.0, techniques: Optional[int] = None,
                 epsilon: Optional[float] = None,
                 epsilon_fraction: float = DEFAULT_EPSILON_FRACTION,
                 frozen: bool = False):
        if size < 1:
            raise IndexOutOfRange(f'Размер таблицы должен быть положительным, получено {size}')
        if not 0.0 <= momentum < 1.0:
            error_msg = f'Момент важности должен лежать в [0, 1), получено {momentum}'
            logger.error(error_msg)
            raise ValueError(error_msg)
        if momentum not in RECOMMENDED_MOMENTA:
            logger.warning('Момент важности %g вне рекомендуемого набора %s',
                           momentum, RECOMMENDED_MOMENTA)
        if epsilon is not None and epsilon < 0:
            raise ValueError(f'epsilon должен быть неотрицательным, получено {epsilon}')

        self.size = size
        self.techniques = techniques
        self.momentum = float(momentum)
        self.epsilon = epsilon
        self.epsilon_fraction = epsilon_fraction
        self.frozen = frozen
        self.last_epsilon = 0.0
        shape = (size,) if techniques is None else (size, techniques)
        self.values = np.zeros(shape, dtype=np.float64)
        self.initialized = np.zeros(size, dtype=bool)

    @property
    def vector_mode(self) -> bool:
        return self.techniques is not None

    @classmethod
    def constant(cls, size: int, value: float = 1.0, techniques: Optional[int] = None,
                 **kwargs) -> 'ImportanceTable':
        """Таблица с одинаковой важностью всех элементов."""
        table = cls(size, techniques=techniques, **kwargs)
        table.values[...] = value
        table.initialized[:] = True
        return table

    def _check(self, idx: int, value) -> np.ndarray:
        if not 0 <= idx < self.size:
            error_msg = f'Индекс {idx} вне диапазона [0, {self.size})'
            logger.error(error_msg)
            raise IndexOutOfRange(error_msg)
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            error_msg = f'Важность элемента {idx} содержит NaN или Inf'
            logger.error(error_msg)
            raise NonFiniteImportance(error_msg)
        if self.vector_mode and value.shape != (self.techniques,):
            raise IndexOutOfRange(f'Ожидался вектор длины {self.techniques}, получено {value.shape}')
        if not self.vector_mode and value.ndim != 0:
            raise IndexOutOfRange('В скалярном режиме ожидается одно число')
        if not self.vector_mode and value < 0:
            error_msg = f'Скалярная важность не может быть отрицательной: {float(value)}'
            logger.error(error_msg)
            raise NonFiniteImportance(error_msg)
        return value

    def set_initial(self, idx: int, value) -> None:
        """Записывает значение без смешивания (первая эпоха)."""
        value = self._check(idx, value)
        self.values[idx] = value
        self.initialized[idx] = True

    def update_batch(self, indices: Sequence[int], values: np.ndarray) -> None:
        """
        Обновляет элементы пакета так же, как ``update_importance`` в порядке выборки.

        Повторы одного элемента смешиваются повторно: k-е вхождение обрабатывается
        в k-м проходе.
        """
        indices = np.asarray(indices, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if len(indices) == 0:
            return
        bad = np.flatnonzero((indices < 0) | (indices >= self.size))
        if len(bad):
            self._check(int(indices[bad[0]]), values[bad[0]])
        expected = (len(indices), self.techniques) if self.vector_mode else (len(indices),)
        if values.shape != expected:
            raise IndexOutOfRange(f'Ожидались значения формы {expected}, получено {values.shape}')
        invalid = ~np.isfinite(values.reshape(len(indices), -1)).all(axis=1)
        if not self.vector_mode:
            invalid |= values < 0
        if invalid.any():
            first = int(np.argmax(invalid))
            self._check(int(indices[first]), values[first])
        if self.frozen:
            return

        order = np.argsort(indices, kind='stable')
        sorted_ids = indices[order]
        starts = np.r_[0, np.flatnonzero(np.diff(sorted_ids)) + 1]
        lengths = np.diff(np.r_[starts, len(indices)])
        occurrence = np.empty(len(indices), dtype=np.int64)
        occurrence[order] = np.arange(len(indices)) - np.repeat(starts, lengths)
        for k in range(int(occurrence.max()) + 1):
            rows = occurrence == k
            ids = indices[rows]
            self.values[ids] = self.momentum * self.values[ids] + (1.0 - self.momentum) * values[rows]
            self.initialized[ids] = True

    def column(self, technique: Optional[int] = None) -> np.ndarray:
        if technique is None or not self.vector_mode:
            values = self.values if not self.vector_mode else np.linalg.norm(self.values, axis=1)
        else:
            values = self.values[:, technique]
        return np.abs(values)

    def dump(self, path: Union[str, Path]) -> None:
        """Пишет по строке на элемент: idx,importance[,q_1..q_J]."""
        path = Path(path)
        with open(path, 'w', encoding='utf-8') as f:
            for idx in range(self.size):
                if self.vector_mode:
                    row = self.values[idx]
                    extra = ','.join(repr(float(v)) for v in row)
                    f.write(f'{idx},{float(np.linalg.norm(row))!r},{extra}\n')
                else:
                    f.write(f'{idx},{float(self.values[idx])!r}\n')
        logger.info('Таблица важности записана: %s', path)


def update_importance(t: ImportanceTable, idx: int, new_value) -> None:
    """stored ← m·stored + (1−m)·new_value по каждой компоненте."""
    value = t._check(idx, new_value)
    if t.frozen:
        return
    t.values[idx] = t.momentum * t.values[idx] + (1.0 - t.momentum) * value
    t.initialized[idx] = True


def end_epoch_accumulate(t: ImportanceTable) -> float:
    """
    Увеличивает модуль каждого значения на epsilon в конце эпохи.

    Если epsilon не задан явно, берётся доля от среднего модуля важности.

    Returns:
        Использованное значение epsilon
    """
    magnitudes = np.abs(t.values)
    if t.epsilon is not None:
        eps = t.epsilon
    else:
        mean = float(magnitudes.mean())
        eps = t.epsilon_fraction * mean if mean > 0 else t.epsilon_fraction
    if eps > 0:
        signs = np.where(t.values < 0, -1.0, 1.0)
        t.values = signs * (magnitudes + eps)
    t.last_epsilon = eps
    logger.debug('Накопление важности в конце эпохи: epsilon=%g', eps)
    return eps


def normalize(t: ImportanceTable, technique: Optional[int] = None) -> DiscretePdf:
    """
    Нормирует важность в распределение: p_i = |v_i| / Σ|v_k|.

    Args:
        t: Таблица важности
        technique: Номер столбца в векторном режиме; None для скалярного режима
            (для векторной таблицы берётся норма строки)

    Raises:
        AllZeroImportance: Если все значения равны нулю
    """
    if technique is not None and t.vector_mode and not 0 <= technique < t.techniques:
        raise IndexOutOfRange(f'Номер распределения {technique} вне диапазона [0, {t.techniques})')
    return DiscretePdf.from_weights(t.column(technique))


def sample_with_replacement(p: DiscretePdf, count: int, rng: Rng) -> np.ndarray:
    """Выбирает ``count`` индексов с возвращением обратной функцией распределения."""
    if count < 1:
        raise ValueError(f'Число выборок должно быть положительным, получено {count}')
    u = rng.uniform(count)
    ids = np.searchsorted(p.cumulative, u, side='right')
    return np.minimum(ids, len(p.probs) - 1).astype(np.int64)
