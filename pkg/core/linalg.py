"""
Плотная линейная алгебра и детерминированный генератор случайных чисел.

Векторы и матрицы хранятся как ``numpy.ndarray`` с типом float64.
"""
import logging.config
from typing import Optional

import numpy as np
from scipy import linalg

from core.errors import NonFiniteInput, ShapeMismatch, SingularSystem
from core.logger import logger_config

logging.config.dictConfig(logger_config)
logger = logging.getLogger('misgrad_logger')

SYMMETRY_TOLERANCE = 1e-9
RIDGE_ESCALATION = 10.0
RIDGE_BOOTSTRAP = 1e-10


class Rng:
    """Детерминированный источник равномерных чисел в [0, 1)."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._generator = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, size: Optional[int] = None):
        """Возвращает одно число или массив из ``size`` чисел."""
        return self._generator.random(size)

    def normal(self, size=None, scale: float = 1.0):
        return self._generator.normal(0.0, scale, size)

    def integers(self, high: int, size=None):
        return self._generator.integers(0, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def spawn(self, offset: int) -> 'Rng':
        """Независимый поток для вспомогательных задач (инициализация весов и т.п.)."""
        return Rng(self.seed * 1_000_003 + offset)


def rng_uniform(r: Rng) -> float:
    """Одно равномерное число из ``r``; состояние продвигается."""
    return float(r.uniform())


def _check_finite(name: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        error_msg = f'Аргумент {name} содержит NaN или Inf'
        logger.error(error_msg)
        raise NonFiniteInput(error_msg)


def _factor(matrix: np.ndarray, ridge: float):
    regularized = matrix + ridge * np.eye(matrix.shape[0])
    return linalg.cho_factor(regularized, lower=True, check_finite=False)


def solve_regularized(A: np.ndarray, b: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """
    Решает (A + ridge·I) x = b разложением Холецкого.

    ``b`` может быть вектором длины J или матрицей J×P: во втором случае
    все P правых частей решаются с одним общим разложением.

    Args:
        A: Симметричная матрица J×J
        b: Правая часть (J) или (J, P)
        ridge: Неотрицательная регуляризация

    Returns:
        Решение той же формы, что и ``b``

    Raises:
        NonFiniteInput: Если во входе есть NaN/Inf
        ShapeMismatch: Если A не квадратная, не симметричная или не согласована с b
        SingularSystem: Если система вырождена даже после повышения регуляризации
    """
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_finite('A', A)
    _check_finite('b', b)

    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        error_msg = f'Матрица должна быть квадратной, получено {A.shape}'
        logger.error(error_msg)
        raise ShapeMismatch(error_msg)
    if b.shape[0] != A.shape[0]:
        error_msg = f'Правая часть {b.shape} не согласована с матрицей {A.shape}'
        logger.error(error_msg)
        raise ShapeMismatch(error_msg)
    if not np.allclose(A, A.T, rtol=0.0, atol=SYMMETRY_TOLERANCE):
        error_msg = 'Матрица системы не симметрична'
        logger.error(error_msg)
        raise ShapeMismatch(error_msg)
    if ridge < 0 or not np.isfinite(ridge):
        error_msg = f'Регуляризация должна быть неотрицательной, получено {ridge}'
        logger.error(error_msg)
        raise NonFiniteInput(error_msg)

    size = A.shape[0]
    try:
        factor = _factor(A, ridge)
    except linalg.LinAlgError:
        if ridge > 0:
            escalated = ridge * RIDGE_ESCALATION
        else:
            scale = np.trace(A) / size
            escalated = RIDGE_BOOTSTRAP * max(scale, 0.0)
        logger.warning('Разложение Холецкого не удалось при ridge=%g, повтор с ridge=%g',
                       ridge, escalated)
        try:
            factor = _factor(A, escalated)
        except linalg.LinAlgError as e:
            error_msg = f'Система вырождена даже при ridge={escalated:g}'
            logger.error(error_msg)
            raise SingularSystem(error_msg) from e

    x = linalg.cho_solve(factor, b, check_finite=False)
    if not np.all(np.isfinite(x)):
        error_msg = 'Решение системы содержит NaN или Inf'
        logger.error(error_msg)
        raise SingularSystem(error_msg)
    return x
