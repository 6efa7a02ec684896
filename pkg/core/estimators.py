"""
Несмещённые оценки градиента по попримерным градиентам.

Подынтегральная функция элемента данных x равна ∇L(x)/N, поэтому каждая оценка
приближает градиент средней по набору данных функции потерь.
"""
import logging.config
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from core.errors import AllTechniquesZero, ShapeMismatch, SingularSystem, ZeroProbabilitySample
from core.importance import DiscretePdf
from core.linalg import solve_regularized
from core.logger import logger_config
from core.network import SampleBatch

logging.config.dictConfig(logger_config)
logger = logging.getLogger('misgrad_logger')

DEFAULT_BETA = 0.7
DEFAULT_RIDGE_SCALE = 1e-8


class Estimator(Enum):
    """Поддерживаемые способы оценки градиента."""
    UNIFORM = 'uniform'
    IS = 'is'
    AS = 'as'
    BALANCE_MIS = 'balance_mis'
    OMIS = 'omis'
    EXACT = 'exact'


@dataclass
class GradEstimate:
    """Оценка градиента и диагностика пакета."""
    grad: np.ndarray
    kind: Estimator
    diagnostics: Dict[str, float] = field(default_factory=dict)


def _probs_of(pdf: DiscretePdf, indices: np.ndarray) -> np.ndarray:
    probs = pdf.probs[indices]
    if np.any(probs <= 0):
        bad = int(indices[np.argmax(probs <= 0)])
        error_msg = f'Элемент {bad} выбран, но имеет нулевую вероятность'
        logger.error(error_msg)
        raise ZeroProbabilitySample(error_msg)
    return probs


def importance_weights(p: DiscretePdf, indices: np.ndarray) -> np.ndarray:
    """
    Веса выборки по значимости 1/(N·p(x_i)).

    Raises:
        ZeroProbabilitySample: Если у выбранного элемента p = 0
    """
    return 1.0 / (len(p) * _probs_of(p, np.asarray(indices)))


def weight_range(weights: np.ndarray) -> Dict[str, float]:
    return {'min_weight': float(np.min(weights)), 'max_weight': float(np.max(weights))}


def is_estimate(samples: SampleBatch, p: DiscretePdf, B: Optional[int] = None) -> GradEstimate:
    """
    Оценка по значимости: (1/B) Σ ∇L(x_i) / (N·p(x_i)).

    Raises:
        ZeroProbabilitySample: Если у выбранного элемента p = 0
    """
    B = len(samples) if B is None else B
    if len(samples) != B:
        raise ShapeMismatch(f'Ожидалось {B} примеров, получено {len(samples)}')
    weights = importance_weights(p, samples.indices)
    grad = (weights[:, None] * samples.param_grads).sum(axis=0) / B
    return GradEstimate(grad=grad, kind=Estimator.IS, diagnostics=weight_range(weights))


def as_estimate(samples: SampleBatch, B: Optional[int] = None) -> GradEstimate:
    """Эвристика без деления на p: (1/B) Σ ∇L(x_i). Оценка смещена."""
    B = len(samples) if B is None else B
    if len(samples) != B:
        raise ShapeMismatch(f'Ожидалось {B} примеров, получено {len(samples)}')
    grad = samples.param_grads.sum(axis=0) / B
    return GradEstimate(grad=grad, kind=Estimator.AS, diagnostics={
        'biased': 1.0, 'min_weight': 1.0, 'max_weight': 1.0,
    })


def mixture_density(pdfs: Sequence[DiscretePdf], n: Sequence[int], indices: np.ndarray):
    """Возвращает (P, S): P[i, k] = p_k(x_i), S(x_i) = Σ_k n_k·p_k(x_i)."""
    matrix = np.stack([pdf.probs[indices] for pdf in pdfs], axis=1)
    counts = np.asarray(n, dtype=np.float64)
    return matrix, matrix @ counts


def balance_weights(x: int, pdfs: Sequence[DiscretePdf], n: Sequence[int]) -> np.ndarray:
    """
    Веса эвристики баланса: w_j = n_j·p_j(x) / Σ_k n_k·p_k(x).

    Raises:
        AllTechniquesZero: Если ни одно распределение не может выбрать x
    """
    matrix, total = mixture_density(pdfs, n, np.array([x]))
    if total[0] <= 0:
        error_msg = f'Ни одно распределение не выбирает элемент {x}'
        logger.error(error_msg)
        raise AllTechniquesZero(error_msg)
    return np.asarray(n, dtype=np.float64) * matrix[0] / total[0]


def _check_stratified(samples: Sequence[SampleBatch], pdfs: Sequence[DiscretePdf],
                      n: Sequence[int]) -> None:
    if not len(samples) == len(pdfs) == len(n):
        raise ShapeMismatch('Число пакетов, распределений и счётчиков должно совпадать')
    for j, (batch, count) in enumerate(zip(samples, n)):
        if len(batch) != count:
            error_msg = f'Распределение {j}: ожидалось {count} примеров, получено {len(batch)}'
            logger.error(error_msg)
            raise ShapeMismatch(error_msg)


def mis_design(indices: Sequence[np.ndarray], pdfs: Sequence[DiscretePdf],
               n: Sequence[int]):
    """
    Веса баланса и плотность смеси для стратифицированной выборки.

    Args:
        indices: По массиву индексов на распределение (длины n_j)
        pdfs: Распределения
        n: Число примеров из каждого распределения

    Returns:
        (W, S): W[i, k] = n_k·p_k(x_i)/S(x_i) для всех примеров подряд, S(x_i)

    Raises:
        ZeroProbabilitySample: Если пример имеет нулевую вероятность в своём распределении
    """
    if not len(indices) == len(pdfs) == len(n):
        raise ShapeMismatch('Число пакетов, распределений и счётчиков должно совпадать')
    for j, (idx, count) in enumerate(zip(indices, n)):
        if len(idx) != count:
            error_msg = f'Распределение {j}: ожидалось {count} примеров, получено {len(idx)}'
            logger.error(error_msg)
            raise ShapeMismatch(error_msg)
        _probs_of(pdfs[j], np.asarray(idx))
    counts = np.asarray(n, dtype=np.float64)
    matrix, total = mixture_density(pdfs, counts, np.concatenate(indices))
    return counts * matrix / total[:, None], total


def mis_contributions(samples: Sequence[SampleBatch], pdfs: Sequence[DiscretePdf],
                      n: Sequence[int],
                      weight_fn: Optional[Callable[[int], np.ndarray]] = None) -> List[np.ndarray]:
    """
    Попримерные вклады w_j(x)·∇L(x) / (N·n_j·p_j(x)) в MIS-оценку.

    Args:
        samples: По пакету на каждое распределение
        pdfs: Распределения
        n: Число примеров из каждого распределения
        weight_fn: Весовая функция x -> (J,); по умолчанию эвристика баланса

    Returns:
        Список массивов (n_j, P): вклад каждого примера
    """
    _check_stratified(samples, pdfs, n)
    weight_fn = weight_fn or (lambda x: balance_weights(x, pdfs, n))
    size = len(pdfs[0])
    result = []
    for j, batch in enumerate(samples):
        probs = _probs_of(pdfs[j], batch.indices)
        rows = np.empty_like(batch.param_grads)
        for i, idx in enumerate(batch.indices):
            w = weight_fn(int(idx))[j]
            rows[i] = w * batch.param_grads[i] / (size * n[j] * probs[i])
        result.append(rows)
    return result


def balance_mis_estimate(samples: Sequence[SampleBatch], pdfs: Sequence[DiscretePdf],
                         n: Sequence[int]) -> GradEstimate:
    """
    MIS-оценка с весами баланса: каждый пример вносит ∇L(x) / (N·Σ_k n_k p_k(x)).

    Raises:
        ZeroProbabilitySample: Если пример имеет нулевую вероятность в своём распределении
    """
    _check_stratified(samples, pdfs, n)
    W, total = mis_design([batch.indices for batch in samples], pdfs, n)
    grads = np.concatenate([batch.param_grads for batch in samples])
    grad = (grads / (len(pdfs[0]) * total)[:, None]).sum(axis=0)
    return balance_mis_result(W, grad)


def balance_mis_result(W: np.ndarray, grad: np.ndarray) -> GradEstimate:
    """MIS-оценка с весами баланса и диагностикой весов W."""
    diagnostics = weight_range(W)
    diagnostics['J'] = float(W.shape[1])
    return GradEstimate(grad=grad, kind=Estimator.BALANCE_MIS, diagnostics=diagnostics)


class MisSystem:
    """
    Накопленная с моментом линейная система ⟨A⟩α = ⟨b⟩ оптимальных MIS-весов.

    ⟨A⟩ имеет размер J×J, у ⟨b⟩ размер J×P (по столбцу на параметр).
    """

    def __init__(self, techniques: int, param_count: int, n: Sequence[int],
                 beta: float = DEFAULT_BETA, ridge_scale: float = DEFAULT_RIDGE_SCALE,
                 bias_correction: bool = True):
        if not 0.0 <= beta < 1.0:
            error_msg = f'Момент системы beta должен лежать в [0, 1), получено {beta}'
            logger.error(error_msg)
            raise ValueError(error_msg)
        n = np.asarray(n, dtype=np.int64)
        if n.shape != (techniques,) or np.any(n < 1):
            error_msg = f'Нужно {techniques} положительных счётчиков выборок, получено {n.tolist()}'
            logger.error(error_msg)
            raise ValueError(error_msg)
        self.techniques = techniques
        self.param_count = param_count
        self.n = n
        self.beta = float(beta)
        self.ridge_scale = float(ridge_scale)
        self.bias_correction = bias_correction
        self.A_hat = np.zeros((techniques, techniques))
        self.b_hat = np.zeros((techniques, param_count))
        self.steps = 0
        self.last_weights = (1.0, 1.0)

    def accumulate_integrand(self, indices: Sequence[np.ndarray], values: Sequence[np.ndarray],
                             pdfs: Sequence[DiscretePdf]) -> None:
        """
        Затухание и добавление вкладов пакета для произвольной подынтегральной функции.

        Args:
            indices: По массиву индексов на распределение (длины n_j)
            values: Значения f(x_i), массивы (n_j, P)
            pdfs: Распределения
        """
        if len(indices) != self.techniques or len(pdfs) != self.techniques:
            raise ShapeMismatch(f'Ожидалось {self.techniques} распределений')
        W, total = mis_design(indices, pdfs, self.n)
        f = np.concatenate([np.asarray(v, dtype=np.float64).reshape(len(i), -1)
                            for i, v in zip(indices, values)])
        self.accumulate_moments(W, (W / total[:, None]).T @ f)

    def accumulate_moments(self, W: np.ndarray, rhs: np.ndarray) -> None:
        """
        ⟨A⟩ ← β⟨A⟩ + (1−β)·WᵀW, ⟨b⟩ ← β⟨b⟩ + (1−β)·rhs.

        Args:
            W: Веса баланса примеров пакета (m, J)
            rhs: Σ_i W_i·f(x_i)/S(x_i), матрица (J, P)
        """
        rhs = np.asarray(rhs, dtype=np.float64).reshape(self.techniques, -1)
        if W.shape[1] != self.techniques or rhs.shape[1] != self.b_hat.shape[1]:
            error_msg = f'Вклад пакета {W.shape}, {rhs.shape} не подходит системе J={self.techniques}'
            logger.error(error_msg)
            raise ShapeMismatch(error_msg)
        scale = 1.0 - self.beta
        self.A_hat = self.beta * self.A_hat + scale * (W.T @ W)
        self.A_hat = 0.5 * (self.A_hat + self.A_hat.T)
        self.b_hat = self.beta * self.b_hat + scale * rhs
        self.steps += 1
        self.last_weights = (float(W.min()), float(W.max()))

    def corrected(self):
        """⟨A⟩ и ⟨b⟩ с коррекцией смещения экспоненциального среднего."""
        if self.bias_correction and self.beta > 0:
            c = 1.0 - self.beta ** self.steps
            return self.A_hat / c, self.b_hat / c
        return self.A_hat, self.b_hat


def omis_accumulate(sys: MisSystem, samples: Sequence[SampleBatch], pdfs: Sequence[DiscretePdf],
                    n: Sequence[int]) -> None:
    """Обновляет ⟨A⟩ и ⟨b⟩ по стратифицированным примерам с подынтегральной функцией ∇L/N."""
    _check_stratified(samples, pdfs, n)
    if not np.array_equal(np.asarray(n), sys.n):
        raise ShapeMismatch(f'Счётчики выборок {list(n)} не совпадают с системой {sys.n.tolist()}')
    size = len(pdfs[0])
    sys.accumulate_integrand([b.indices for b in samples],
                             [b.param_grads / size for b in samples], pdfs)


def omis_solve(sys: MisSystem, ridge: Optional[float] = None):
    """Решает накопленную систему; возвращает (α, использованный ridge)."""
    if sys.steps == 0:
        error_msg = 'Система OMIS ещё не накоплена'
        logger.error(error_msg)
        raise SingularSystem(error_msg)
    A, b = sys.corrected()
    if ridge is None:
        ridge = sys.ridge_scale * float(np.trace(A)) / sys.techniques
    alpha_scaled = solve_regularized(A, b, ridge)
    return sys.n[:, None] * alpha_scaled, ridge


def omis_estimate(sys: MisSystem, ridge: Optional[float] = None) -> GradEstimate:
    """
    Оценка OMIS: решение ⟨A⟩α = ⟨b⟩ с общим разложением для всех параметров и сумма α_j.

    Raises:
        SingularSystem: Если система не накоплена или вырождена
    """
    alpha, ridge = omis_solve(sys, ridge)
    return GradEstimate(grad=alpha.sum(axis=0), kind=Estimator.OMIS,
                        diagnostics=_omis_diagnostics(sys, ridge))


def _omis_diagnostics(sys: MisSystem, ridge: float) -> Dict[str, float]:
    A, _ = sys.corrected()
    eigen = np.linalg.eigvalsh(A)
    return {
        'min_weight': sys.last_weights[0],
        'max_weight': sys.last_weights[1],
        'ridge': float(ridge),
        'beta': sys.beta,
        'J': float(sys.techniques),
        'cond': float(eigen[-1] / eigen[0]) if eigen[0] > 0 else float('inf'),
    }


def omis_step(sys: MisSystem, W: np.ndarray, rhs: np.ndarray) -> GradEstimate:
    """
    Оценка OMIS с поправкой остатка по текущему пакету.

    α берётся из системы, накопленной на предыдущих шагах (α = 0 для пустой
    системы), после чего пакет добавляется в систему. Оценка равна
    Σ_k α_k + Σ_i (f(x_i) − Σ_k α_k p_k(x_i)) / S(x_i), то есть MIS-оценке
    с оптимальными весами при данном α. Она несмещена при текущих параметрах
    для любого α, не зависящего от пакета.

    Args:
        sys: Накопленная система
        W: Веса баланса пакета (m, J)
        rhs: Σ_i W_i·f(x_i)/S(x_i), матрица (J, P)
    """
    rhs = np.asarray(rhs, dtype=np.float64).reshape(sys.techniques, -1)
    if sys.steps:
        alpha, ridge = omis_solve(sys)
    else:
        alpha, ridge = np.zeros_like(rhs), 0.0
    # Σ_i p_k(x_i)/S(x_i) = Σ_i W_ik / n_k, математическое ожидание 1
    coverage = W.sum(axis=0) / sys.n
    fitted = alpha.sum(axis=0)
    grad = fitted - (coverage[:, None] * alpha).sum(axis=0) + rhs.sum(axis=0)
    sys.accumulate_moments(W, rhs)
    diagnostics = _omis_diagnostics(sys, ridge)
    diagnostics['fit_share'] = float(np.linalg.norm(fitted) / max(np.linalg.norm(grad), 1e-300))
    return GradEstimate(grad=grad, kind=Estimator.OMIS, diagnostics=diagnostics)


def omis_corrected_estimate(sys: MisSystem, samples: Sequence[SampleBatch],
                            pdfs: Sequence[DiscretePdf], n: Sequence[int]) -> GradEstimate:
    """``omis_step`` по попримерным градиентам стратифицированной выборки."""
    _check_stratified(samples, pdfs, n)
    if not np.array_equal(np.asarray(n), sys.n):
        raise ShapeMismatch(f'Счётчики выборок {list(n)} не совпадают с системой {sys.n.tolist()}')
    W, total = mis_design([b.indices for b in samples], pdfs, n)
    f = np.concatenate([b.param_grads for b in samples]) / len(pdfs[0])
    return omis_step(sys, W, (W / total[:, None]).T @ f)


def omis_enumerate(f: np.ndarray, pdfs: Sequence[DiscretePdf], n: Sequence[int],
                   ridge: float = 0.0) -> np.ndarray:
    """
    Точная система по полному перебору области:
    a_jk = Σ_x p_j p_k / S(x), b_j = Σ_x p_j f(x) / S(x).

    Returns:
        α (J,) или (J, P) для векторной f
    """
    f = np.asarray(f, dtype=np.float64)
    indices = np.arange(len(pdfs[0]))
    matrix, total = mixture_density(pdfs, n, indices)
    mask = total > 0
    matrix, total, f = matrix[mask], total[mask], f[mask]
    A = (matrix / total[:, None]).T @ matrix
    b = (matrix / total[:, None]).T @ f
    return solve_regularized(0.5 * (A + A.T), b, ridge)


def optimal_weights(f: np.ndarray, pdfs: Sequence[DiscretePdf], n: Sequence[int],
                    alpha: np.ndarray) -> np.ndarray:
    """
    Оптимальные MIS-веса для скалярной f на дискретной области, матрица (N, J).

    Там, где f(x) = 0, берутся веса баланса.
    """
    f = np.asarray(f, dtype=np.float64)
    counts = np.asarray(n, dtype=np.float64)
    indices = np.arange(len(pdfs[0]))
    matrix, total = mixture_density(pdfs, counts, indices)
    balance = counts * matrix / np.where(total > 0, total, 1.0)[:, None]
    weights = balance.copy()
    nonzero = f != 0
    mixed = matrix[nonzero] @ alpha
    weights[nonzero] = (alpha * matrix[nonzero] / f[nonzero, None]
                        + balance[nonzero] * (1.0 - mixed / f[nonzero])[:, None])
    return weights


def mis_variance(f: np.ndarray, pdfs: Sequence[DiscretePdf], n: Sequence[int],
                 weights: np.ndarray) -> float:
    """
    Дисперсия MIS-оценки скалярной f на дискретной области:
    Σ_j Σ_x w_j² f² / (n_j p_j) − Σ_j (Σ_x w_j f)² / n_j.
    """
    f = np.asarray(f, dtype=np.float64)
    variance = 0.0
    for j, (pdf, count) in enumerate(zip(pdfs, n)):
        support = pdf.probs > 0
        wf = weights[:, j] * f
        variance += np.sum(wf[support] ** 2 / (count * pdf.probs[support]))
        variance -= np.sum(wf[support]) ** 2 / count
    return float(variance)


def estimator_variance(estimates: np.ndarray) -> float:
    """След эмпирической ковариации набора оценок (строка на повтор)."""
    estimates = np.asarray(estimates, dtype=np.float64)
    if estimates.ndim == 1:
        estimates = estimates[:, None]
    return float(estimates.var(axis=0, ddof=1).sum())
