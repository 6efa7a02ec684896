"""
Циклы обучения: равномерный SGD, SGD с выборкой по значимости, OMIS-SGD
и точный градиентный спуск.

Каждый тренер владеет сетью, оптимизатором и таблицей важности и
предоставляет пошаговый интерфейс ``step()``; ``train()`` собирает из шагов
эпохи и возвращает журнал ``EpochLog``.
"""
import logging.config
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from core.config import TrainConfig
from core.errors import MisgradError, TrainingError
from core.estimators import (Estimator, GradEstimate, MisSystem, balance_mis_result,
                             importance_weights, mis_design, omis_estimate, omis_step,
                             weight_range)
from core.importance import (DiscretePdf, ImportanceTable, end_epoch_accumulate, normalize,
                             sample_with_replacement)
from core.importance_functions import (ImportanceMetric, MetricKind, importance_fidelity,
                                       output_layer_groups, select_node_subset)
from core.linalg import Rng
from core.logger import logger_config
from core.network import (Network, Optimizer, WeightedBatch, forward, full_gradient,
                          sample_losses, weighted_backward)
from core.tasks import Dataset, TargetKind

logging.config.dictConfig(logger_config)
logger = logging.getLogger('misgrad_logger')


@dataclass
class EpochLog:
    """Итоги одной эпохи."""
    epoch: int
    wall_ms: float
    train_loss: float
    eval_loss: float
    eval_error_rate: Optional[float] = None
    diagnostics: Dict[str, float] = field(default_factory=dict)


def evaluate(net: Network, dataset: Dataset):
    """Средние потери и, для классификации, доля ошибок на наборе."""
    losses = sample_losses(net, dataset.inputs, dataset.targets, dataset.loss)
    error_rate = None
    if dataset.target_kind == TargetKind.CLASSIFICATION:
        predicted = np.argmax(forward(net, dataset.inputs), axis=1)
        error_rate = float(np.mean(predicted != dataset.targets))
    return float(losses.mean()), error_rate


def _backward(net: Network, dataset: Dataset, indices: np.ndarray,
              weights: np.ndarray) -> WeightedBatch:
    return weighted_backward(net, dataset.inputs[indices], dataset.targets[indices],
                             dataset.loss, weights, indices)


def init_steps(size: int, B: int) -> int:
    """Число шагов оптимизатора в эпохе инициализации: ⌊N/B⌋, ноль при N < B."""
    return size // B


def _init_pass(net: Network, dataset: Dataset, B: int, rng: Rng, optimizer: Optimizer,
               record: Callable[[WeightedBatch], None]) -> int:
    """
    Одна эпоха SGD в случайном порядке; ``record`` получает каждый пакет.

    Остаток N mod B не даёт шага оптимизатора, но тоже передаётся в ``record``,
    чтобы важность была задана для всех элементов.

    Returns:
        Число сделанных шагов, ⌊N/B⌋
    """
    order = rng.permutation(len(dataset))
    steps = init_steps(len(dataset), B)
    for s in range(steps):
        batch = _backward(net, dataset, order[s * B:(s + 1) * B], np.full(B, 1.0 / B))
        record(batch)
        optimizer.step(net, batch.grads[0])
    rest = order[steps * B:]
    if len(rest):
        record(_backward(net, dataset, rest, np.full(len(rest), 1.0 / len(rest))))
    return steps


def init_epoch_is(net: Network, dataset: Dataset, B: int, rng: Rng,
                  optimizer: Optional[Optimizer] = None,
                  metric: Optional[ImportanceMetric] = None, **table_kwargs) -> ImportanceTable:
    """
    Инициализация постоянной таблицы важности первой эпохой SGD.

    Каждому элементу один раз присваивается ‖∂L/∂m‖ (или значение другой
    скалярной метрики) без смешивания с моментом.

    Returns:
        Скалярная ImportanceTable
    """
    optimizer = optimizer or Optimizer('adam', 1e-3)
    metric = metric or ImportanceMetric()
    table = ImportanceTable(len(dataset), **table_kwargs)

    def record(batch: WeightedBatch):
        values = metric.scalar_values(batch, dataset.targets[batch.indices])
        for idx, value in zip(batch.indices, values):
            table.set_initial(int(idx), value)

    steps = _init_pass(net, dataset, B, rng, optimizer, record)
    logger.info('Инициализация важности: %d шагов, %d элементов', steps, len(dataset))
    return table


def init_epoch_mis(net: Network, dataset: Dataset, B: int, rng: Rng,
                   optimizer: Optional[Optimizer] = None, techniques: Optional[int] = None,
                   metric: Optional[ImportanceMetric] = None,
                   **table_kwargs) -> ImportanceTable:
    """
    Инициализация векторной таблицы важности первой эпохой SGD.

    При J, равном ширине выхода (или не заданном), хранится полный вектор
    ∂L/∂m. При J меньше ширины выбираются J узлов с наибольшим средним
    |∂L/∂m_j| за эпоху; выбранное подмножество записывается в ``metric``.
    При J больше ширины компоненты берутся из групп параметров выходного слоя.

    Returns:
        Векторная ImportanceTable с J компонентами
    """
    optimizer = optimizer or Optimizer('adam', 1e-3)
    metric = metric or ImportanceMetric(kind=MetricKind.PER_NODE_GRADS)
    width = net.output_width
    techniques = width if techniques is None else techniques
    grouped = techniques > width
    if grouped and metric.param_groups is None:
        metric.param_groups = output_layer_groups(net, techniques)
    columns = techniques if grouped else width
    stored = np.zeros((len(dataset), columns))

    def record(batch: WeightedBatch):
        if grouped:
            stored[batch.indices] = metric.vector_values(batch)
        else:
            stored[batch.indices] = batch.output_grads

    steps = _init_pass(net, dataset, B, rng, optimizer, record)
    if not grouped and techniques < width:
        metric.node_subset = select_node_subset(np.abs(stored).mean(axis=0), techniques)
        stored = stored[:, metric.node_subset]
        logger.info('Выбраны выходные узлы %s', metric.node_subset)
    elif not grouped:
        metric.node_subset = list(range(width))

    table = ImportanceTable(len(dataset), techniques=techniques, **table_kwargs)
    for idx in range(len(dataset)):
        table.set_initial(idx, stored[idx])
    logger.info('Инициализация векторной важности: %d шагов, J=%d', steps, techniques)
    return table


class Trainer:
    """Общая часть тренеров: оптимизатор, момент градиента, расписание, эпохи."""

    estimator = Estimator.UNIFORM

    def __init__(self, cfg: TrainConfig, net: Network, dataset: Dataset,
                 eval_dataset: Optional[Dataset] = None, rng: Optional[Rng] = None):
        self.cfg = cfg
        self.net = net
        self.dataset = dataset
        self.eval_dataset = eval_dataset
        self.rng = rng or Rng(cfg.seed)
        self.optimizer = Optimizer(cfg.optimizer.value, cfg.lr, cfg.weight_decay)
        self.epoch = 0
        self.step_index = 0
        self.table: Optional[ImportanceTable] = None
        self._grad_avg = np.zeros(net.param_count)
        self._grad_steps = 0
        self._diagnostics: List[Dict[str, float]] = []

    @property
    def steps_per_epoch(self) -> int:
        return max(1, len(self.dataset) // self.cfg.B)

    @property
    def needs_init(self) -> bool:
        return False

    def initialize(self) -> int:
        """Эпоха инициализации (для тренеров с таблицей важности); возвращает число шагов."""
        return 0

    def begin_epoch(self) -> None:
        """Подготовка перед обычной эпохой."""

    def end_epoch(self) -> Dict[str, float]:
        """Завершение эпохи; возвращает дополнительную диагностику."""
        return {}

    def estimate(self) -> GradEstimate:
        raise NotImplementedError

    def step(self) -> GradEstimate:
        """Один шаг оптимизации: оценка градиента и обновление параметров."""
        estimate = self.estimate()
        grad = estimate.grad
        if self.cfg.grad_momentum > 0 and self.estimator != Estimator.OMIS:
            beta = self.cfg.grad_momentum
            self._grad_steps += 1
            self._grad_avg = beta * self._grad_avg + (1.0 - beta) * grad
            grad = self._grad_avg / (1.0 - beta ** self._grad_steps)
        self.optimizer.step(self.net, grad)
        self.step_index += 1
        self._diagnostics.append(estimate.diagnostics)
        logger.debug('Шаг %d: %s', self.step_index, estimate.diagnostics)
        return estimate

    def _learning_rate(self, epoch: int) -> float:
        passed = sum(1 for m in self.cfg.lr_milestones if m < epoch)
        return self.cfg.lr * self.cfg.lr_gamma ** passed

    def _summary(self) -> Dict[str, float]:
        summary: Dict[str, float] = {}
        keys = {k for d in self._diagnostics for k in d}
        for key in sorted(keys):
            values = [d[key] for d in self._diagnostics if key in d]
            if key == 'min_weight':
                summary[key] = float(min(values))
            elif key == 'max_weight':
                summary[key] = float(max(values))
            else:
                summary[key] = float(np.mean(values))
        self._diagnostics = []
        return summary

    def run_epoch(self) -> Dict[str, float]:
        """Одна эпоха; у тренеров с важностью первая эпоха служит инициализацией."""
        self.epoch += 1
        self.optimizer.lr = self._learning_rate(self.epoch)
        try:
            if self.epoch == 1 and self.needs_init and self.table is None:
                self.step_index += self.initialize()
            else:
                self.begin_epoch()
                for _ in range(self.steps_per_epoch):
                    self.step()
            summary = self._summary()
            summary.update(self.end_epoch())
        except TrainingError:
            raise
        except MisgradError as e:
            logger.error('Ошибка обучения в эпохе %d на шаге %d: %s',
                         self.epoch, self.step_index, e)
            raise TrainingError(str(e), self.epoch, self.step_index) from e
        summary['lr'] = self.optimizer.lr
        return summary

    def train(self, epochs: Optional[int] = None,
              callback: Optional[Callable[[EpochLog], None]] = None) -> List[EpochLog]:
        """
        Обучение на ``epochs`` эпох (по умолчанию из конфигурации).

        Время эпохи не включает вычисление потерь для журнала.

        Args:
            epochs: Число эпох
            callback: Вызывается с каждым EpochLog сразу после эпохи

        Returns:
            Журнал эпох
        """
        epochs = self.cfg.epochs if epochs is None else epochs
        logs = []
        elapsed_ms = 0.0
        for _ in range(epochs):
            started = time.perf_counter()
            diagnostics = self.run_epoch()
            elapsed_ms += (time.perf_counter() - started) * 1000.0
            if self.cfg.fidelity:
                probs = self.sampling_probs()
                if probs is not None:
                    diagnostics['fidelity'] = importance_fidelity(
                        self.net, self.dataset.inputs, self.dataset.targets,
                        self.dataset.loss, probs)
            train_loss, _ = evaluate(self.net, self.dataset)
            if self.eval_dataset is not None:
                eval_loss, error_rate = evaluate(self.net, self.eval_dataset)
            else:
                eval_loss, error_rate = evaluate(self.net, self.dataset)
            log = EpochLog(epoch=self.epoch, wall_ms=elapsed_ms, train_loss=train_loss,
                           eval_loss=eval_loss, eval_error_rate=error_rate,
                           diagnostics=diagnostics)
            if not np.all(np.isfinite(self.net.params)):
                raise TrainingError('Параметры сети содержат NaN или Inf',
                                    self.epoch, self.step_index)
            logger.info('Эпоха %d (%s): train_loss=%.6g, eval_loss=%.6g, %.1f мс',
                        log.epoch, self.estimator.value, train_loss, eval_loss, elapsed_ms)
            logs.append(log)
            if callback is not None:
                callback(log)
        return logs

    def sampling_probs(self) -> Optional[np.ndarray]:
        """Текущее распределение выборки элементов или None."""
        return None


class UniformTrainer(Trainer):
    """Равномерный SGD: перемешивание эпохи без возвращения или выборка с возвращением."""

    estimator = Estimator.UNIFORM

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._order = np.arange(len(self.dataset))
        self._cursor = 0
        self._uniform = DiscretePdf.uniform(len(self.dataset))

    def begin_epoch(self) -> None:
        if not self.cfg.with_replacement:
            self._order = self.rng.permutation(len(self.dataset))
            self._cursor = 0

    def next_indices(self) -> np.ndarray:
        B = self.cfg.B
        if self.cfg.with_replacement:
            return sample_with_replacement(self._uniform, B, self.rng)
        if self._cursor + B > len(self._order):
            self.begin_epoch()
        indices = self._order[self._cursor:self._cursor + B]
        self._cursor += B
        return indices

    def estimate(self) -> GradEstimate:
        indices = self.next_indices()
        batch = _backward(self.net, self.dataset, indices, np.full(len(indices), 1.0 / len(indices)))
        return GradEstimate(grad=batch.grads[0], kind=Estimator.UNIFORM)

    def sampling_probs(self) -> Optional[np.ndarray]:
        return self._uniform.probs


class ImportanceTrainer(Trainer):
    """SGD с выборкой по значимости по постоянной скалярной таблице (IS или AS)."""

    estimator = Estimator.IS

    def __init__(self, cfg: TrainConfig, net: Network, dataset: Dataset,
                 eval_dataset: Optional[Dataset] = None, rng: Optional[Rng] = None,
                 table: Optional[ImportanceTable] = None):
        super().__init__(cfg, net, dataset, eval_dataset, rng)
        self.estimator = cfg.estimator if cfg.estimator == Estimator.AS else Estimator.IS
        self.metric = ImportanceMetric(kind=cfg.metric)
        self.table = table

    @property
    def needs_init(self) -> bool:
        return True

    def _table_kwargs(self) -> dict:
        return {'momentum': self.cfg.momentum, 'epsilon': self.cfg.epsilon,
                'epsilon_fraction': self.cfg.epsilon_fraction}

    def initialize(self) -> int:
        self.table = init_epoch_is(self.net, self.dataset, self.cfg.B, self.rng,
                                   self.optimizer, self.metric, **self._table_kwargs())
        return init_steps(len(self.dataset), self.cfg.B)

    def estimate(self) -> GradEstimate:
        B = self.cfg.B
        pdf = normalize(self.table)
        indices = sample_with_replacement(pdf, B, self.rng)
        if self.estimator == Estimator.AS:
            weights = np.ones(B)
            diagnostics = {'biased': 1.0, 'min_weight': 1.0, 'max_weight': 1.0}
        else:
            weights = importance_weights(pdf, indices)
            diagnostics = weight_range(weights)
        batch = _backward(self.net, self.dataset, indices, weights / B)
        values = self.metric.scalar_values(batch, self.dataset.targets[indices])
        self.table.update_batch(indices, values)
        return GradEstimate(grad=batch.grads[0], kind=self.estimator, diagnostics=diagnostics)

    def end_epoch(self) -> Dict[str, float]:
        return {'epsilon': end_epoch_accumulate(self.table)}

    def sampling_probs(self) -> Optional[np.ndarray]:
        return None if self.table is None else normalize(self.table).probs


class MisTrainer(Trainer):
    """
    Стратифицированная выборка из J распределений векторной таблицы важности:
    OMIS с накопленной линейной системой или MIS с весами баланса.
    """

    estimator = Estimator.OMIS

    def __init__(self, cfg: TrainConfig, net: Network, dataset: Dataset,
                 eval_dataset: Optional[Dataset] = None, rng: Optional[Rng] = None,
                 table: Optional[ImportanceTable] = None,
                 metric: Optional[ImportanceMetric] = None):
        super().__init__(cfg, net, dataset, eval_dataset, rng)
        self.estimator = cfg.estimator
        self.counts = list(cfg.n_j)
        self.metric = metric or ImportanceMetric(kind=MetricKind.PER_NODE_GRADS)
        self.table = table
        self.system: Optional[MisSystem] = None
        if self.estimator == Estimator.OMIS:
            self.system = MisSystem(cfg.J, net.param_count, self.counts, beta=cfg.beta,
                                    ridge_scale=cfg.ridge_scale,
                                    bias_correction=cfg.bias_correction)
        if table is not None and self.metric.param_groups is None \
                and self.metric.node_subset is None:
            if cfg.J > net.output_width:
                self.metric.param_groups = output_layer_groups(net, cfg.J)
            elif cfg.J == net.output_width:
                self.metric.node_subset = list(range(cfg.J))
            else:
                error_msg = f'Для J={cfg.J} < {net.output_width} нужна заданная метрика с подмножеством узлов'
                logger.error(error_msg)
                raise ValueError(error_msg)

    @property
    def needs_init(self) -> bool:
        return True

    def initialize(self) -> int:
        self.table = init_epoch_mis(self.net, self.dataset, self.cfg.B, self.rng,
                                    self.optimizer, self.cfg.J, self.metric,
                                    momentum=self.cfg.momentum, epsilon=self.cfg.epsilon,
                                    epsilon_fraction=self.cfg.epsilon_fraction)
        return init_steps(len(self.dataset), self.cfg.B)

    def pdfs(self) -> List[DiscretePdf]:
        return [normalize(self.table, j) for j in range(self.cfg.J)]

    def estimate(self) -> GradEstimate:
        pdfs = self.pdfs()
        drawn = [sample_with_replacement(pdf, count, self.rng)
                 for pdf, count in zip(pdfs, self.counts)]
        W, total = mis_design(drawn, pdfs, self.counts)
        indices = np.concatenate(drawn)
        # столбец j: W_ij / (N·S(x_i)); строка j результата равна Σ_i W_ij·f(x_i)/S(x_i)
        columns = W / (len(self.dataset) * total)[:, None]
        batch = _backward(self.net, self.dataset, indices, columns)
        if self.estimator != Estimator.OMIS:
            estimate = balance_mis_result(W, batch.grads.sum(axis=0))
        elif self.cfg.residual_correction:
            estimate = omis_step(self.system, W, batch.grads)
        else:
            self.system.accumulate_moments(W, batch.grads)
            estimate = omis_estimate(self.system)
        self.table.update_batch(indices, self.metric.vector_values(batch))
        return estimate

    def end_epoch(self) -> Dict[str, float]:
        return {'epsilon': end_epoch_accumulate(self.table)}

    def sampling_probs(self) -> Optional[np.ndarray]:
        if self.table is None:
            return None
        mixture = sum(count * pdf.probs for count, pdf in zip(self.counts, self.pdfs()))
        return mixture / sum(self.counts)


class ExactTrainer(Trainer):
    """Полноразмерный градиентный спуск; ⌊N/B⌋ шагов на эпоху для сравнения по итерациям."""

    estimator = Estimator.EXACT

    def estimate(self) -> GradEstimate:
        grad = full_gradient(self.net, self.dataset.inputs, self.dataset.targets, self.dataset.loss)
        return GradEstimate(grad=grad, kind=Estimator.EXACT)


TRAINERS = {
    Estimator.UNIFORM: UniformTrainer,
    Estimator.IS: ImportanceTrainer,
    Estimator.AS: ImportanceTrainer,
    Estimator.OMIS: MisTrainer,
    Estimator.BALANCE_MIS: MisTrainer,
    Estimator.EXACT: ExactTrainer,
}


def make_trainer(cfg: TrainConfig, net: Network, dataset: Dataset,
                 eval_dataset: Optional[Dataset] = None) -> Trainer:
    """Создаёт тренер для ``cfg.estimator``."""
    if cfg.estimator == Estimator.AS:
        logger.warning('Оценка AS смещена: сходимость не гарантирована')
    return TRAINERS[cfg.estimator](cfg, net, dataset, eval_dataset)


def train_uniform(cfg: TrainConfig, net: Network, dataset: Dataset,
                  eval_dataset: Optional[Dataset] = None) -> List[EpochLog]:
    return UniformTrainer(cfg, net, dataset, eval_dataset).train()


def train_is(cfg: TrainConfig, net: Network, dataset: Dataset,
             eval_dataset: Optional[Dataset] = None) -> List[EpochLog]:
    """Обучение с выборкой по значимости (IS или, при estimator=as, AS)."""
    return ImportanceTrainer(cfg, net, dataset, eval_dataset).train()


def train_omis(cfg: TrainConfig, net: Network, dataset: Dataset,
               eval_dataset: Optional[Dataset] = None) -> List[EpochLog]:
    """Обучение с OMIS (или MIS с весами баланса при estimator=balance_mis)."""
    return MisTrainer(cfg, net, dataset, eval_dataset).train()


def train_exact(cfg: TrainConfig, net: Network, dataset: Dataset,
                eval_dataset: Optional[Dataset] = None) -> List[EpochLog]:
    return ExactTrainer(cfg, net, dataset, eval_dataset).train()
