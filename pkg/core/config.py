"""
Конфигурация запуска: плоский JSON с ключами через точку.

Пример минимальной конфигурации::

    {"task": "poly6", "estimator": "omis", "B": 32, "J": 4}
"""
import json
import logging.config
import re
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from core.errors import ConfigInvalid, ConfigParse
from core.estimators import DEFAULT_BETA, DEFAULT_RIDGE_SCALE, Estimator
from core.importance import DEFAULT_EPSILON_FRACTION
from core.importance_functions import MetricKind
from core.logger import logger_config
from core.network import DEFAULT_FIRST_OMEGA, Activation

logging.config.dictConfig(logger_config)
logger = logging.getLogger('misgrad_logger')

DEFAULT_MOMENTUM = 0.3
POLY_TASK = re.compile(r'^poly(\d+)$')


class OptimizerKind(Enum):
    """Поддерживаемые оптимизаторы."""
    SGD = 'sgd'
    ADAM = 'adam'


class InitPolicy(Enum):
    """Начальное заполнение таблицы важности."""
    SGD_EPOCH = 'sgd_epoch'
    RANDOM = 'random'


# Значения по умолчанию, зависящие от задачи: ширины скрытых слоёв, активация,
# число частот кодирования, число эпох, ширина выхода
TASK_DEFAULTS = {
    'poly': {'hidden': [], 'activation': 'identity', 'freqs': 0, 'epochs': 32, 'outputs': 1},
    'toy': {'hidden': [32, 32], 'activation': 'relu', 'freqs': 0, 'epochs': 50, 'outputs': 3},
    'image': {'hidden': [64, 64, 64, 64], 'activation': 'sine', 'freqs': 4, 'epochs': 500,
              'outputs': 3},
    'idx': {'hidden': [128, 64], 'activation': 'relu', 'freqs': 0, 'epochs': 20, 'outputs': 10},
}


def task_family(task: str) -> str:
    """Семейство задачи: poly, toy, image или idx."""
    if POLY_TASK.match(task):
        return 'poly'
    if task in TASK_DEFAULTS:
        return task
    error_msg = f'Неизвестная задача "{task}". Используйте polyK, toy, image или idx'
    logger.error(error_msg)
    raise ConfigInvalid('task', error_msg)


def _key(name: str):
    return field(default=None, metadata={'key': name})


@dataclass
class TrainConfig:
    """Полностью проверенная конфигурация обучения."""
    task: str = field(default='poly6', metadata={'key': 'task'})
    estimator: Estimator = field(default=Estimator.IS, metadata={'key': 'estimator'})
    B: int = field(default=32, metadata={'key': 'B'})
    J: Optional[int] = _key('J')
    n_j: Optional[List[int]] = _key('n_j')
    epochs: Optional[int] = _key('epochs')
    seed: int = field(default=0, metadata={'key': 'seed'})
    lr: float = field(default=1e-3, metadata={'key': 'lr'})
    optimizer: OptimizerKind = field(default=OptimizerKind.ADAM, metadata={'key': 'optimizer'})
    weight_decay: float = field(default=0.0, metadata={'key': 'optimizer.weight_decay'})
    lr_milestones: List[int] = field(default_factory=list, metadata={'key': 'lr.milestones'})
    lr_gamma: float = field(default=0.5, metadata={'key': 'lr.gamma'})
    grad_momentum: float = field(default=0.0, metadata={'key': 'grad_momentum'})
    with_replacement: bool = field(default=False, metadata={'key': 'uniform.with_replacement'})
    momentum: float = field(default=DEFAULT_MOMENTUM, metadata={'key': 'importance.momentum'})
    epsilon: Optional[float] = _key('importance.epsilon')
    epsilon_fraction: float = field(default=DEFAULT_EPSILON_FRACTION,
                                    metadata={'key': 'importance.epsilon_fraction'})
    metric: Optional[MetricKind] = _key('importance.metric')
    init: InitPolicy = field(default=InitPolicy.SGD_EPOCH, metadata={'key': 'importance.init'})
    beta: float = field(default=DEFAULT_BETA, metadata={'key': 'omis.beta'})
    ridge_scale: float = field(default=DEFAULT_RIDGE_SCALE, metadata={'key': 'omis.ridge_scale'})
    bias_correction: bool = field(default=True, metadata={'key': 'omis.bias_correction'})
    residual_correction: bool = field(default=True, metadata={'key': 'omis.residual_correction'})
    hidden: Optional[List[int]] = _key('network.hidden')
    activation: Optional[Activation] = _key('network.activation')
    encoding_freqs: Optional[int] = _key('network.encoding_freqs')
    first_omega: float = field(default=DEFAULT_FIRST_OMEGA, metadata={'key': 'network.first_omega'})
    n_points: int = field(default=1024, metadata={'key': 'task.n_points'})
    noise_sd: float = field(default=0.0, metadata={'key': 'task.noise_sd'})
    image_path: Optional[str] = _key('task.path')
    resolution: int = field(default=64, metadata={'key': 'task.resolution'})
    images: Optional[str] = _key('task.images')
    labels: Optional[str] = _key('task.labels')
    eval_images: Optional[str] = _key('task.eval_images')
    eval_labels: Optional[str] = _key('task.eval_labels')
    n_take: int = field(default=1024, metadata={'key': 'task.n_take'})
    eval_take: int = field(default=1024, metadata={'key': 'task.eval_take'})
    fidelity: bool = field(default=False, metadata={'key': 'diagnostics.fidelity'})
    dump_importance: bool = field(default=False, metadata={'key': 'diagnostics.dump_importance'})

    def __post_init__(self):
        self.resolve_defaults()
        self.validate()

    @property
    def family(self) -> str:
        return task_family(self.task)

    @property
    def poly_order(self) -> int:
        match = POLY_TASK.match(self.task)
        return int(match.group(1)) if match else 0

    @property
    def is_mis(self) -> bool:
        return self.estimator in (Estimator.OMIS, Estimator.BALANCE_MIS)

    def resolve_defaults(self) -> None:
        """Заполняет зависящие от задачи значения по умолчанию."""
        defaults = TASK_DEFAULTS[self.family]
        if self.hidden is None:
            self.hidden = list(defaults['hidden'])
        if self.activation is None:
            self.activation = Activation(defaults['activation'])
        if self.encoding_freqs is None:
            self.encoding_freqs = defaults['freqs']
        if self.epochs is None:
            self.epochs = defaults['epochs']
        if self.J is None:
            self.J = 1 if not self.is_mis else min(defaults['outputs'], self.B)
        if self.n_j is None and self.is_mis and self.B >= self.J >= 1:
            base, extra = divmod(self.B, self.J)
            self.n_j = [base + (1 if j < extra else 0) for j in range(self.J)]
        if self.metric is None:
            if self.is_mis:
                self.metric = MetricKind.PER_NODE_GRADS
            elif self.family in ('toy', 'idx'):
                self.metric = MetricKind.CROSS_ENTROPY_CLOSED_FORM
            else:
                self.metric = MetricKind.OUTPUT_GRAD_NORM

    def validate(self) -> None:
        """
        Проверяет ограничения конфигурации.

        Raises:
            ConfigInvalid: С описанием нарушенного ограничения
        """
        def fail(constraint: str, details: Optional[str] = None):
            error = ConfigInvalid(constraint, details)
            logger.error('Некорректная конфигурация: %s', error)
            raise error

        if self.B < 1:
            fail('B ≥ 1', f'получено {self.B}')
        if self.J < 1:
            fail('J ≥ 1', f'получено {self.J}')
        if self.epochs < 1:
            fail('epochs ≥ 1', f'получено {self.epochs}')
        if self.seed < 0:
            fail('seed ≥ 0', f'получено {self.seed}')
        if self.lr <= 0:
            fail('lr > 0', f'получено {self.lr}')
        if not 0.0 <= self.momentum < 1.0:
            fail('importance.momentum ∈ [0, 1)', f'получено {self.momentum}')
        if not 0.0 <= self.beta < 1.0:
            fail('omis.beta ∈ [0, 1)', f'получено {self.beta}')
        if not 0.0 <= self.grad_momentum < 1.0:
            fail('grad_momentum ∈ [0, 1)', f'получено {self.grad_momentum}')
        if self.epsilon is not None and self.epsilon < 0:
            fail('importance.epsilon ≥ 0', f'получено {self.epsilon}')
        if self.ridge_scale < 0:
            fail('omis.ridge_scale ≥ 0', f'получено {self.ridge_scale}')
        if self.init != InitPolicy.SGD_EPOCH and self.estimator in (
                Estimator.IS, Estimator.AS, Estimator.OMIS, Estimator.BALANCE_MIS):
            fail('importance.init = sgd_epoch',
                 'таблица важности заполняется первой эпохой SGD')
        if self.is_mis:
            if self.n_j is None or len(self.n_j) != self.J:
                fail('len(n_j) = J', f'n_j={self.n_j}, J={self.J}')
            if any(n < 1 for n in self.n_j):
                fail('n_j ≥ 1', f'n_j={self.n_j}')
            if sum(self.n_j) != self.B:
                fail('Σn_j = B', f'Σn_j={sum(self.n_j)}, B={self.B}')
            if self.metric != MetricKind.PER_NODE_GRADS:
                fail('importance.metric = per_node_grads для MIS')
        elif self.metric == MetricKind.PER_NODE_GRADS:
            fail('importance.metric = per_node_grads только для MIS')
        if self.metric == MetricKind.CROSS_ENTROPY_CLOSED_FORM and self.family not in ('toy', 'idx'):
            fail('cross_entropy_closed_form только для задач классификации')
        if self.family == 'image' and not self.image_path:
            fail('task.path обязателен для задачи image')
        if self.family == 'idx' and not (self.images and self.labels):
            fail('task.images и task.labels обязательны для задачи idx')

    def to_dict(self) -> Dict[str, Any]:
        """Плоский словарь с ключами через точку."""
        result = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Enum):
                value = value.value
            elif isinstance(value, list):
                value = list(value)
            result[f.metadata['key']] = value
        return result

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TrainConfig':
        """
        Создаёт конфигурацию из плоского словаря.

        Raises:
            ConfigParse: Неизвестный ключ или неверный тип значения (с путём ключа)
            ConfigInvalid: Нарушение ограничения
        """
        by_key = {f.metadata['key']: f for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            if key not in by_key:
                error_msg = f'Неизвестный ключ конфигурации: {key}'
                logger.error(error_msg)
                raise ConfigParse(error_msg, key)
            f = by_key[key]
            kwargs[f.name] = _coerce(key, f.name, value)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: Union[str, Path],
                  overrides: Optional[Dict[str, Any]] = None) -> 'TrainConfig':
        """Читает JSON-файл; ``overrides`` (флаги CLI) имеют приоритет."""
        data = read_config_data(path)
        data.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(data)


def read_config_data(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Читает плоский JSON-объект конфигурации без проверки ключей.

    Raises:
        FileNotFoundError: Если файл не существует
        ConfigParse: Если файл не является JSON-объектом
    """
    path = Path(path)
    if not path.exists():
        error_msg = f'Файл не найден: {path}'
        logger.error(error_msg)
        raise FileNotFoundError(error_msg)
    try:
        data = json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        error_msg = f'Ошибка разбора JSON в {path}: {e}'
        logger.error(error_msg)
        raise ConfigParse(error_msg) from e
    if not isinstance(data, dict):
        error_msg = f'Ожидался JSON-объект в {path}'
        logger.error(error_msg)
        raise ConfigParse(error_msg)
    return data


def parse_config(path: Optional[Union[str, Path]] = None,
                 overrides: Optional[Dict[str, Any]] = None) -> TrainConfig:
    """
    Полностью проверенная конфигурация из файла и/или флагов.

    Raises:
        ConfigParse: Неизвестный ключ (с путём ключа) или неверный JSON
        ConfigInvalid: Нарушено ограничение
    """
    data = read_config_data(path) if path is not None else {}
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainConfig.from_dict(data)


_ENUMS = {
    'estimator': Estimator,
    'optimizer': OptimizerKind,
    'metric': MetricKind,
    'init': InitPolicy,
    'activation': Activation,
}
_INTS = {'B', 'J', 'epochs', 'seed', 'encoding_freqs', 'n_points', 'resolution', 'n_take',
         'eval_take'}
_FLOATS = {'lr', 'weight_decay', 'lr_gamma', 'grad_momentum', 'momentum', 'epsilon',
           'epsilon_fraction', 'beta', 'ridge_scale', 'first_omega', 'noise_sd'}
_BOOLS = {'with_replacement', 'bias_correction', 'residual_correction', 'fidelity',
          'dump_importance'}
_INT_LISTS = {'n_j', 'hidden', 'lr_milestones'}


def _coerce(key: str, name: str, value: Any) -> Any:
    def fail(expected: str):
        error_msg = f'Ключ {key}: ожидается {expected}, получено {value!r}'
        logger.error(error_msg)
        raise ConfigParse(error_msg, key)

    if value is None:
        return None
    if name in _ENUMS:
        try:
            return _ENUMS[name](value)
        except ValueError:
            fail(' | '.join(e.value for e in _ENUMS[name]))
    if name in _BOOLS:
        if not isinstance(value, bool):
            fail('true или false')
        return value
    if name in _INTS:
        if isinstance(value, bool) or not isinstance(value, int):
            fail('целое число')
        return value
    if name in _FLOATS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            fail('число')
        return float(value)
    if name in _INT_LISTS:
        if isinstance(value, int) and not isinstance(value, bool):
            return [value]
        if not isinstance(value, list) or any(
                isinstance(v, bool) or not isinstance(v, int) for v in value):
            fail('список целых чисел')
        return list(value)
    if not isinstance(value, str):
        fail('строка')
    return value
