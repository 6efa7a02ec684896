"""
Файлы метрик обучения и сравнительные таблицы оценщиков.

Формат файла: строка-комментарий ``# task=... estimator=... seed=...``,
затем CSV с колонками ``epoch,wall_ms,train_loss,eval_loss,eval_error``.
Строки дописываются по мере обучения, поэтому прерванный запуск оставляет
читаемый префикс.
"""
import csv
import logging.config
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.stats import rankdata
from tabulate import tabulate

from core.errors import TaskMismatch
from core.logger import logger_config
from core.trainers import EpochLog

logging.config.dictConfig(logger_config)
logger = logging.getLogger('misgrad_logger')

COLUMNS = ('epoch', 'wall_ms', 'train_loss', 'eval_loss', 'eval_error')


class DataRow(Dict[str, str]):
    """Строка файла метрик с типизированным доступом к значениям."""

    def get_numeric(self, key: str) -> Optional[float]:
        """Возвращает числовое значение или None, если преобразование невозможно."""
        value = self.get(key)
        if value is None or value == '':
            return None
        try:
            return float(value)
        except (ValueError, TypeError):
            return None


@dataclass
class MetricsFile:
    """Содержимое файла метрик одного запуска."""
    path: Path
    meta: Dict[str, str] = field(default_factory=dict)
    rows: List[DataRow] = field(default_factory=list)

    @property
    def task(self) -> str:
        return self.meta.get('task', '')

    @property
    def label(self) -> str:
        return self.meta.get('estimator') or self.path.stem

    def column(self, key: str) -> np.ndarray:
        values = [row.get_numeric(key) for row in self.rows]
        return np.array([np.nan if v is None else v for v in values], dtype=np.float64)


class MetricsWriter:
    """Дописывает строки метрик в файл и сбрасывает буфер после каждой эпохи."""

    def __init__(self, path: Union[str, Path], meta: Dict[str, str]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, 'w', encoding='utf-8', newline='') as f:
            f.write('# ' + ' '.join(f'{k}={v}' for k, v in meta.items()) + '\n')
            f.write(','.join(COLUMNS) + '\n')

    def append(self, log: EpochLog) -> None:
        error = '' if log.eval_error_rate is None else repr(log.eval_error_rate)
        with open(self.path, 'a', encoding='utf-8', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow([log.epoch, f'{log.wall_ms:.3f}', repr(log.train_loss),
                             repr(log.eval_loss), error])
            f.flush()


def read_metrics(path: Union[str, Path]) -> MetricsFile:
    """
    Читает файл метрик.

    Raises:
        FileNotFoundError: Если файл не существует
        ValueError: Если файл не является файлом метрик
    """
    path = Path(path)
    if not path.exists():
        error_msg = f'Файл не найден: {path}'
        logger.error(error_msg)
        raise FileNotFoundError(error_msg)

    with open(path, 'r', encoding='utf-8') as f:
        first = f.readline()
        meta = {}
        if first.startswith('#'):
            for token in first[1:].split():
                key, _, value = token.partition('=')
                meta[key] = value
        else:
            f.seek(0)
        try:
            reader = csv.DictReader(f)
            rows = [DataRow(row) for row in reader]
            columns = reader.fieldnames or []
        except csv.Error as e:
            error_msg = f'Ошибка при чтении файла метрик {path}: {e}'
            logger.error(error_msg)
            raise ValueError(error_msg) from e

    missing = [c for c in COLUMNS if c not in columns]
    if missing:
        error_msg = f'В файле {path} нет колонок: {", ".join(missing)}'
        logger.error(error_msg)
        raise ValueError(error_msg)
    # последняя строка прерванного запуска может быть неполной
    rows = [row for row in rows if row.get_numeric('eval_loss') is not None]
    return MetricsFile(path=path, meta=meta, rows=rows)


def loss_at_time(metrics: MetricsFile, wall_ms: float) -> float:
    """Потери на оценке, линейно интерполированные по wall_ms между эпохами."""
    times = metrics.column('wall_ms')
    losses = metrics.column('eval_loss')
    return float(np.interp(wall_ms, times, losses))


def loss_at_epoch(metrics: MetricsFile, epoch: int) -> float:
    epochs = metrics.column('epoch')
    matches = np.flatnonzero(epochs == epoch)
    if not len(matches):
        raise ValueError(f'В файле {metrics.path} нет эпохи {epoch}')
    return float(metrics.column('eval_loss')[matches[-1]])


@dataclass
class ComparisonRow:
    """Строка сравнительной таблицы."""
    label: str
    equal_epoch_loss: float
    equal_time_loss: float
    epoch_rank: int = 0
    time_rank: int = 0


def compare(files: Sequence[Union[str, Path, MetricsFile]]) -> List[ComparisonRow]:
    """
    Сравнивает запуски при равном числе эпох и при равном времени.

    За общую эпоху берётся последняя эпоха, достигнутая всеми запусками, за общее
    время минимальное итоговое wall_ms. Одинаковые потери получают одинаковый ранг.

    Raises:
        ValueError: Если передано меньше двух файлов или файл пуст
        TaskMismatch: Если файлы относятся к разным задачам
    """
    metrics = [f if isinstance(f, MetricsFile) else read_metrics(f) for f in files]
    if len(metrics) < 2:
        error_msg = 'Для сравнения нужно не меньше двух файлов метрик'
        logger.error(error_msg)
        raise ValueError(error_msg)
    for m in metrics:
        if not m.rows:
            error_msg = f'Файл метрик пуст: {m.path}'
            logger.error(error_msg)
            raise ValueError(error_msg)
    tasks = {m.task for m in metrics}
    if len(tasks) > 1:
        error_msg = f'Файлы метрик относятся к разным задачам: {", ".join(sorted(tasks))}'
        logger.error(error_msg)
        raise TaskMismatch(error_msg)

    epoch = int(min(m.column('epoch').max() for m in metrics))
    wall_ms = float(min(m.column('wall_ms').max() for m in metrics))
    rows = [ComparisonRow(label=m.label,
                          equal_epoch_loss=loss_at_epoch(m, epoch),
                          equal_time_loss=loss_at_time(m, wall_ms))
            for m in metrics]
    epoch_ranks = rankdata([r.equal_epoch_loss for r in rows], method='min')
    time_ranks = rankdata([r.equal_time_loss for r in rows], method='min')
    for row, er, tr in zip(rows, epoch_ranks, time_ranks):
        row.epoch_rank, row.time_rank = int(er), int(tr)
    logger.info('Сравнение %d запусков: эпоха %d, время %.1f мс', len(rows), epoch, wall_ms)
    return sorted(rows, key=lambda r: (r.epoch_rank, r.time_rank, r.label))


def format_comparison(rows: Sequence[ComparisonRow]) -> str:
    """Таблица сравнения в формате grid."""
    table = [[r.label, f'{r.equal_epoch_loss:.6g}', r.epoch_rank,
              f'{r.equal_time_loss:.6g}', r.time_rank] for r in rows]
    headers = ['Оценщик', 'Потери (равные эпохи)', 'Ранг', 'Потери (равное время)', 'Ранг']
    return tabulate(table, headers=headers, tablefmt='grid')
