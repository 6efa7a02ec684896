"""
Запуск экспериментов: построение задачи и сети, обучение, запись метрик,
контрольных точек и манифеста запуска.
"""
import json
import logging.config
import subprocess
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from core.config import TrainConfig, read_config_data
from core.errors import ConfigInvalid
from core.estimators import Estimator
from core.linalg import Rng
from core.logger import logger_config
from core.metrics_io import MetricsWriter, compare, format_comparison
from core.network import Network, forward, load_checkpoint, save_checkpoint
from core.tasks import (Dataset, encode_inputs, gen_polynomial, gen_toy_classification,
                        image_pixels, load_idx_subset, load_image_regression, write_ppm)
from core.trainers import EpochLog, make_trainer

logging.config.dictConfig(logger_config)
logger = logging.getLogger('misgrad_logger')

CONFIG_FILE = 'config.json'
MANIFEST_FILE = 'manifest.json'
METRICS_FILE = 'metrics.csv'
CHECKPOINT_FILE = 'model.ckpt'
IMPORTANCE_FILE = 'importance.csv'
PREDICTION_FILE = 'prediction.ppm'


@dataclass
class RunManifest:
    """Сведения о запуске: снимок конфигурации, версия, зерно, время, каталог."""
    config: Dict[str, Any]
    version: str
    seed: int
    started_at: str
    output_dir: str
    epochs_completed: int = 0
    final_train_loss: Optional[float] = None
    final_eval_loss: Optional[float] = None

    def save(self) -> Path:
        path = Path(self.output_dir) / MANIFEST_FILE
        path.write_text(json.dumps(asdict(self), indent=2, ensure_ascii=False), encoding='utf-8')
        return path

    @classmethod
    def load(cls, run_dir: Union[str, Path]) -> 'RunManifest':
        path = Path(run_dir) / MANIFEST_FILE
        if not path.exists():
            error_msg = f'Файл не найден: {path}'
            logger.error(error_msg)
            raise FileNotFoundError(error_msg)
        return cls(**json.loads(path.read_text(encoding='utf-8')))


def version_string() -> str:
    """Версия в стиле git describe; без репозитория берётся версия пакета."""
    try:
        result = subprocess.run(['git', 'describe', '--tags', '--always', '--dirty'],
                                capture_output=True, text=True, timeout=5,
                                cwd=Path(__file__).parent)
        if result.returncode == 0 and result.stdout.strip():
            return result.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    try:
        return metadata.version('misgrad')
    except metadata.PackageNotFoundError:
        return 'unknown'


def build_task(cfg: TrainConfig) -> Tuple[Dataset, Optional[Dataset]]:
    """Обучающий и (если есть) оценочный наборы с позиционным кодированием входов."""
    family = cfg.family
    eval_dataset = None
    if family == 'poly':
        dataset, _ = gen_polynomial(cfg.poly_order, cfg.n_points, noise_sd=cfg.noise_sd,
                                    seed=cfg.seed)
    elif family == 'toy':
        dataset = gen_toy_classification(cfg.n_points, seed=cfg.seed)
        eval_dataset = gen_toy_classification(cfg.n_points, seed=cfg.seed + 1)
    elif family == 'image':
        dataset = load_image_regression(cfg.image_path, cfg.resolution)
    else:
        dataset = load_idx_subset(cfg.images, cfg.labels, cfg.n_take, seed=cfg.seed)
        if cfg.eval_images and cfg.eval_labels:
            eval_dataset = load_idx_subset(cfg.eval_images, cfg.eval_labels, cfg.eval_take,
                                           seed=cfg.seed, name='idx-eval',
                                           classes=dataset.classes)
    dataset = encode_inputs(dataset, cfg.encoding_freqs)
    if eval_dataset is not None:
        eval_dataset = encode_inputs(eval_dataset, cfg.encoding_freqs)
    return dataset, eval_dataset


def build_network(cfg: TrainConfig, dataset: Dataset) -> Network:
    """Сеть [вход, скрытые слои..., выход] с инициализацией от зерна запуска."""
    sizes = [dataset.input_dim] + list(cfg.hidden) + [dataset.output_dim]
    return Network.build(sizes, cfg.activation, Rng(cfg.seed).spawn(1), cfg.first_omega)


def _unique_dir(root: Path, name: str) -> Path:
    candidate = root / name
    suffix = 1
    while candidate.exists():
        candidate = root / f'{name}-{suffix}'
        suffix += 1
    candidate.mkdir(parents=True)
    return candidate


def run(cfg: TrainConfig, out_root: Union[str, Path] = 'runs') -> Tuple[RunManifest, List[EpochLog]]:
    """
    Один запуск обучения.

    В каталоге запуска создаются config.json, manifest.json, metrics.csv
    (дописывается после каждой эпохи), model.ckpt и, по запросу, importance.csv.

    Returns:
        Манифест и журнал эпох

    Raises:
        TrainingError: Ошибка обучения с эпохой и шагом
    """
    started = datetime.now(timezone.utc)
    run_dir = _unique_dir(Path(out_root), f'{cfg.task}-{cfg.estimator.value}-seed{cfg.seed}-'
                                          f'{started.strftime("%Y%m%dT%H%M%S")}')
    (run_dir / CONFIG_FILE).write_text(cfg.to_json(), encoding='utf-8')
    manifest = RunManifest(config=cfg.to_dict(), version=version_string(), seed=cfg.seed,
                           started_at=started.isoformat(), output_dir=str(run_dir))
    manifest.save()
    logger.info('Запуск %s: каталог %s', cfg.estimator.value, run_dir)

    dataset, eval_dataset = build_task(cfg)
    net = build_network(cfg, dataset)
    trainer = make_trainer(cfg, net, dataset, eval_dataset)
    writer = MetricsWriter(run_dir / METRICS_FILE, {
        'task': cfg.task, 'estimator': cfg.estimator.value, 'seed': cfg.seed,
        'J': cfg.J, 'B': cfg.B,
    })

    try:
        logs = trainer.train(callback=writer.append)
    finally:
        save_checkpoint(net, run_dir / CHECKPOINT_FILE)
        if cfg.dump_importance and trainer.table is not None:
            trainer.table.dump(run_dir / IMPORTANCE_FILE)

    manifest.epochs_completed = len(logs)
    if logs:
        manifest.final_train_loss = logs[-1].train_loss
        manifest.final_eval_loss = logs[-1].eval_loss
    manifest.save()
    return manifest, logs


def sweep(base: Dict[str, Any], estimators: Sequence[Union[str, Estimator]],
          out_root: Union[str, Path] = 'runs') -> Tuple[List[RunManifest], str]:
    """
    Серия запусков с одинаковой конфигурацией и разными оценщиками.

    Args:
        base: Плоский словарь конфигурации без поля estimator (или с любым значением)
        estimators: Оценщики, например ['uniform', 'is', 'omis']
        out_root: Корневой каталог

    Returns:
        Манифесты запусков и сравнительная таблица (также пишется в comparison.txt)
    """
    if not estimators:
        raise ConfigInvalid('estimators', 'список оценщиков пуст')
    sweep_dir = _unique_dir(Path(out_root), f'sweep-{datetime.now(timezone.utc):%Y%m%dT%H%M%S}')
    manifests = []
    for estimator in estimators:
        estimator = Estimator(estimator)
        cfg = TrainConfig.from_dict(dict(base, estimator=estimator.value))
        manifest, _ = run(cfg, sweep_dir)
        manifests.append(manifest)

    files = [Path(m.output_dir) / METRICS_FILE for m in manifests]
    table = format_comparison(compare(files)) if len(files) > 1 else ''
    (sweep_dir / 'comparison.txt').write_text(table + '\n', encoding='utf-8')
    logger.info('Серия из %d запусков завершена: %s', len(manifests), sweep_dir)
    return manifests, table


def render(run_dir: Union[str, Path], path: Optional[Union[str, Path]] = None) -> Path:
    """
    Записывает предсказание сети запуска регрессии изображения в PPM.

    Raises:
        ConfigInvalid: Если запуск не относится к задаче image
    """
    run_dir = Path(run_dir)
    cfg = TrainConfig.from_dict(read_config_data(run_dir / CONFIG_FILE))
    if cfg.family != 'image':
        error_msg = f'Отрисовка доступна только для задачи image, в запуске задача {cfg.task}'
        logger.error(error_msg)
        raise ConfigInvalid('task = image', error_msg)
    dataset, _ = build_task(cfg)
    net = build_network(cfg, dataset)
    load_checkpoint(net, run_dir / CHECKPOINT_FILE)
    width, height = int(dataset.meta['width']), int(dataset.meta['height'])
    path = Path(path) if path is not None else run_dir / PREDICTION_FILE
    write_ppm(path, image_pixels(forward(net, dataset.inputs), width, height))
    logger.info('Предсказание записано: %s', path)
    return path
