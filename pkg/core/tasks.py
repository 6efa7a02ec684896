"""
Генераторы и загрузчики наборов данных для экспериментов.

Геометрия игрушечной классификации: точки в [0,1]², класс определяется
углом вокруг центра квадрата, закрученным пропорционально радиусу
(θ + 4π·r), что даёт три спиральных сектора с изогнутыми границами.
"""
import gzip
import logging.config
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from core.errors import (EmptySubset, IndexOutOfRange, InvalidTarget, LabelImageCountMismatch,
                         MalformedIdx, MalformedImage, UnsupportedFormat)
from core.linalg import Rng
from core.logger import logger_config
from core.network import LossKind, positional_encoding

logging.config.dictConfig(logger_config)
logger = logging.getLogger('misgrad_logger')

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
TOY_CLASSES = 3
TOY_TWIST = 4.0 * np.pi


class TargetKind(Enum):
    """Вид целевых значений."""
    REGRESSION = 'regression'
    CLASSIFICATION = 'classification'


@dataclass
class Dataset:
    """Набор данных: N входов одной размерности и N целей."""
    name: str
    inputs: np.ndarray
    targets: np.ndarray
    target_kind: TargetKind
    classes: int = 0
    meta: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.inputs) < 1:
            raise EmptySubset(f'Набор данных {self.name} пуст')
        if len(self.inputs) != len(self.targets):
            raise LabelImageCountMismatch(
                f'Входов {len(self.inputs)}, целей {len(self.targets)} в наборе {self.name}')

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def output_dim(self) -> int:
        if self.target_kind == TargetKind.CLASSIFICATION:
            return self.classes
        return self.targets.shape[1]

    @property
    def loss(self) -> LossKind:
        if self.target_kind == TargetKind.CLASSIFICATION:
            return LossKind.CROSS_ENTROPY
        return LossKind.MSE

    def manifest_line(self) -> str:
        """Строка вида task,N,input_dim,target_kind."""
        return f'{self.name},{len(self)},{self.input_dim},{self.target_kind.value}'

    def subset(self, indices: np.ndarray) -> 'Dataset':
        return replace(self, inputs=self.inputs[indices], targets=self.targets[indices])


def encode_inputs(dataset: Dataset, freqs: int) -> Dataset:
    """Возвращает копию набора с позиционным кодированием входов."""
    if freqs <= 0:
        return dataset
    meta = dict(dataset.meta, encoding_freqs=float(freqs))
    return replace(dataset, inputs=positional_encoding(dataset.inputs, freqs), meta=meta)


def gen_polynomial(order: int, n_points: int, domain: Tuple[float, float] = (-2.0, 2.0),
                   noise_sd: float = 0.0, seed: int = 0) -> Tuple[Dataset, np.ndarray]:
    """
    Регрессия полиномом: входы: мономы (x/s)^0..(x/s)^order, s = max(|lo|, |hi|).

    Масштаб s держит признаки в [-1, 1]; эталонные коэффициенты заданы в этом базисе.

    Returns:
        Набор данных и эталонные коэффициенты (order + 1)
    """
    if order < 0:
        raise ValueError(f'Порядок полинома должен быть неотрицательным, получено {order}')
    if n_points < order + 1:
        raise ValueError(f'Нужно не меньше {order + 1} точек, получено {n_points}')
    lo, hi = float(domain[0]), float(domain[1])
    if not hi > lo:
        raise ValueError(f'Некорректный интервал [{lo}, {hi}]')

    rng = Rng(seed)
    coefficients = rng.normal(order + 1)
    x = lo + (hi - lo) * rng.uniform(n_points)
    scale = max(abs(lo), abs(hi))
    features = (x / scale)[:, None] ** np.arange(order + 1)[None, :]
    targets = features @ coefficients
    if noise_sd > 0:
        targets = targets + rng.normal(n_points, scale=noise_sd)

    dataset = Dataset(
        name=f'poly{order}',
        inputs=features,
        targets=targets[:, None],
        target_kind=TargetKind.REGRESSION,
        meta={'scale': scale, 'lo': lo, 'hi': hi, 'noise_sd': noise_sd},
    )
    logger.info('Сгенерирован набор %s', dataset.manifest_line())
    return dataset, coefficients


def toy_class_of(points: np.ndarray) -> np.ndarray:
    """Номер класса для точек из [0,1]² по закрученному углу."""
    centered = np.asarray(points) - 0.5
    radius = np.hypot(centered[:, 0], centered[:, 1])
    angle = np.arctan2(centered[:, 1], centered[:, 0]) + TOY_TWIST * radius
    fraction = np.mod(angle, 2.0 * np.pi) / (2.0 * np.pi)
    return np.minimum((fraction * TOY_CLASSES).astype(np.int64), TOY_CLASSES - 1)


def gen_toy_classification(n_points: int, seed: int = 0) -> Dataset:
    """
    Сбалансированная классификация на 3 класса в [0,1]².

    Число точек разных классов отличается не больше чем на 1.
    """
    if n_points < TOY_CLASSES:
        raise ValueError(f'Нужно не меньше {TOY_CLASSES} точек, получено {n_points}')
    rng = Rng(seed)
    wanted = [n_points // TOY_CLASSES + (1 if c < n_points % TOY_CLASSES else 0)
              for c in range(TOY_CLASSES)]
    buckets = [[] for _ in range(TOY_CLASSES)]
    while any(len(b) < w for b, w in zip(buckets, wanted)):
        candidates = rng.uniform((4 * n_points, 2))
        for point, label in zip(candidates, toy_class_of(candidates)):
            if len(buckets[label]) < wanted[label]:
                buckets[label].append(point)

    inputs = np.concatenate([np.array(b).reshape(-1, 2) for b in buckets])
    targets = np.concatenate([np.full(w, c, dtype=np.int64) for c, w in enumerate(wanted)])
    order = rng.permutation(n_points)
    return Dataset(name='toy', inputs=inputs[order], targets=targets[order],
                   target_kind=TargetKind.CLASSIFICATION, classes=TOY_CLASSES)


def _read_ppm_token(data: bytes, pos: int) -> Tuple[bytes, int]:
    while pos < len(data):
        if data[pos:pos + 1] == b'#':
            while pos < len(data) and data[pos:pos + 1] not in (b'\n', b'\r'):
                pos += 1
        elif data[pos:pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b'#':
        pos += 1
    return data[start:pos], pos


def read_ppm(path: Union[str, Path]) -> np.ndarray:
    """
    Читает двоичный PPM (P6) с 8-битными каналами.

    Returns:
        Массив uint8 формы (H, W, 3)

    Raises:
        UnsupportedFormat: Если формат не P6 или глубина не 8 бит
        MalformedImage: Если заголовок или данные повреждены
    """
    path = Path(path)
    if not path.exists():
        error_msg = f'Файл не найден: {path}'
        logger.error(error_msg)
        raise FileNotFoundError(error_msg)
    data = path.read_bytes()
    magic, pos = _read_ppm_token(data, 0)
    if magic != b'P6':
        error_msg = f'Неподдерживаемый формат изображения: {magic[:8]!r}, ожидается P6'
        logger.error(error_msg)
        raise UnsupportedFormat(error_msg)
    fields = []
    for _ in range(3):
        token, pos = _read_ppm_token(data, pos)
        if not token.isdigit():
            error_msg = f'Повреждённый заголовок PPM: {path}'
            logger.error(error_msg)
            raise MalformedImage(error_msg)
        fields.append(int(token))
    width, height, maxval = fields
    if maxval != 255:
        error_msg = f'Поддерживаются только 8-битные PPM, maxval={maxval}'
        logger.error(error_msg)
        raise UnsupportedFormat(error_msg)
    if width < 1 or height < 1:
        raise MalformedImage(f'Пустое изображение: {width}x{height}')
    pos += 1
    payload = data[pos:pos + width * height * 3]
    if len(payload) != width * height * 3:
        error_msg = f'Недостаточно данных пикселей в {path}'
        logger.error(error_msg)
        raise MalformedImage(error_msg)
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path: Union[str, Path], pixels: np.ndarray) -> None:
    """Пишет (H, W, 3) uint8 или float в [0,1] как P6."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        pixels = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    height, width, _ = pixels.shape
    with open(path, 'wb') as f:
        f.write(f'P6\n{width} {height}\n255\n'.encode('ascii'))
        f.write(pixels.tobytes())


def _pixel_coordinates(width: int, height: int) -> np.ndarray:
    cols = np.arange(width) / max(width - 1, 1)
    rows = np.arange(height) / max(height - 1, 1)
    grid_r, grid_c = np.meshgrid(rows, cols, indexing='ij')
    return np.stack([grid_c.ravel(), grid_r.ravel()], axis=1)


def _resample(pixels: np.ndarray, resolution: int) -> np.ndarray:
    height, width, _ = pixels.shape
    if height % resolution == 0 and width % resolution == 0:
        fy, fx = height // resolution, width // resolution
        blocks = pixels.reshape(resolution, fy, resolution, fx, 3).astype(np.float64)
        return np.rint(blocks.mean(axis=(1, 3))).astype(np.uint8)
    rows = (np.arange(resolution) * height) // resolution
    cols = (np.arange(resolution) * width) // resolution
    return pixels[rows][:, cols]


def load_image_regression(path: Union[str, Path], resolution: Optional[int] = None) -> Dataset:
    """
    Набор для регрессии изображения: координата пикселя -> RGB.

    Args:
        path: Путь к P6-изображению
        resolution: Сторона квадратного обучающего изображения; None оставляет исходный размер

    Returns:
        Dataset с входами в [0,1]² и целями в [0,1]³, N = ширина·высота
    """
    pixels = read_ppm(path)
    if resolution is not None and pixels.shape[:2] != (resolution, resolution):
        pixels = _resample(pixels, resolution)
    height, width, _ = pixels.shape
    dataset = Dataset(
        name='image',
        inputs=_pixel_coordinates(width, height),
        targets=pixels.reshape(-1, 3).astype(np.float64) / 255.0,
        target_kind=TargetKind.REGRESSION,
        meta={'width': float(width), 'height': float(height)},
    )
    logger.info('Загружено изображение %s: %s', path, dataset.manifest_line())
    return dataset


def image_pixels(values: np.ndarray, width: int, height: int) -> np.ndarray:
    """Переводит N×3 значения в [0,1] обратно в (H, W, 3) uint8."""
    return np.clip(np.rint(np.asarray(values) * 255.0), 0, 255).astype(np.uint8).reshape(height, width, 3)


def render_image_dataset(dataset: Dataset, path: Union[str, Path]) -> None:
    """Записывает цели набора регрессии изображения обратно в PPM."""
    width, height = int(dataset.meta['width']), int(dataset.meta['height'])
    write_ppm(path, image_pixels(dataset.targets, width, height))


def gen_synthetic_image(path: Union[str, Path], size: int = 64, seed: int = 0) -> Path:
    """Процедурное изображение с мелкими деталями для экспериментов без внешних данных."""
    rng = Rng(seed)
    coords = _pixel_coordinates(size, size)
    x, y = coords[:, 0], coords[:, 1]
    channels = []
    for _ in range(3):
        fx, fy, phase = 2.0 + 10.0 * rng.uniform(3)
        value = 0.5 + 0.25 * np.sin(2 * np.pi * fx * x + phase) * np.cos(2 * np.pi * fy * y)
        value += 0.2 * (np.hypot(x - rng.uniform(), y - rng.uniform()) < 0.2)
        channels.append(value)
    pixels = np.clip(np.stack(channels, axis=1), 0.0, 1.0)
    path = Path(path)
    write_ppm(path, image_pixels(pixels, size, size))
    return path


def _open_idx(path: Path):
    return gzip.open(path, 'rb') if path.suffix == '.gz' else open(path, 'rb')


def read_idx(path: Union[str, Path], magic: int) -> np.ndarray:
    """
    Читает IDX-файл (big-endian размерности, uint8 данные).

    Raises:
        MalformedIdx: Неверное магическое число или усечённые данные
    """
    path = Path(path)
    if not path.exists():
        error_msg = f'Файл не найден: {path}'
        logger.error(error_msg)
        raise FileNotFoundError(error_msg)
    with _open_idx(path) as f:
        data = f.read()
    if len(data) < 4:
        raise MalformedIdx(f'Файл {path} слишком короткий')
    found, = struct.unpack('>I', data[:4])
    if found != magic:
        error_msg = f'Магическое число {found:#010x} в {path}, ожидалось {magic:#010x}'
        logger.error(error_msg)
        raise MalformedIdx(error_msg)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise MalformedIdx(f'Усечённый заголовок в {path}')
    dims = struct.unpack(f'>{ndim}I', data[4:header])
    expected = int(np.prod(dims))
    if len(data) - header != expected:
        error_msg = f'Ожидалось {expected} байт данных в {path}, получено {len(data) - header}'
        logger.error(error_msg)
        raise MalformedIdx(error_msg)
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def load_idx_subset(images_path: Union[str, Path], labels_path: Union[str, Path],
                    n_take: int, seed: int = 0, name: str = 'idx',
                    classes: Optional[int] = None) -> Dataset:
    """
    Стратифицированное подмножество IDX-набора (MNIST-формат).

    Пиксели масштабируются в [0,1] и разворачиваются в вектор. Число классов
    берётся из файла меток (наибольшая метка + 1), если не задано явно;
    явное значение нужно, чтобы оценочный набор совпадал по выходу с обучающим.

    Raises:
        EmptySubset: Если n_take = 0
        LabelImageCountMismatch: Если число меток не равно числу изображений
        InvalidTarget: Если метка не меньше заданного числа классов
    """
    if n_take <= 0:
        error_msg = 'Запрошено пустое подмножество'
        logger.error(error_msg)
        raise EmptySubset(error_msg)
    images = read_idx(images_path, IDX_IMAGE_MAGIC)
    labels = read_idx(labels_path, IDX_LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        error_msg = f'Изображений {images.shape[0]}, меток {labels.shape[0]}'
        logger.error(error_msg)
        raise LabelImageCountMismatch(error_msg)
    if n_take > images.shape[0]:
        raise IndexOutOfRange(f'Запрошено {n_take} примеров из {images.shape[0]}')

    present = int(labels.max()) + 1
    if classes is None:
        classes = present
    elif present > classes:
        error_msg = f'Метка {present - 1} вне диапазона [0, {classes}) в {labels_path}'
        logger.error(error_msg)
        raise InvalidTarget(error_msg)

    rng = Rng(seed)
    pools = [list(rng.permutation(np.flatnonzero(labels == c))) for c in range(present)]
    chosen = []
    while len(chosen) < n_take:
        for pool in pools:
            if pool and len(chosen) < n_take:
                chosen.append(pool.pop(0))
    chosen = np.array(sorted(chosen), dtype=np.int64)

    return Dataset(
        name=name,
        inputs=images[chosen].reshape(len(chosen), -1).astype(np.float64) / 255.0,
        targets=labels[chosen].astype(np.int64),
        target_kind=TargetKind.CLASSIFICATION,
        classes=classes,
        meta={'rows': float(images.shape[1]), 'cols': float(images.shape[2])},
    )
