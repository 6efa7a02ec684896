from typing import Optional


class MisgradError(ValueError):
    """Базовая ошибка библиотеки."""


class NonFiniteInput(MisgradError):
    """Во входных данных найдены NaN или Inf."""


class SingularSystem(MisgradError):
    """Линейная система вырождена даже после повышения регуляризации."""


class ShapeMismatch(MisgradError):
    """Размерности не согласованы."""


class InvalidTarget(MisgradError):
    """Индекс класса вне допустимого диапазона."""


class NonFiniteGradient(MisgradError):
    """Градиент содержит NaN или Inf."""


class IndexOutOfRange(MisgradError):
    """Индекс элемента данных или узла вне диапазона."""


class NonFiniteImportance(MisgradError):
    """Значение важности содержит NaN или Inf."""


class AllZeroImportance(MisgradError):
    """Все значения важности равны нулю, нормализация невозможна."""


class ZeroProbabilitySample(MisgradError):
    """Выбранный элемент имеет нулевую вероятность."""


class AllTechniquesZero(MisgradError):
    """Все распределения дают нулевую вероятность для элемента."""


class MalformedImage(MisgradError):
    """Повреждённый PPM-файл."""


class UnsupportedFormat(MisgradError):
    """Неподдерживаемый формат изображения."""


class MalformedIdx(MisgradError):
    """Повреждённый IDX-файл."""


class LabelImageCountMismatch(MisgradError):
    """Число меток не совпадает с числом изображений."""


class EmptySubset(MisgradError):
    """Запрошено пустое подмножество данных."""


class TaskMismatch(MisgradError):
    """Файлы метрик относятся к разным задачам."""


class ConfigParse(MisgradError):
    """Ошибка разбора конфигурации."""

    def __init__(self, message: str, key_path: Optional[str] = None):
        super().__init__(message)
        self.key_path = key_path


class ConfigInvalid(MisgradError):
    """Конфигурация нарушает ограничение."""

    def __init__(self, constraint: str, details: Optional[str] = None):
        message = constraint if not details else f'{constraint}: {details}'
        super().__init__(message)
        self.constraint = constraint


class TrainingError(MisgradError):
    """Ошибка во время обучения с указанием эпохи и шага."""

    def __init__(self, message: str, epoch: int, step: int):
        super().__init__(f'Эпоха {epoch}, шаг {step}: {message}')
        self.epoch = epoch
        self.step = step
