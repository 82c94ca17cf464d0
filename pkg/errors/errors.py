"""Исключения проекта.

Каждый класс несёт `exit_code`, который CLI превращает в код возврата
процесса: 2 конфигурация, 3 данные/обучение, 4 отказ, 5 совместимость.
"""

from typing import Any, Optional


class SelfAugError(Exception):
    """Базовое исключение проекта."""
    exit_code: int = 1


class ConfigError(SelfAugError):
    """Конфигурация не прошла валидацию схемы."""
    exit_code = 2

    def __init__(self, message: str, field_path: Optional[str] = None):
        self.field_path = field_path
        if field_path:
            message = f"{field_path}: {message}"
        super().__init__(message)


class ArgumentError(SelfAugError, ValueError):
    """Нарушено предусловие операции."""
    exit_code = 3


class DataError(SelfAugError):
    """Ошибки загрузки и подготовки данных."""
    exit_code = 3


class LoadError(DataError):
    """Файл или каталог набора данных отсутствует или повреждён."""

    def __init__(self, message: str, path: Any = None):
        self.path = path
        if path is not None:
            message = f"{message} ({path})"
        super().__init__(message)


class SchemaError(DataError):
    """Набор данных противоречив (классы, метки, идентификаторы)."""


class SplitError(DataError):
    """Стратифицированное разбиение невозможно."""


class DegenerateInputError(DataError):
    """Паттерн вырожден: нулевая протяжённость, пустое изображение."""


class DatasetQualityError(DataError):
    """Отброшено слишком много паттернов при самоаугментации."""


class StateError(SelfAugError):
    """Нарушено состояние модели (не инициализирована, заморозка)."""
    exit_code = 3


class NumericError(SelfAugError):
    """Нечисловое значение в функции потерь."""
    exit_code = 3

    def __init__(self, message: str, term: Optional[str] = None):
        self.term = term
        super().__init__(message)


class TrainingAbort(SelfAugError):
    """Обучение прервано; `record` содержит диагностическую запись эпохи."""
    exit_code = 3

    def __init__(self, message: str, record: Any = None):
        self.record = record
        super().__init__(message)


class RefusalError(SelfAugError):
    """Команда отказалась перезаписать существующий результат."""
    exit_code = 4


class CompatibilityError(SelfAugError):
    """Чекпоинт несовместим с конфигурацией или данными."""
    exit_code = 5


class ShapeError(CompatibilityError, ValueError):
    """Форма тензора не совпадает с ожидаемой."""

    def __init__(self, message: str, expected: Any = None, actual: Any = None):
        self.expected = expected
        self.actual = actual
        if expected is not None or actual is not None:
            message = f"{message}: ожидалось {expected}, получено {actual}"
        super().__init__(message)


class CorruptCheckpointError(CompatibilityError):
    """Манифест или буфер чекпоинта повреждён."""


class VersionError(CompatibilityError):
    """Версия формата чекпоинта не поддерживается."""
