"""Логирование и отчёты об ошибках в Sentry."""

import logging

import sentry_sdk
from rich.logging import RichHandler

from config import LOG_LEVEL, SENTRY_DSN


def setup_logging(level: str = LOG_LEVEL) -> None:
    """
    Настраивает корневой логгер с выводом через rich.

    Args:

        level (str): Уровень логирования (DEBUG, INFO, WARNING...).
    """
    logging.basicConfig(
        level=level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(rich_tracebacks=True, show_path=False)],
        force=True,
    )


def init_sentry(dsn: str = SENTRY_DSN) -> bool:
    """
    Подключает Sentry, если задан DSN.

    Returns:

        bool: True, если Sentry инициализирован.
    """
    if not dsn:
        return False
    sentry_sdk.init(
        dsn=dsn,
        traces_sample_rate=1.0,
    )
    return True


def report_exception(ex: BaseException) -> None:
    """Отправляет исключение в Sentry (без DSN вызов ничего не делает)."""
    sentry_sdk.capture_exception(ex)
