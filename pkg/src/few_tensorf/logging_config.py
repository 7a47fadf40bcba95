import logging
from pathlib import Path
from typing import Optional

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(log_dir: Optional[Path] = None, level: str = "INFO", log_name: str = "fewt.log") -> None:
    """
    Настраивает логирование: файл в каталоге запуска и вывод в консоль

    Args:
        log_dir: Каталог для файла лога (None - только консоль)
        level: Уровень логирования
        log_name: Имя файла лога
    """
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        handlers.insert(0, logging.FileHandler(str(log_dir / log_name), encoding="utf-8"))

    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True
    )
