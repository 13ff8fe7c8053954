"""
Logging Setup Module
Console and file logging for the command-line tools
"""

import logging
from pathlib import Path
from typing import Optional

LOG_FILE = 'animator.log'
LOG_FORMAT = '%(asctime)s %(levelname)-7s %(name)s: %(message)s'


def configure_logging(level: str = 'INFO', log_dir: Optional[str] = 'logs') -> logging.Logger:
    """
    Configure the root logger once per process

    Args:
        level: Level name (DEBUG, INFO, ...)
        log_dir: Directory for animator.log; None logs to the console only

    Returns:
        logging.Logger: The root logger
    """
    numeric = logging.getLevelName(str(level).upper())
    if not isinstance(numeric, int):
        numeric = logging.INFO

    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, '_animator', False):
            root.removeHandler(handler)
            handler.close()

    handlers = [logging.StreamHandler()]
    if log_dir is not None:
        Path(log_dir).mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(Path(log_dir) / LOG_FILE, encoding='utf-8'))

    formatter = logging.Formatter(LOG_FORMAT, datefmt='%H:%M:%S')
    for handler in handlers:
        handler.setFormatter(formatter)
        handler._animator = True
        root.addHandler(handler)
    root.setLevel(numeric)

    # PIL logs every PNG chunk at DEBUG
    logging.getLogger('PIL').setLevel(logging.WARNING)
    return root
