import logging
import os
import sys
from logging.handlers import TimedRotatingFileHandler

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


def setup_logging(log_file=None, level=None):
    """Configure the root logger with a 7-day rotating file and the console.

    Only the entry point calls this; library modules just use getLogger(__name__).
    """
    log_file = log_file or os.getenv("ERGODIC_LOG_FILE", "ergodic.log")
    level = (level or os.getenv("ERGODIC_LOG_LEVEL", "INFO")).upper()

    root = logging.getLogger()
    root.setLevel(getattr(logging, level, logging.INFO))
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()

    formatter = logging.Formatter(LOG_FORMAT)

    # Rotates at midnight, keeps 7 days
    file_handler = TimedRotatingFileHandler(log_file, when='midnight', interval=1, backupCount=7)
    file_handler.setFormatter(formatter)

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setFormatter(formatter)

    root.addHandler(file_handler)
    root.addHandler(console_handler)
    return root
