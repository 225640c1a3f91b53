import logging
import sys
from pythonjsonlogger import jsonlogger
from app.core.config import settings


def setup_logging(level: str | None = None):
    # stderr keeps CLI stdout byte-stable for report diffing
    log_handler = logging.StreamHandler(sys.stderr)

    formatter = jsonlogger.JsonFormatter(
        "%(asctime)s %(levelname)s %(name)s %(message)s"
    )

    log_handler.setFormatter(formatter)

    root_logger = logging.getLogger()
    root_logger.setLevel((level or settings.LOG_LEVEL).upper())
    root_logger.handlers = [log_handler]
