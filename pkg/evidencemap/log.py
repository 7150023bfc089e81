import json
import logging
from datetime import datetime

# Named package logger; modules log through getLogger(__name__) children.
logger = logging.getLogger("evidencemap")

VALID_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]

# Run context passed through `extra=`; copied to JSON lines when present
CONTEXT_FIELDS = ("record_id", "epoch", "step", "arm")


class JsonFormatter(logging.Formatter):
    """JSON lines with the run context (record, epoch, step, ablation arm) as top-level keys."""

    def format(self, record: logging.LogRecord) -> str:
        log_obj = {
            "timestamp": datetime.fromtimestamp(record.created).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "module": record.module,
            "function": record.funcName,
            "line": record.lineno,
        }
        for name in CONTEXT_FIELDS:
            value = getattr(record, name, None)
            if value is not None:
                log_obj[name] = value
        if record.exc_info:
            log_obj["exception"] = self.formatException(record.exc_info)
        return json.dumps(log_obj)


def configure_logging(level_name: str = "INFO", json_format: bool = False) -> None:
    """Configure the package logger with a single console handler."""
    level = getattr(logging, (level_name or "").upper(), None)
    unknown = not isinstance(level, int)
    if unknown:
        level = logging.INFO

    logger.setLevel(level)
    logger.handlers.clear()
    logger.propagate = False

    console_handler = logging.StreamHandler()
    if json_format:
        console_handler.setFormatter(JsonFormatter())
    else:
        console_handler.setFormatter(logging.Formatter(
            "%(asctime)s [%(levelname)s] %(name)s - %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S",
        ))
    logger.addHandler(console_handler)
    logging.captureWarnings(True)

    # Reduce noise from other libraries
    for noisy in ("requests", "urllib3", "transformers", "sentence_transformers"):
        logging.getLogger(noisy).setLevel(logging.WARNING)

    if unknown:
        logger.warning("Unknown LOG_LEVEL '%s'; defaulting to INFO", level_name)
