import logging
from datetime import datetime
from pathlib import Path

import orjson

CONSOLE_FORMAT = "%(asctime)s - app_name: %(name)s - %(levelname)s - %(message)s"


class JsonFormatter(logging.Formatter):
    """One JSON object per record; a dict passed as ``extra={"fields": {...}}`` is merged in."""

    def format(self, record):
        # Format time as ISO 8601
        time_str = datetime.fromtimestamp(record.created).isoformat()

        log_entry = {
            "time": time_str,
            "app_name": record.name,
            "level": record.levelname,
            "message": record.getMessage(),
        }
        fields = getattr(record, "fields", None)
        if isinstance(fields, dict):
            log_entry.update({key: value for key, value in fields.items() if key not in log_entry})
        if record.exc_info:
            log_entry["exception"] = self.formatException(record.exc_info)
        return orjson.dumps(log_entry, option=orjson.OPT_SERIALIZE_NUMPY).decode("utf-8")


class Logger:
    LOG_LEVEL_MAP = {
        "debug": logging.DEBUG,
        "info": logging.INFO,
        "warning": logging.WARNING,
        "error": logging.ERROR,
        "critical": logging.CRITICAL,
        "none": logging.NOTSET,
    }

    def __init__(
        self,
        name: str = "PartAlign",
        log_file: str | Path | None = None,
        file_log_level: str | None = "debug",
        log_level: str = "info",
    ):
        """
        Configure a package logger with a console handler and an optional JSON-lines file handler.

        Module loggers (``logging.getLogger(__name__)``) propagate into the
        logger named ``name``, so configuring the package root once covers
        the whole package. Handlers installed by an earlier ``Logger`` on
        the same name are replaced, which lets consecutive runs in one
        process each write their own run log.

        Args:
            name: Logger name, normally the package name.
            log_file: Path of the run log (e.g. '<out_dir>/run.log'). None disables file logging.
            file_log_level: Level at which records reach the file.
            log_level: Console level.
        """
        self.logger = logging.getLogger(name=name)
        self.log_level = log_level.lower()
        self.file_log_level: str = (
            file_log_level.lower() if file_log_level is not None else "none"
        )

        if self.log_level not in self.LOG_LEVEL_MAP:
            raise ValueError(
                f"log_level must be one of: {', '.join(self.LOG_LEVEL_MAP.keys())}. Got: {self.log_level}"
            )

        if self.file_log_level not in self.LOG_LEVEL_MAP:
            raise ValueError(
                f"file_log_level must be one of: {', '.join(self.LOG_LEVEL_MAP.keys())}. Got: {self.file_log_level}"
            )

        console_log_level = self.LOG_LEVEL_MAP[self.log_level]
        _file_log_level = self.LOG_LEVEL_MAP[self.file_log_level]

        # Select log level
        min_level = min(
            console_log_level, _file_log_level if log_file else logging.CRITICAL
        )
        self.logger.setLevel(level=min_level)
        self.logger.propagate = False

        self.close()

        console_handler = logging.StreamHandler()
        console_handler.setLevel(level=console_log_level)
        console_handler.setFormatter(fmt=logging.Formatter(fmt=CONSOLE_FORMAT))
        self._install(console_handler)

        if log_file is not None:
            log_file_path = Path(log_file)
            log_file_path.parent.mkdir(parents=True, exist_ok=True)
            file_handler = logging.FileHandler(filename=log_file_path)
            # Select level on which the messages will be saved to a file
            file_handler.setLevel(level=_file_log_level)
            file_handler.setFormatter(fmt=JsonFormatter())
            self._install(file_handler)

    def _install(self, handler: logging.Handler) -> None:
        handler._partalign_owned = True
        self.logger.addHandler(hdlr=handler)

    def close(self) -> None:
        """Detach and close the handlers this class installed on the logger."""
        for handler in list(self.logger.handlers):
            if getattr(handler, "_partalign_owned", False):
                self.logger.removeHandler(hdlr=handler)
                handler.close()

    def get_logger(self) -> logging.Logger:
        """Return the configured logger."""
        return self.logger
