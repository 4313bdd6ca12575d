from __future__ import annotations

import logging

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s [param=%(parameter)s] %(message)s"


class _ContextFilter(logging.Filter):
    """Inject a parameter name into every record (fallback: '-')."""

    def filter(self, record: logging.LogRecord) -> bool:
        if not hasattr(record, "parameter"):
            record.parameter = "-"
        return True


class ParameterAdapter(logging.LoggerAdapter):
    def process(self, msg, kwargs):
        extra = kwargs.setdefault("extra", {})
        extra.setdefault("parameter", self.extra.get("parameter", "-"))
        return msg, kwargs


def for_parameter(logger: logging.Logger, name: str | None) -> ParameterAdapter:
    return ParameterAdapter(logger, {"parameter": name or "-"})


def setup_logging(verbose: bool = False, level: str = "INFO") -> None:
    root = logging.getLogger()
    root.setLevel(logging.DEBUG if verbose else getattr(logging, level, logging.INFO))
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
    for handler in root.handlers:
        if not any(isinstance(f, _ContextFilter) for f in handler.filters):
            handler.addFilter(_ContextFilter())
