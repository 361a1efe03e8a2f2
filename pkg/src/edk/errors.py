from __future__ import annotations


class ConfigError(ValueError):
    """Invalid or incomplete configuration."""


class FormatError(ValueError):
    """A file failed header or payload validation.

    ``record`` is the index of the offending record, or ``None`` when the
    problem is in the file header itself.
    """

    def __init__(self, message: str, record: int | None = None):
        self.record = record
        if record is not None:
            message = f"record {record}: {message}"
        super().__init__(message)


class ProtocolError(RuntimeError):
    """Two-stage protocol violation, e.g. extracting with an unfrozen encoder."""
