"""Exception hierarchy shared by the library and the CLI.

Each subclass carries the process exit code the CLI maps it to.
"""


class FairclustError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(FairclustError):
    """Invalid configuration: bad hyperparameters, malformed config files,
    inconsistent sections (e.g. a sub-cluster count that does not divide the
    neighborhood size)."""

    exit_code = 2


class DataError(FairclustError):
    """Invalid or unreadable data: parse failures, truncation, non-finite
    values, missing labels.

    Optional context (path, 1-based line, byte offset) is folded into the
    message so CLI output names the exact failure location.
    """

    exit_code = 3

    def __init__(self, message, *, path=None, line=None, offset=None):
        parts = []
        if path is not None:
            parts.append(f"path={path}")
        if line is not None:
            parts.append(f"line={line}")
        if offset is not None:
            parts.append(f"byte={offset}")
        if parts:
            message = f"{message} ({', '.join(parts)})"
        super().__init__(message)
        self.path = path
        self.line = line
        self.offset = offset


class NumericError(FairclustError):
    """Numeric failure during optimization, e.g. a non-finite gradient."""

    exit_code = 4
