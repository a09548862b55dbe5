"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class PanoganError(Exception):
    exit_code = 1


class ConfigError(PanoganError):
    exit_code = 2


class InvalidInputError(PanoganError, ValueError):
    exit_code = 3


class FormatError(InvalidInputError):
    """Unreadable, truncated, corrupted or wrong-version file."""


class TrainingDivergedError(PanoganError):
    exit_code = 4

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class UndefinedMetricError(PanoganError, ValueError):
    exit_code = 5
