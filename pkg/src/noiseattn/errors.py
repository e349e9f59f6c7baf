"""Exception taxonomy shared across the package."""


class NoiseAttnError(Exception):
    """Base class for all package errors."""


class ConfigError(NoiseAttnError, ValueError):
    """Invalid configuration: bad shapes, ranges, or unknown keys."""


class DataError(NoiseAttnError, ValueError):
    """Invalid data: labels out of range, missing true labels, empty sets."""


class FormatError(NoiseAttnError, ValueError):
    """Malformed on-disk artifact: bad magic, truncation, version skew."""


class UsageError(NoiseAttnError, RuntimeError):
    """API misuse, e.g. backward() before a matching forward()."""


class DivergenceError(NoiseAttnError, RuntimeError):
    """Training produced a non-finite loss."""


class StageError(NoiseAttnError, RuntimeError):
    """A pipeline failure tagged with the stage where it occurred."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
