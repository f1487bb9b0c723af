"""Exception hierarchy shared across the package."""


class TrafficSemError(Exception):
    """Base class for all package errors."""


class UnsupportedFormatError(TrafficSemError):
    pass


class CorruptCaptureError(TrafficSemError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class SchemaError(TrafficSemError):
    def __init__(self, column):
        super().__init__(f"missing mapped column: {column!r}")
        self.column = column


class RowError(TrafficSemError):
    def __init__(self, row, message):
        super().__init__(f"row {row}: {message}")
        self.row = row


class TemplateError(TrafficSemError):
    def __init__(self, placeholder):
        super().__init__(f"template placeholder has no value: {placeholder!r}")
        self.placeholder = placeholder


class ProviderError(TrafficSemError):
    """Raised by text/concept providers. ``original`` carries the input text."""

    def __init__(self, message, original=None):
        super().__init__(message)
        self.original = original


class ShapeError(TrafficSemError):
    def __init__(self, expected, got):
        super().__init__(f"dimension mismatch: expected {expected}, got {got}")
        self.expected = expected
        self.got = got


class ConfigError(TrafficSemError):
    pass


class GraphError(TrafficSemError):
    pass


class TrainingError(TrafficSemError):
    def __init__(self, step, message, norms=None):
        detail = f"step {step}: {message}"
        if norms:
            detail += " | param norms: " + ", ".join(f"{k}={v:.4g}" for k, v in norms.items())
        super().__init__(detail)
        self.step = step
        self.norms = norms or {}


class UndefinedMetricError(TrafficSemError):
    pass


class StageError(TrafficSemError):
    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


class ReportError(TrafficSemError):
    def __init__(self, missing):
        super().__init__(f"missing artifact: {missing}")
        self.missing = missing
