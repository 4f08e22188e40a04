"""Exception types shared across the package."""


class AttrGAUError(Exception):
    """Base class for all package errors."""


class ShapeError(AttrGAUError, ValueError):
    pass


class DegenerateRowError(AttrGAUError, ValueError):
    """A row with (near) zero norm was passed to a normalizing operation."""


class ConfigError(AttrGAUError, ValueError):
    pass


class IngestionError(AttrGAUError, ValueError):
    """Malformed input file or out-of-range identifiers."""


class GraphConstructionError(AttrGAUError, ValueError):
    pass


class DatasetError(AttrGAUError, ValueError):
    pass


class TrainingDivergedError(AttrGAUError, RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
