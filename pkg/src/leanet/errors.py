"""Exception hierarchy shared by every module of the package."""


class LeaNetError(Exception):
    """Base class for domain errors; ``module`` names the raising subsystem."""

    module = "leanet"

    def __init__(self, message, module=None):
        super().__init__(message)
        if module is not None:
            self.module = module


class ValidationError(LeaNetError, ValueError):
    pass


class ShapeError(ValidationError):
    module = "tensor"


class SpecError(ValidationError):
    module = "netspec"


class ColorError(ValidationError):
    module = "colorlab"


class MapError(ValidationError):
    module = "anomap"


class ModelError(ValidationError):
    module = "leanet"


class HarnessError(ValidationError):
    module = "harness"


class CheckpointError(LeaNetError, IOError):
    module = "checkpoint"
