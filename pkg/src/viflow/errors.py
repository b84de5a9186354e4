"""Exception hierarchy shared across the package."""


class VIFlowError(Exception):
    pass


class ShapeError(VIFlowError, ValueError):
    pass


class InvalidDimensionError(VIFlowError, ValueError):
    pass


class InvalidParameterError(VIFlowError, ValueError):
    pass


class InvalidPoseError(VIFlowError, ValueError):
    pass


class ContractError(VIFlowError, ValueError):
    """A precondition of an operation was violated by the caller."""


class ConfigError(VIFlowError, ValueError):
    pass


class RenderError(VIFlowError, RuntimeError):
    pass


class DivergenceError(VIFlowError, RuntimeError):
    pass


class FormatError(VIFlowError, ValueError):
    """Malformed binary file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
