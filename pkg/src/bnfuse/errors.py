"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(EngineError, ValueError):
    """Tensor or parameter shapes are inconsistent with an operation's contract."""


class InvalidRangeError(EngineError, ValueError):
    """A numeric argument falls outside its permitted range."""


class InvalidSpecError(EngineError, ValueError):
    """A model spec or run config is internally inconsistent."""


class StateError(EngineError, RuntimeError):
    """An operation was invoked before its required state was produced
    (e.g. backward without a saved forward activation)."""
