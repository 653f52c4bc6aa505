"""Exception hierarchy shared by every flowmaps module."""


class FlowMapsError(Exception):
    """Base class for all library errors."""


class ConfigurationError(FlowMapsError, ValueError):
    """Invalid configuration or hyperparameters."""


class DomainError(FlowMapsError, ValueError):
    """An argument lies outside the domain of an operation."""


class DimensionError(FlowMapsError, ValueError):
    """Tensor shapes are incompatible for an operation."""


class ContractError(FlowMapsError, RuntimeError):
    """A call violated an operation's usage contract."""


class CapacityError(FlowMapsError, ValueError):
    """A scene has more elements than the token budget allows."""


class FormatError(FlowMapsError, ValueError):
    """A file has the wrong magic, format name or version."""


class ParseError(FormatError):
    """A record in a line-oriented file could not be parsed."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class NonFiniteError(FlowMapsError, FloatingPointError):
    """A NaN or infinity showed up where finite values are required."""


class IntegrationError(NonFiniteError):
    """The velocity field produced a non-finite value during integration."""

    def __init__(self, t: float, message: str = "non-finite velocity"):
        super().__init__(f"{message} at t={t:.6g}")
        self.t = t
