"""Exception types shared across the package."""


class RCLabError(Exception):
    """Base class for all library errors."""


class DimensionError(RCLabError, ValueError):
    pass


class ContractError(RCLabError, ValueError):
    """A documented precondition was violated by the caller."""


class EvaluationError(RCLabError, ArithmeticError):
    pass


class ConvergenceError(RCLabError, RuntimeError):
    pass


class SpecError(RCLabError, ValueError):
    pass


class ParseError(RCLabError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EpisodeError(RCLabError, RuntimeError):
    """Raised when a LODO episode cannot be formed or is degenerate."""

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)


class DegenerateEpisodeError(EpisodeError):
    pass


class ReportError(RCLabError, RuntimeError):
    pass
