"""Exception hierarchy shared across the toolkit.

Each class carries the process exit code the command-line front end maps it to.
"""


class AdlError(Exception):
    exit_code = 1


class ConfigError(AdlError, ValueError):
    """Invalid user-supplied configuration or parameter value."""

    exit_code = 2


class ParameterDomainError(ConfigError):
    pass


class DegenerateNoiseError(ConfigError):
    pass


class ConversionError(ConfigError):
    pass


class DataError(AdlError, ValueError):
    """Malformed or invalid input data."""

    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class RankError(DataError):
    def __init__(self, message, effective_rank=None):
        super().__init__(message)
        self.effective_rank = effective_rank


class NumericalError(AdlError, ArithmeticError):
    exit_code = 4


class DivergenceError(NumericalError):
    """Raised when an integrator produces a non-finite or runaway state."""

    def __init__(self, message, step=None, last_state=None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step
        self.last_state = last_state


class StructureViolationError(NumericalError):
    pass


class SingularOperatorError(NumericalError):
    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class EnvelopeError(NumericalError):
    pass
