"""Exception hierarchy shared by all modules."""


class CpfasError(Exception):
    """Base class for package errors."""


class ConfigurationError(CpfasError, ValueError):
    """Invalid parameters, inconsistent shapes or an impossible setup."""


class NumericalDivergenceError(CpfasError, FloatingPointError):
    """A drift evaluation or loss produced non-finite values."""

    def __init__(self, message, t=None, x=None):
        super().__init__(message)
        self.t = t
        self.x = x


class DegenerateTransitionError(ConfigurationError):
    """Transition density requested where the diffusion coefficient is zero."""


class DegenerateWeightsError(CpfasError, ArithmeticError):
    """All particle log-weights are -inf (or NaN)."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class CorruptModelError(CpfasError):
    """Network parameters are non-finite or a checkpoint cannot be decoded."""


class ParseError(CpfasError, ValueError):
    """Malformed input file; carries the offending line number when known."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line is not None:
                loc += f":{line}"
            loc += ": "
        super().__init__(loc + message)
        self.path = path
        self.line = line
