"""Exception hierarchy shared by every engine."""


class PlisimError(Exception):
    """Base class for all errors raised by plisim."""


class EvaluationError(PlisimError):
    """A coefficient function or derivative produced a non-finite entry."""


class InputRangeError(PlisimError, ValueError):
    """An input signal was evaluated outside its horizon."""


class AlignmentError(PlisimError, ValueError):
    """Two traces do not share the same sample grid."""


class DivergenceError(PlisimError):
    """The integrated state became non-finite.

    Attributes
    ----------
    time : float
        First sample time at which a non-finite state was observed.
    """

    def __init__(self, message, time=float("nan")):
        super().__init__(message)
        self.time = time


class StiffnessError(PlisimError):
    """The adaptive solver's step size underflowed."""

    def __init__(self, message, time=float("nan")):
        super().__init__(message)
        self.time = time


class ConstructionError(PlisimError, ValueError):
    """Shapes or parameters are inconsistent at construction time."""


class ConfigurationError(PlisimError, ValueError):
    """A configuration record or file failed validation.

    Attributes
    ----------
    line : int or None
        1-based line number in the source file, when known.
    """

    def __init__(self, message, line=None, source=None):
        self.line = line
        self.source = source
        loc = ""
        if source is not None and line is not None:
            loc = f"{source}:{line}: "
        elif line is not None:
            loc = f"line {line}: "
        super().__init__(loc + message)


class FitError(PlisimError):
    """DMD identification could not be performed on the supplied data."""
