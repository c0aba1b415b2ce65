"""Exception hierarchy shared by the solvers and the command-line front end."""


class VBRestoreError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(VBRestoreError, ValueError):
    """Array extents are incompatible (message names the offending extents)."""


class SingularSystemError(VBRestoreError, ArithmeticError):
    """A linear system has a (numerically) zero eigenvalue.

    Attributes
    ----------
    frequency : tuple of int or None
        Fourier index of the first vanishing eigenvalue, when the system is
        circulant.
    iteration : int or None
        Outer iteration at which the failure happened, filled in by the
        coordinate-ascent driver.
    """

    def __init__(self, message, frequency=None, iteration=None):
        super().__init__(message)
        self.frequency = frequency
        self.iteration = iteration

    def __str__(self):
        msg = super().__str__()
        if self.iteration is not None:
            msg = f"{msg} (iteration {self.iteration})"
        return msg


class ConvergenceError(VBRestoreError, ArithmeticError):
    """An inner iterative solver stopped before reaching its tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class FamilyMismatchError(VBRestoreError, TypeError):
    """Two factors from different families were compared."""


class InvalidStateError(VBRestoreError, ValueError):
    """A factor state does not match the model it is used with."""


class PriorError(VBRestoreError, ValueError):
    """Prior constants are too weak for the requested point estimate."""


class ConfigError(VBRestoreError, ValueError):
    """A configuration value is missing or malformed."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
