"""Exception types raised across the package."""


class MKTNError(Exception):
    pass


class MissingFile(MKTNError):
    pass


class ShapeMismatch(MKTNError, ValueError):
    pass


class BadTimestamps(MKTNError, ValueError):
    pass


class InvalidConfig(MKTNError, ValueError):
    pass


class NonSquare(MKTNError, ValueError):
    pass


class IndexOutOfRange(MKTNError, IndexError):
    pass


class NonFiniteLoss(MKTNError, FloatingPointError):
    """Raised when a loss component is NaN or infinite.

    ``component`` names the offending term so callers can report which
    part of the objective diverged.
    """

    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite loss in component {component!r}: {value}")
        self.component = component
        self.value = value


# total_loss raises the same error; the alias keeps both names importable.
NonFinite = NonFiniteLoss


class GradMismatch(MKTNError, AssertionError):
    def __init__(self, path: str, analytic: float, numeric: float, error: float):
        super().__init__(
            f"gradient mismatch at {path}: analytic={analytic:.6e} "
            f"numeric={numeric:.6e} rel_err={error:.3e}"
        )
        self.path = path
        self.analytic = analytic
        self.numeric = numeric
        self.error = error
