from typing import Optional, Sequence, Tuple


class VolterraError(Exception):
    """Base class for all errors raised by fbm_volterra"""


class ConfigError(VolterraError, ValueError):
    """Invalid parameter or configuration field"""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"Invalid '{field}': {message}")


class GridMismatchError(VolterraError, ValueError):
    """Two objects that must share a time grid do not"""


class QuadratureError(VolterraError, ArithmeticError):
    """Quadrature did not converge on some cells"""

    def __init__(self, message: str, cells: Sequence[Tuple[int, int]] = ()):
        self.cells = list(cells)
        super().__init__(message)


class SingularMatrixError(VolterraError, ArithmeticError):
    """Factorization or triangular solve hit a (numerically) singular matrix"""

    def __init__(self, message: str, pivot: Optional[int] = None,
                 smallest_eigenvalue: Optional[float] = None,
                 condition_number: Optional[float] = None):
        self.pivot = pivot
        self.smallest_eigenvalue = smallest_eigenvalue
        self.condition_number = condition_number
        super().__init__(message)


class NonFiniteDriftError(VolterraError, FloatingPointError):
    """A drift or estimator produced NaN/inf during stepping"""

    def __init__(self, step: int, what: str = "drift"):
        self.step = step
        super().__init__(f"Non-finite {what} value at step {step}")


class EntropyEstimationError(VolterraError, RuntimeError):
    """Too many Monte Carlo samples had to be excluded"""


class AcceptanceError(VolterraError):
    """An experiment finished but missed its acceptance threshold"""
