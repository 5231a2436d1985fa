"""
Exception hierarchy for the grid-cell mean-field laboratory
Validation problems are ValueErrors; numerical failures are RuntimeErrors
"""

from typing import Optional, Tuple


class LabError(Exception):
    """Base class for every error raised by the laboratory"""


class ValidationError(LabError, ValueError):
    """Invalid parameters, configuration or inputs"""

    def __init__(self, message: str, field_name: Optional[str] = None):
        super().__init__(message)
        self.field_name = field_name


class NumericalError(LabError, RuntimeError):
    """A computation produced an unusable result"""


class NonFiniteValueError(NumericalError):
    """A coefficient or state component became NaN or infinite"""

    def __init__(self, component: int, context: str = "", index: Optional[Tuple[int, ...]] = None):
        message = f"Non-finite value in component {component}"
        if context:
            message = f"{message} ({context})"
        super().__init__(message)
        self.component = component
        self.context = context
        self.index = index


class QuadratureError(NumericalError):
    """Adaptive quadrature did not reach its tolerance"""


class FactorizationError(NumericalError):
    """Covariance factorization failed even after maximal jitter"""

    def __init__(self, message: str, min_eigenvalue: float):
        super().__init__(f"{message} (smallest eigenvalue estimate {min_eigenvalue:.3e})")
        self.min_eigenvalue = min_eigenvalue


class CFLViolationError(NumericalError):
    """The PDE time step exceeds the stability bound at some cell"""

    def __init__(self, dt: float, dt_max: float, cell: Tuple[int, ...]):
        super().__init__(
            f"Time step {dt:.3e} exceeds stability bound {dt_max:.3e} at cell {cell}"
        )
        self.dt = dt
        self.dt_max = dt_max
        self.cell = cell


class MassDriftError(NumericalError):
    """A conservative update lost or created probability mass"""


class SimulationError(NumericalError):
    """A particle step failed; carries the (i, k, n) position"""

    def __init__(self, message: str, column: int = -1, particle: int = -1, step: int = -1):
        super().__init__(f"{message} at node {column}, particle {particle}, step {step}")
        self.column = column
        self.particle = particle
        self.step = step


class TransportError(NumericalError):
    """Optimal transport could not be solved within budget"""
