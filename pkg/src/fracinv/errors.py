"""Exception hierarchy shared by the solver modules and the CLI."""


class FracInvError(Exception):
    """Base class for all package errors."""


class GridError(FracInvError, ValueError):
    """Grid resolution or region layout is inconsistent."""


class SolverError(FracInvError):
    """Interior linear system could not be factorized or solved.

    Raised when ``(-Delta)^s + q`` restricted to the interior is singular,
    i.e. 0 is (numerically) a Dirichlet eigenvalue of the operator for the
    given potential, so the exterior-value problem is not well posed.
    """

    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"{message} (at CG iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class OracleError(FracInvError):
    """Adaptive quadrature in the reference oracle did not converge."""

    def __init__(self, message, value, abserr):
        super().__init__(f"{message}: value={value!r}, achieved abserr={abserr:.3e}")
        self.value = value
        self.abserr = abserr


class ConfigError(FracInvError, ValueError):
    """Experiment configuration is invalid."""
