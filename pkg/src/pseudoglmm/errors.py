"""Exception types shared across the pipeline.

The CLI maps ``ValidationError`` to exit code 1 and ``NumericalError`` to
exit code 2.
"""


class ValidationError(ValueError):
    """Input data or a summary file violates a structural requirement."""


class NumericalError(RuntimeError):
    """A solver or fitter failed to produce a finite, converged answer."""

    def __init__(self, message: str, best_residual: float | None = None):
        super().__init__(message)
        self.best_residual = best_residual
