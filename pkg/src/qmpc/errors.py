"""Exception types shared across the package."""


class QmpcError(Exception):
    """Base class for qmpc errors."""


class SolverError(QmpcError):
    """A solve did not reach an optimal point.

    Carries the solver status string ("infeasible", "unbounded", "max_iter")
    so callers can branch on the failure mode.
    """

    def __init__(self, status, message=""):
        self.status = status
        super().__init__(message or f"solver failed with status '{status}'")


class DegeneracyError(SolverError):
    """Parametric sensitivity requested at a degenerate (weakly active) solution."""

    def __init__(self, message):
        super().__init__("degenerate", message)


class ConfigError(QmpcError):
    """Invalid or incomplete experiment configuration."""
