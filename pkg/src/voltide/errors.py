"""Exception hierarchy shared by all pipeline stages.

The CLI maps each family onto a process exit code.
"""


class VoltideError(Exception):
    exit_code = 1


class ConfigError(VoltideError):
    """Invalid or inconsistent run configuration."""

    exit_code = 2

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class DataValidationError(VoltideError):
    """Input data violates a schema or domain invariant."""

    exit_code = 3


class CalendarGapError(DataValidationError):
    def __init__(self, asset_id: str, missing_date):
        self.missing_date = missing_date
        super().__init__(f"{asset_id}: calendar gap, missing {missing_date}")


class NumericalError(VoltideError):
    """A numerical routine failed (non-convergence, degenerate input)."""

    exit_code = 4

    def __init__(self, message: str, stage: str | None = None, date=None):
        self.stage = stage
        self.date = date
        where = ", ".join(str(p) for p in (stage, date) if p is not None)
        super().__init__(f"{message} [{where}]" if where else message)


class DegenerateInputError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    def __init__(self, message: str, best_loglik: float, **kw):
        self.best_loglik = best_loglik
        super().__init__(f"{message} (best log-likelihood {best_loglik:.6g})", **kw)
