"""Exception hierarchy shared by every module of the toolkit."""


class PruneError(Exception):
    """Base class. ``code`` is the machine-parsable tag used by the CLI."""

    code = "error"
    exit_code = 1


class UsageError(PruneError, ValueError):
    code = "usage"
    exit_code = 2


class ShapeError(UsageError):
    code = "shape"


class DomainError(PruneError, ValueError):
    code = "domain"
    exit_code = 3


class NumericError(PruneError, ArithmeticError):
    code = "numeric"
    exit_code = 3


class ConfigurationError(UsageError):
    code = "configuration"


class PlanInconsistencyError(UsageError):
    code = "plan_inconsistency"


class UnsupportedError(PruneError, NotImplementedError):
    code = "unsupported"
    exit_code = 2


class InfeasiblePlanError(PruneError, ValueError):
    code = "infeasible_plan"
    exit_code = 4

    def __init__(self, message, max_achievable_pr=None):
        super().__init__(message)
        self.max_achievable_pr = max_achievable_pr


class ConvergenceError(NumericError):
    code = "no_convergence"


class DegenerateNetworkError(NumericError):
    code = "degenerate_network"


class PruneIOError(PruneError, OSError):
    code = "io"
    exit_code = 2
