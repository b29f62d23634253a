"""Exception types raised by peakflow.

Every error carries a short machine-readable ``tag`` so that drivers (the CLI
in particular) can map failures onto exit codes without string matching.
"""


class PeakflowError(Exception):
    """Base class for all library errors."""

    tag = "error"
    exit_code = 2


class InvalidParameters(PeakflowError, ValueError):
    tag = "invalid_parameters"
    exit_code = 1


class ConfigError(PeakflowError, ValueError):
    tag = "config_error"
    exit_code = 1


# ground state
class IntegrationDiverged(PeakflowError):
    tag = "integration_diverged"


class NoGroundStateBracket(PeakflowError):
    tag = "no_ground_state_bracket"


class TailUnresolved(PeakflowError):
    tag = "tail_unresolved"


# grids and functionals
class NumericalOverflow(PeakflowError, FloatingPointError):
    tag = "numerical_overflow"


class DegenerateField(PeakflowError):
    tag = "degenerate_field"


# peaks
class ResolutionError(PeakflowError):
    tag = "resolution_error"
    exit_code = 1


class CentreNotFound(PeakflowError):
    tag = "centre_not_found"


class CentreNotConverged(PeakflowError):
    tag = "centre_not_converged"


class CornerExcluded(PeakflowError, ValueError):
    tag = "corner_excluded"
    exit_code = 1


class IllConditionedFit(PeakflowError):
    tag = "ill_conditioned_fit"


# flow
class DescentViolation(PeakflowError):
    tag = "descent_violation"
    exit_code = 3

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class PeakTrackingLost(PeakflowError):
    tag = "peak_tracking_lost"

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


# minimax
class EstimateFailed(PeakflowError):
    tag = "estimate_failed"


class InfeasibleG(PeakflowError, ValueError):
    tag = "infeasible_G"
    exit_code = 1


class MinimaxFailed(PeakflowError):
    tag = "minimax_failed"
    exit_code = 4

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
