"""Exception hierarchy. The CLI maps each class onto a process exit code."""


class DiffMIError(Exception):
    exit_code = 1


class ValidationError(DiffMIError, ValueError):
    """Bad configuration, malformed record, or violated precondition."""

    exit_code = 2


class UpstreamFileError(DiffMIError, FileNotFoundError):
    """A file produced by an earlier pipeline stage is missing or unreadable."""

    exit_code = 3


class NumericalError(DiffMIError, ArithmeticError):
    """Divergence, non-convergence, or a degenerate numerical configuration."""

    exit_code = 4


class CapabilityError(ValidationError):
    """The attack needs knowledge the threat model does not grant."""
