"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes, so raising the right class is
part of the public contract: configuration problems exit 2, numerical
failures exit 3, and contract violations (bad shapes, out-of-range values)
exit 4.
"""


class PlumecalError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(PlumecalError):
    """Missing/unreadable files or malformed configuration."""

    exit_code = 2


class NumericsError(PlumecalError):
    """A numerical routine failed (non-finite field, factorization, ...)."""

    exit_code = 3


class ContractError(PlumecalError):
    """Input violates a documented precondition or invariant."""

    exit_code = 4


class CflError(NumericsError):
    """Requested time step exceeds the stability limit.

    Carries the largest admissible step so callers can retry.
    """

    def __init__(self, requested: float, admissible: float):
        self.requested = requested
        self.admissible = admissible
        super().__init__(
            f"time step {requested:g} s exceeds the stability limit; "
            f"largest admissible step is {admissible:g} s"
        )
