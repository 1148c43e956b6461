"""Error taxonomy shared across the toolkit.

Every failure the library raises deliberately is a subclass of
:class:`KvFactorError`, so callers (and the CLI) can map failure kinds to
exit codes without string matching.
"""

from __future__ import annotations


class KvFactorError(Exception):
    """Base class for all deliberate toolkit errors."""


class ContractViolationError(KvFactorError):
    """An argument or operand violates a documented precondition."""


class UndefinedInputError(KvFactorError):
    """The requested quantity is mathematically undefined for this input."""


class NumericalError(KvFactorError):
    """An iterative routine failed to meet its numerical contract.

    Carries the residual observed at the point of failure when available.
    """

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class InfeasibleTargetError(KvFactorError):
    """A requested budget cannot be met; reports the achievable floor."""

    def __init__(self, message: str, floor_ratio: float | None = None):
        super().__init__(message)
        self.floor_ratio = floor_ratio


class AllocatorError(KvFactorError):
    """The chosen allocation strategy does not apply to these sensitivities."""


class ContainerFormatError(KvFactorError):
    """A model container on disk is malformed, corrupt, or of the wrong kind."""
