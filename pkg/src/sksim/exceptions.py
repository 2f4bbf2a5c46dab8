"""Exception types shared across the package."""

import numpy as np


class SksimError(Exception):
    """Base class for all package errors."""


class DomainError(SksimError):
    """A position fell outside the configured spatial domain."""


class ModelError(SksimError):
    """The model configuration is structurally inadmissible (e.g. no positive root)."""


class PreconditionError(SksimError):
    """An operation was called with arguments violating its contract."""


class InvalidMartingaleFunction(SksimError):
    """Candidate w failed the generator-residual check.

    Carries the full residual profile so callers can report where the
    candidate breaks down.
    """

    def __init__(self, message: str, residual: np.ndarray, residual_sup: float):
        super().__init__(message)
        self.residual = residual
        self.residual_sup = residual_sup


class BlowUpError(SksimError):
    """A solver field exceeded the configured ceiling."""


class SchemeError(SksimError):
    """A time-stepping scheme left its admissible range (e.g. g outside (0, w])."""


class GrowthError(SksimError):
    """A particle population breached the hard ceiling."""


class GridMismatchError(SksimError):
    """Two fields were combined on incompatible grids or time meshes."""


class ConfigError(SksimError):
    """Run configuration failed to parse or violated its schema."""
