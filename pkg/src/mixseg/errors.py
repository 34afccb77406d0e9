"""Exception taxonomy shared across the package."""


class MixsegError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(MixsegError, ValueError):
    """Shapes or grids are incompatible."""


class ConfigError(MixsegError, ValueError):
    """Invalid configuration value (bounds, empty pools, missing files)."""


class CoverageError(MixsegError, ValueError):
    """Patch set does not cover the parent volume."""


class UnstableAlphaError(MixsegError, ValueError):
    """Mixing coefficient below the numerical-stability bound for inversion."""


class PairingError(MixsegError, ValueError):
    """Paired measurement lists do not line up."""


class DegenerateDataError(MixsegError, ValueError):
    """Statistic undefined for the given data (e.g. zero variance)."""


class AccessError(MixsegError, RuntimeError):
    """Ground-truth access requested without the test-harness flag."""


class TrainingDiverged(MixsegError, RuntimeError):
    """Training loss became non-finite."""


class AttackDiverged(MixsegError, RuntimeError):
    """Attack objective increased for too many consecutive steps."""


class SessionError(MixsegError, RuntimeError):
    """Client session failed after exhausting retries."""
