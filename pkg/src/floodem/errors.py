"""Exception types shared across the package."""


class FloodemError(Exception):
    """Base class for every error raised by this package."""


class FormatError(FloodemError):
    """A scene, label, or model file violates its on-disk format."""


class DataError(FloodemError):
    """Input data violates a documented invariant (non-finite values, missing truth, ...)."""


class IoError(FloodemError):
    """Underlying file I/O failed."""


class SpecError(FloodemError):
    """A synthetic scene spec is inconsistent or cannot be parsed."""


class DimError(FloodemError):
    """Dimension mismatch between a model and the data fed to it."""


class DegenerateError(FloodemError):
    """A statistical estimate collapsed (zero total weight on a class)."""


class InitError(FloodemError):
    """Not enough labeled samples to initialize a model."""


class EmptyError(FloodemError):
    """A metric was requested over an empty or single-class selection."""


class CapError(FloodemError):
    """Problem size exceeds a hard enumeration cap."""
