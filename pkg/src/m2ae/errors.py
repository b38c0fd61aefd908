"""Exception types shared across the package."""


class M2AEError(Exception):
    """Base class; the CLI maps these to exit code 2."""


class ShapeError(M2AEError, ValueError):
    pass


class NonFiniteError(M2AEError, FloatingPointError):
    pass


class DegenerateSignalError(M2AEError, ValueError):
    pass


class DegenerateProfileError(M2AEError, ValueError):
    pass


class TooFewSubjectsError(M2AEError, ValueError):
    pass


class FormatError(M2AEError, ValueError):
    """Bad magic, version mismatch or truncated file."""


class ConfigError(M2AEError, ValueError):
    pass


class MaskError(M2AEError, ValueError):
    """Out-of-range masking ratio, empty index set, or plan/shape mismatch."""
