"""Exception taxonomy shared across the package.

DataError maps to CLI exit code 3 (malformed / incompatible inputs),
NumericalError to exit code 4 (no overlap, degenerate content, diverged).
"""


class DataError(ValueError):
    """Malformed file, unsupported format, or incompatible inputs."""


class NumericalError(ArithmeticError):
    """Numerically meaningless request: no overlap, constant volume, ..."""
