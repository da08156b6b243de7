"""Descriptor-based multimodal 3D registration toolkit."""

from .errors import DataError, NumericalError
from .volume import Volume, load_volume, save_volume, read_any, write_any

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "NumericalError",
    "Volume",
    "load_volume",
    "save_volume",
    "read_any",
    "write_any",
    "__version__",
]
