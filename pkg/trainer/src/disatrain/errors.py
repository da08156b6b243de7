"""Error type for malformed files and architectures the trainer cannot honor."""


class DataError(ValueError):
    """Bad dataset or weights file, or an invalid layer list."""
