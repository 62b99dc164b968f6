"""tokenhier: desk-scale stain-aware self-supervised ViT pipeline.

Subpackages are imported lazily by the CLI; importing :mod:`tokenhier`
itself pulls in nothing heavier than numpy.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DataError,
    DegenerateInputError,
    NumericError,
    ParameterError,
    ShapeError,
    TokenhierError,
)

__all__ = [
    "ConfigError",
    "DataError",
    "DegenerateInputError",
    "NumericError",
    "ParameterError",
    "ShapeError",
    "TokenhierError",
    "__version__",
]
