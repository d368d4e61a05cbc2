"""Desk-scale multilingual multimodal pre-training with code-switched captions.

Three data streams (multilingual text, English caption+regions, code-switched
caption+regions), four pre-training objectives on a small shared transformer
encoder, and multilingual image-text retrieval evaluation with mean Recall.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, NumericalError

__all__ = ["ConfigError", "DataError", "NumericalError", "__version__"]
