"""segphrase: phrase-keyed foreground segmentation models, linguistically
constrained semantic segmentation, and visual entailment reasoning."""

from .config import Config
from .errors import DataError, Error, NumericalError

__version__ = "0.1.0"

__all__ = ["Config", "DataError", "Error", "NumericalError", "__version__"]
