"""Global aggregation with local distribution for dense prediction, in pure numpy."""

from .config import GaldConfig
from .errors import GaldError
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["GaldConfig", "GaldError", "Tensor", "no_grad", "__version__"]
