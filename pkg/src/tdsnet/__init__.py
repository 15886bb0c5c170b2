"""Few-shot fine-grained classification with global and task-aware local similarity, on a small numpy autograd core."""
from .config import RunConfig, load_config
from .model import TDSNet
from .tensor import Tensor, no_grad, precision

__all__ = ["RunConfig", "TDSNet", "Tensor", "load_config", "no_grad", "precision"]
__version__ = "0.1.0"
