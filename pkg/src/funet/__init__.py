"""FUnet: video segmentation with inter-frame and channel self-attention,
built on a numpy/numba tensor core with reverse-mode autodiff."""

from .kernels import backend_name, set_backend
from .tensor import (
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    set_checked,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NumericError",
    "set_checked",
    "backend_name",
    "set_backend",
    "__version__",
]
