"""CST-former for sound event localization and detection, on a small numpy autodiff engine."""
from .errors import CapacityError, ChecksumError, ConfigError, CSTFormerError, ShapeError, TooShortError
from .kernels import BACKEND
from .model import CSTFormer, ModelConfig, build_model
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "CSTFormer", "CSTFormerError", "CapacityError", "ChecksumError", "ConfigError",
    "ModelConfig", "ShapeError", "Tensor", "TooShortError", "build_model", "no_grad",
]
