"""H-GPE lightweight vision backbones on a small numpy autodiff core."""

from .backbone import MICRO, PRESETS, HGpeModel, ModelConfig, build_model, preset
from .tensor import GradTape, Tensor

__all__ = ["GradTape", "HGpeModel", "MICRO", "ModelConfig", "PRESETS", "Tensor", "build_model",
           "preset"]
__version__ = "0.1.0"
