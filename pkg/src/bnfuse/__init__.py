"""Mini CNN training engine with a batch-norm fission/fusion graph rewriter
and an analytic main-memory traffic model."""

from .errors import EngineError, InvalidRangeError, InvalidSpecError, ShapeError, StateError
from .fusion import FusionLevel, FusionPlan, parse_level, plan
from .graph import ModelSpec, build_densenet, build_model, build_resnet
from .ops import BNParams, ChannelStats, ConvParams
from .tensor import Rng, Tensor4D, tensor_approx_eq, tensor_filled, tensor_random

__version__ = "0.1.0"

__all__ = [
    "BNParams", "ChannelStats", "ConvParams", "EngineError", "FusionLevel",
    "FusionPlan", "InvalidRangeError", "InvalidSpecError", "ModelSpec", "Rng",
    "ShapeError", "StateError", "Tensor4D", "build_densenet", "build_model",
    "build_resnet", "parse_level", "plan", "tensor_approx_eq", "tensor_filled",
    "tensor_random",
]
