"""Dithered backpropagation: sparse, unbiased preactivation-gradient quantization."""

from .kernels import BACKEND
from .model import BackpropMode, Network, build, lenet5, mlp
from .quant import meprop_topk, nsd_quantize, quantize_8bit
from .sparse import MacCounter, SparseGrad, savings_ratio
from .tensor import Rng
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "BackpropMode", "MacCounter", "Network", "Rng", "SparseGrad", "TrainConfig",
    "build", "evaluate", "lenet5", "meprop_topk", "mlp", "nsd_quantize", "quantize_8bit",
    "savings_ratio", "train",
]
