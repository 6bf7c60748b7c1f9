"""Minimal NHWC tensor engine: ops with exact gradients, SGD with momentum, weight files."""

from .counting import count_flops
from .network import Network, initialize_slots
from .optim import OptimizerState, sgd_momentum_step
from .weights import WeightBundle, he_initialize

__all__ = [
    "Network",
    "OptimizerState",
    "WeightBundle",
    "count_flops",
    "he_initialize",
    "initialize_slots",
    "sgd_momentum_step",
]
