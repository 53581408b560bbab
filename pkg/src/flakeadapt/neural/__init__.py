from . import checkpoint, ops
from .layers import Conv2d, Linear, Module
from .optim import Adam, AdamState, adam_step
from .tensor import Graph, Tensor

__all__ = ["Adam", "AdamState", "Conv2d", "Graph", "Linear", "Module", "Tensor", "adam_step", "checkpoint", "ops"]
