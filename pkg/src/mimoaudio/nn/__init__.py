from collections import OrderedDict

import torch

from .checkpoint import load_into, load_params, params_from_bytes, params_to_bytes, save_params
from .gradcheck import GradReport, gradient_check
from .ops import ShapeError

def param_tree(module: torch.nn.Module) -> "OrderedDict[str, torch.Tensor]":
    """Named parameters in registration order."""
    return OrderedDict(module.named_parameters())


__all__ = [
    "GradReport", "ShapeError", "gradient_check", "load_into", "load_params", "param_tree",
    "params_from_bytes", "params_to_bytes", "save_params",
]
