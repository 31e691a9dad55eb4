"""Numpy-backed tensors with reverse-mode autodiff, layers, Adam and checkpoints."""
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import grad_check, grad_check_params
from .graph import Graph, GraphStateError, backward as graph_backward, forward as graph_forward
from .nn import Module, Parameter
from .optim import Adam
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    get_default_dtype,
    no_grad,
    precision,
)

__all__ = [
    "Adam", "Graph", "GraphStateError", "Module", "NonFiniteError", "Parameter", "ShapeError",
    "Tensor", "as_tensor", "backward", "get_default_dtype", "grad_check", "grad_check_params",
    "graph_backward", "graph_forward", "load_checkpoint", "no_grad", "precision", "save_checkpoint",
]
