from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .nn import Module
from .tensor import Tensor


class GraphStateError(RuntimeError):
    pass


class Graph:
    """A named-input, named-output computation with declared input shapes.

    ``fn`` receives the inputs as keyword Tensors and returns a dict of Tensors.
    ``None`` in a declared shape matches any size.
    """

    def __init__(self, fn: Callable[..., Mapping[str, Tensor]], signature: Mapping[str, tuple],
                 params: Module | None = None):
        self.fn = fn
        self.signature = dict(signature)
        self.params = params
        self._outputs: dict[str, Tensor] | None = None

    def _check(self, inputs: Mapping) -> None:
        if set(inputs) != set(self.signature):
            raise T.ShapeError(f"inputs {sorted(inputs)} do not match signature {sorted(self.signature)}")
        for name, declared in self.signature.items():
            shape = np.shape(inputs[name].data if isinstance(inputs[name], Tensor) else inputs[name])
            if len(shape) != len(declared) or any(d is not None and d != s for d, s in zip(declared, shape)):
                raise T.ShapeError(f"input {name!r}: shape {shape} vs declared {declared}")

    def forward(self, inputs: Mapping) -> dict[str, Tensor]:
        self._check(inputs)
        tensors = {k: T.as_tensor(v) for k, v in inputs.items()}
        self._outputs = dict(self.fn(**tensors))
        return self._outputs

    def backward(self, loss: str) -> dict[str, np.ndarray]:
        if self._outputs is None:
            raise GraphStateError("backward called before forward")
        out = self._outputs[loss]
        if out.data.size != 1:
            raise T.ShapeError(f"loss {loss!r} is not scalar: {out.shape}")
        named = list(self.params.named_parameters()) if self.params is not None else []
        for _, p in named:
            p.grad = None
        T.backward(out)
        self._outputs = None
        return {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in named}


def forward(graph: Graph, inputs: Mapping) -> dict[str, Tensor]:
    return graph.forward(inputs)


def backward(graph: Graph, loss: str = "loss") -> dict[str, np.ndarray]:
    return graph.backward(loss)
