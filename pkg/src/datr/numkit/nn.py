"""Parameter containers: a small ``Module`` base plus ``Linear`` and ``LayerNorm``."""

from __future__ import annotations

import numpy as np

from . import ops
from .rng import Rng
from .tensor import Tensor


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=data.dtype)


class Module:
    """Attribute-scanning parameter registry.

    Parameters are tensors with ``requires_grad`` stored as attributes, in
    sub-modules, or in lists of sub-modules.  Names follow attribute
    insertion order, which keeps checkpoints and optimiser state stable.
    """

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True,
                 std: float = 0.02, dtype=np.float32):
        self.weight = parameter(rng.normal((d_in, d_out), 0.0, std, dtype))
        self.bias = parameter(np.zeros(d_out, dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6, dtype=np.float32):
        self.gamma = parameter(np.ones(dim, dtype))
        self.beta = parameter(np.zeros(dim, dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layernorm(x, self.gamma, self.beta, self.eps)


def param_count(module: Module) -> int:
    return int(sum(p.size for p in module.parameters()))
