"""AdamW with decoupled weight decay and bias correction."""

from __future__ import annotations

import numpy as np


def adamw_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
               lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 1e-4) -> None:
    """One in-place AdamW update of ``param``, ``m`` and ``v`` (step ``t`` is 1-based)."""
    dt = param.dtype.type
    param *= dt(1.0 - lr * weight_decay)
    m *= dt(beta1)
    m += dt(1.0 - beta1) * grad
    v *= dt(beta2)
    v += dt(1.0 - beta2) * grad * grad
    m_hat_scale = 1.0 / (1.0 - beta1 ** t)
    v_hat_scale = 1.0 / (1.0 - beta2 ** t)
    param -= dt(lr * m_hat_scale) * m / (np.sqrt(v * dt(v_hat_scale)) + dt(eps))


class AdamW:
    def __init__(self, named_params, lr: float = 5e-5, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.named = list(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.named}
        self.v = {n: np.zeros_like(p.data) for n, p in self.named}

    def step(self) -> None:
        self.t += 1
        for name, p in self.named:
            if p.grad is None:
                continue
            adamw_step(p.data, p.grad, self.m[name], self.v[name], self.t, self.lr,
                       self.betas[0], self.betas[1], self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.grad = None

    def state_arrays(self) -> dict:
        out = {}
        for name, _ in self.named:
            out[f"optim.m.{name}"] = self.m[name]
            out[f"optim.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict, t: int) -> None:
        for name, _ in self.named:
            self.m[name] = np.array(arrays[f"optim.m.{name}"], copy=True)
            self.v[name] = np.array(arrays[f"optim.v.{name}"], copy=True)
        self.t = int(t)

