"""Adam with bias correction, keyed by parameter name so its state serializes."""

from __future__ import annotations

import math

import torch

from .errors import TrainingAborted


def adam_step(param, grad, m, v, lr, t, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update. Returns ``(param, m, v)`` as new tensors."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    beta1, beta2 = betas
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    update = lr * m_hat / (torch.sqrt(v_hat) + eps)
    if not torch.all(torch.isfinite(update)):
        raise TrainingAborted("non-finite Adam update")
    return param - update, m, v


class Adam:
    def __init__(self, params: dict[str, torch.nn.Parameter], lr=2e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: torch.zeros_like(p) for k, p in params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in params.items()}

    @torch.no_grad()
    def step(self, grads: dict[str, torch.Tensor], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        new = {}
        for name, p in self.params.items():
            new[name] = adam_step(p, grads[name], self.m[name], self.v[name], lr, self.t, self.betas, self.eps)
        # commit only after every group produced a finite update
        for name, (p_new, m, v) in new.items():
            self.params[name].copy_(p_new)
            self.m[name], self.v[name] = m, v

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        for name in self.params:
            self.m[name] = state["m"][name].clone()
            self.v[name] = state["v"][name].clone()


def clip_global_norm(grads: dict[str, torch.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(torch.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total
