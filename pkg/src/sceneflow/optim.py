"""Optimizer and learning-rate schedule for the training loop."""

from __future__ import annotations

import math

import numpy as np

from .numerics import ParamStore


def one_cycle_lr(step: int, total: int, peak: float) -> float:
    """Linear warmup from peak/25 to peak over the first 10% of steps, then
    cosine decay to peak/10000 at the final step."""
    if not (0 <= step < total):
        raise ValueError(f"step {step} outside 0..{total - 1}")
    warm = max(1, int(round(0.1 * total)))
    start = peak / 25.0
    end = peak / 10000.0
    if step <= warm:
        return start + (peak - start) * (step / warm)
    progress = (step - warm) / (total - 1 - warm)
    return end + (peak - end) * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(params: ParamStore) -> float:
    total = 0.0
    for _, p in params.items():
        if p.grad is not None:
            g = p.grad.astype(np.float64)
            total += float(np.sum(g * g))
    return math.sqrt(total)


def clip_global_norm(params: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for _, p in params.items():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class AdamW:
    """Adaptive moments with decoupled weight decay.

    Weight decay is applied directly to the weights (not through the
    gradient); moments are stored in float32 so checkpoints round-trip
    bit-exactly.
    """

    def __init__(self, params: ParamStore, weight_decay: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            g = g.astype(p.data.dtype, copy=False)
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - lr * (update + self.weight_decay * p.data)

    def state_dict(self) -> dict[str, np.ndarray]:
        state: dict[str, np.ndarray] = {}
        for name in self.m:
            state[f"m.{name}"] = self.m[name].copy()
            state[f"v.{name}"] = self.v[name].copy()
        return state

    def load_state(self, state: dict[str, np.ndarray], t: int) -> None:
        for name in self.m:
            self.m[name] = np.asarray(state[f"m.{name}"], dtype=np.float32).copy()
            self.v[name] = np.asarray(state[f"v.{name}"], dtype=np.float32).copy()
        self.t = t
