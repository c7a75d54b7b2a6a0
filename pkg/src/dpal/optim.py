"""AdamW with decoupled weight decay, warmup + cosine schedule, global-norm clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray], m: list[np.ndarray], v: list[np.ndarray],
               step: int, lr: float, betas=(0.9, 0.999), wd: float = 0.0, eps: float = 1e-8) -> None:
    """In-place AdamW update. ``step`` counts from 1."""
    if step < 1:
        raise ValueError("adamw step counter starts at 1")
    b1, b2 = betas
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for p, g, mi, vi in zip(params, grads, m, v):
        if wd:
            p *= 1.0 - lr * wd
        mi *= b1
        mi += (1.0 - b1) * g
        vi *= b2
        vi += (1.0 - b2) * g * g
        p -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g *= scale
    return total


@dataclass
class Schedule:
    peak_lr: float
    min_lr: float
    warmup_steps: int
    total_steps: int

    def __call__(self, step: int) -> float:
        return lr_at(step, self)


def lr_at(step: int, cfg) -> float:
    """Linear warmup 0 -> peak, then cosine from peak down to min_lr at ``total_steps``."""
    warm, total = cfg.warmup_steps, cfg.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step < warm:
        return cfg.peak_lr * step / warm
    t = (step - warm) / max(total - warm, 1)
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * t))


class AdamW:
    """Stateful AdamW over tape tensors. Parameters whose flag in ``decay`` is
    False (biases, norm gains, tokens) skip weight decay."""

    def __init__(self, params: list[Tensor], betas=(0.9, 0.999), weight_decay: float = 0.05, eps: float = 1e-8,
                 clip_norm: float | None = 3.0, decay: list[bool] | None = None):
        self.params = params
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.clip_norm = clip_norm
        self.decay = decay if decay is not None else [True] * len(params)
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step_count = 0

    def step(self, lr: float) -> float:
        """Apply one update from the ``.grad`` fields; returns the pre-clip gradient norm."""
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad.astype(p.dtype) for p in self.params]
        norm = clip_grad_norm(grads, self.clip_norm)
        self.step_count += 1
        for p, g, m, v, dec in zip(self.params, grads, self.m, self.v, self.decay):
            adamw_step([p.data], [g], [m], [v], self.step_count, lr, self.betas,
                       self.weight_decay if dec else 0.0, self.eps)
            p.grad = None
        return norm

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m.copy()
            out[f"v.{i}"] = v.copy()
        out["step"] = np.array([self.step_count], dtype=np.float64)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for i in range(len(self.params)):
            self.m[i] = state[f"m.{i}"].astype(self.params[i].dtype, copy=True)
            self.v[i] = state[f"v.{i}"].astype(self.params[i].dtype, copy=True)
        self.step_count = int(state["step"][0])
