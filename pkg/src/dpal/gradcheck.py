"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def numeric_grad(f: Callable[[], Tensor], x: Tensor, coords: Sequence[tuple[int, ...]], h: float) -> np.ndarray:
    out = np.empty(len(coords))
    with T.no_grad():
        for n, idx in enumerate(coords):
            orig = x.data[idx]
            x.data[idx] = orig + h
            fp = float(f().data)
            x.data[idx] = orig - h
            fm = float(f().data)
            x.data[idx] = orig
            out[n] = (fp - fm) / (2.0 * h)
    return out


def analytic_grad(f: Callable[[], Tensor], xs: Sequence[Tensor]) -> list[np.ndarray]:
    T.reset_tape()
    for x in xs:
        x.grad = None
    loss = f()
    T.backward(loss)
    return [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in xs]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / scale


def grad_check(f, x: Tensor | Sequence[Tensor], h: float = 1e-5, coords_per_tensor: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape and central-difference gradients.

    For a single tensor ``x``, ``f(x)`` must return a scalar tensor. For a
    list of tensors (e.g. all model parameters) ``f`` is a zero-argument
    closure over them. With ``coords_per_tensor`` only that many random
    coordinates per tensor are perturbed, which keeps full-model checks cheap.
    """
    if isinstance(x, Tensor):
        xs = [x]
        closure = lambda: f(x)  # noqa: E731
    else:
        xs = list(x)
        closure = f
    for t in xs:
        t.requires_grad = True
    rng = rng or np.random.default_rng(0)
    grads = analytic_grad(closure, xs)
    worst = 0.0
    for t, g in zip(xs, grads):
        all_idx = list(np.ndindex(t.shape))
        if coords_per_tensor is not None and len(all_idx) > coords_per_tensor:
            pick = rng.choice(len(all_idx), size=coords_per_tensor, replace=False)
            all_idx = [all_idx[i] for i in pick]
        num = numeric_grad(closure, t, all_idx, h)
        ana = np.array([g[i] for i in all_idx])
        if len(all_idx):
            worst = max(worst, float(relative_error(ana, num).max()))
    return worst


def check_full_objective(seed: int = 0, batch_size: int = 2, coords_per_tensor: int = 4,
                         h: float = 1e-5, routing: str = "soft") -> tuple[float, int]:
    """Grad-check the summed three-term objective of the micro student + D-PaDe in float64.

    The teacher is a seeded random micro encoder (its targets are constants
    here, so training it first would not change what is being checked).
    Returns ``(max relative error, number of parameter tensors checked)``.
    """
    from .teacher import Teacher
    from .train import RunConfig, TrainConfig, Trainer
    from .vit import MICRO_TEACHER, ViTEncoder

    teacher = Teacher(ViTEncoder(MICRO_TEACHER, np.random.default_rng(seed + 1), np.float64))
    run = RunConfig(optim=TrainConfig(batch_size=batch_size, seed=seed, routing=routing))
    tr = Trainer(run, teacher=teacher, dtype=np.float64)
    batch = tr.make_batch(0)
    err = grad_check(lambda: tr.compute_losses(batch).total, tr.params, h=h,
                     coords_per_tensor=coords_per_tensor, rng=np.random.default_rng(seed))
    return err, len(tr.params)
