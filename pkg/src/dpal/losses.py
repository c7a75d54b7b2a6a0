"""Global, local and relation alignment objectives and their unit-weight sum."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, UsageError

log = logging.getLogger(__name__)

NORM_EPS = 1e-12
KL_CLAMP = 1e-8


class ValidationError(ValueError):
    pass


def _row_dist(diff: Tensor, squared: bool) -> Tensor:
    sq = T.square(diff).sum(axis=-1)
    return sq if squared else T.sqrt(sq + NORM_EPS)


def global_alignment(student_globals: Tensor, teacher_global, squared: bool = False) -> Tensor:
    """Mean over the M views of the Euclidean distance to the teacher's global token.

    ``student_globals`` is ``M x D`` (one image) or ``B x M x D``; ``teacher_global``
    is ``D`` or ``B x D``. Batched inputs are averaged over B as well.
    """
    student_globals = T.as_tensor(student_globals)
    teacher_global = T.as_tensor(teacher_global, like=student_globals)
    if student_globals.shape[-2] == 0:
        raise UsageError("global alignment needs at least one view (M >= 1)")
    if student_globals.ndim == 3:
        teacher_global = teacher_global.reshape(teacher_global.shape[0], 1, -1)
    return _row_dist(student_globals - teacher_global, squared).mean()


def local_alignment(student_local: Tensor, teacher_local, mask=None, squared: bool = False) -> Tensor:
    """Mean over foreground rows of per-row Euclidean distances.

    Without an explicit ``mask`` foreground rows are those where either side
    is non-zero. Batched ``B x L x D`` inputs average the per-image values.
    """
    student_local = T.as_tensor(student_local)
    teacher_local = T.as_tensor(teacher_local, like=student_local)
    if student_local.shape != teacher_local.shape:
        raise T.DimensionError(f"local alignment shapes differ: {student_local.shape} vs {teacher_local.shape}")
    if mask is None:
        mask = (np.abs(student_local.data).sum(-1) + np.abs(teacher_local.data).sum(-1)) > 0
    mask = np.asarray(mask, dtype=student_local.dtype)
    if student_local.ndim == 2:
        return _local_single(student_local, teacher_local, mask, squared)
    dist = _row_dist(student_local - teacher_local, squared)
    counts = mask.sum(axis=-1)
    if (counts == 0).any():
        log.warning("local alignment: %d image(s) with no foreground rows contribute 0",
                    int((counts == 0).sum()))
    per_image = (dist * mask).sum(axis=-1) * (1.0 / np.maximum(counts, 1.0)).astype(mask.dtype)
    return per_image.mean()


def _local_single(s: Tensor, t: Tensor, mask: np.ndarray, squared: bool) -> Tensor:
    n = mask.sum()
    if n == 0:
        log.warning("local alignment: no foreground rows, loss is 0")
        return (s * 0.0).sum()
    return (_row_dist(s - t, squared) * mask).sum() * (1.0 / n)


def _check_stochastic(arr: np.ndarray, name: str) -> None:
    err = np.abs(arr.sum(axis=-1) - 1.0).max()
    if err > 1e-4:
        raise ValidationError(f"{name} rows must sum to 1 (max deviation {err:.2e})")
    if (arr < 0).any():
        raise ValidationError(f"{name} has negative entries")


def relation_alignment(student_rel: Tensor, teacher_rel, reverse: bool = False) -> Tensor:
    """Mean over rows of KL(teacher_row || student_row); ``reverse`` swaps the direction.

    The distribution in the denominator is clamped at 1e-8 and ``0 log 0 = 0``.
    """
    student_rel = T.as_tensor(student_rel)
    teacher_rel = T.as_tensor(teacher_rel, like=student_rel)
    _check_stochastic(student_rel.data, "student relation")
    _check_stochastic(teacher_rel.data, "teacher relation")
    if reverse:
        p, q = student_rel, teacher_rel
    else:
        p, q = teacher_rel, student_rel
    # p log p with the 0 log 0 = 0 convention; p > 0 guards the log argument
    safe_p = T.Tensor(np.where(p.data > 0, 1.0, 0.0).astype(p.dtype))
    log_p = T.log(p + (1.0 - safe_p))
    kl_rows = (p * (log_p - T.log(T.clamp_min(q, KL_CLAMP)))).sum(axis=-1)
    return kl_rows.mean()


@dataclass
class LossTerms:
    global_loss: Tensor | float = 0.0
    local_loss: Tensor | float = 0.0
    relation_loss: Tensor | float = 0.0
    enabled: tuple[bool, bool, bool] = (True, True, True)
    num_views: int = 2
    total: Tensor | float | None = field(default=None)

    def values(self) -> dict[str, float]:
        def f(x):
            return float(x.data) if isinstance(x, Tensor) else float(x)

        return {
            "loss_g": f(self.global_loss) if self.enabled[0] else 0.0,
            "loss_l": f(self.local_loss) if self.enabled[1] else 0.0,
            "loss_r": f(self.relation_loss) if self.enabled[2] else 0.0,
            "loss_total": f(self.total if self.total is not None else total_loss(self)),
        }


def total_loss(terms: LossTerms) -> Tensor:
    """Unit-weight sum of the enabled terms; disabled terms are skipped entirely."""
    parts = [t for t, on in zip((terms.global_loss, terms.local_loss, terms.relation_loss), terms.enabled) if on]
    if not parts:
        raise UsageError("all three alignment terms are disabled")
    out = T.as_tensor(parts[0])
    for p in parts[1:]:
        out = out + p
    terms.total = out
    return out
