"""Task losses and the cross-modality consistency objective.

The consistency loss contrasts each anchor's visual embedding against the
skeleton embeddings in the mini-batch: the positive is the same actor's
other-modality row, the negatives are the other individuals' rows. In the
default (literal) form the positive term is excluded from the denominator,

    L_i = -log( exp(sim_ii / tau) / sum_{k != i} exp(sim_ik / tau) ),

which can go negative; a switch adds the positive back in for the
standard form. Similarities are cosine, so the loss is invariant to
positive rescaling of any row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .model import TaskMode
from .tensor import (
    Tensor,
    add,
    clip,
    constant,
    exp,
    l2_normalize_rows,
    log,
    matmul,
    mean_all,
    mul,
    row_sum,
    scale,
    sub,
    take_diag,
    transpose,
)


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 1.0
    include_positive_in_denominator: bool = False
    consistency_weight: float = 1.0
    bidirectional: bool = False

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.consistency_weight < 0.0:
            raise ConfigError(f"consistency weight must be >= 0, got {self.consistency_weight}")


@dataclass
class ConsistencyBatch:
    """Aligned cross-modal rows: row b of vis and key is the same (actor, time)."""

    vis: Tensor
    key: Tensor
    ids: list[int]

    def __post_init__(self):
        if self.vis.data.ndim != 2 or self.vis.shape != self.key.shape:
            raise ShapeError(f"batch shapes disagree: {self.vis.shape} vs {self.key.shape}")
        if self.vis.shape[0] != len(self.ids):
            raise ShapeError("one id per row required")
        if len(self.ids) < 2:
            raise ConfigError("consistency needs at least 2 anchors")
        if len(set(self.ids)) != len(self.ids):
            raise ConfigError("duplicate ids in a consistency batch would create false negatives")


def consistency_loss_from_sims(sims: Tensor, cfg: LossConfig) -> Tensor:
    """Mean anchor loss given the full similarity matrix (rows = anchors)."""
    n = sims.shape[0]
    if sims.data.ndim != 2 or sims.shape[1] != n or n < 2:
        raise ShapeError(f"similarity matrix must be square with n >= 2, got {sims.shape}")
    logits = scale(sims, 1.0 / cfg.temperature)
    pos = take_diag(logits)
    if cfg.include_positive_in_denominator:
        mask = constant(np.ones((n, n)))
    else:
        mask = constant(np.ones((n, n)) - np.eye(n))
    # constant per-row shift keeps exp in range for small temperatures
    shift = constant(logits.data.max(axis=1, keepdims=True))
    denom = row_sum(mul(exp(sub(logits, _spread(shift, n))), mask))
    log_denom = add(log(denom), shift)
    return mean_all(sub(log_denom, pos))


def _spread(col: Tensor, n: int) -> Tensor:
    # n x 1 constant column repeated to n x n (constants track no gradients)
    return constant(np.repeat(col.data, n, axis=1))


def cross_modal_sims(vis: Tensor, key: Tensor) -> Tensor:
    """Cosine similarity of every vis row against every key row."""
    return matmul(l2_normalize_rows(vis), transpose(l2_normalize_rows(key)))


def consistency_loss(batch: ConsistencyBatch, cfg: LossConfig) -> Tensor:
    """Contrastive cross-modal loss over the batch (vis rows anchor by default)."""
    sims = cross_modal_sims(batch.vis, batch.key)
    loss = consistency_loss_from_sims(sims, cfg)
    if cfg.bidirectional:
        other = consistency_loss_from_sims(transpose(sims), cfg)
        loss = scale(add(loss, other), 0.5)
    return loss


def bce_loss(scores: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy; scores are probabilities, clamped at 1e-7."""
    y = np.asarray(targets, dtype=float)
    if y.shape != tuple(scores.shape):
        raise ShapeError(f"targets {y.shape} vs scores {scores.shape}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ConfigError("binary targets must be 0 or 1")
    p = clip(scores, 1e-7, 1.0 - 1e-7)
    on = mul(constant(y), log(p))
    off = mul(constant(1.0 - y), log(sub(constant(np.ones_like(y)), p)))
    return scale(mean_all(add(on, off)), -1.0)


def ce_loss(probs: Tensor, targets: int | list[int]) -> Tensor:
    """Mean negative log-likelihood of the target class per row of a simplex."""
    idx = [targets] if isinstance(targets, int) else list(targets)
    n, c = probs.shape
    if len(idx) != n:
        raise ShapeError(f"{len(idx)} targets for {n} rows")
    for k in idx:
        if not (0 <= k < c):
            raise ConfigError(f"target class {k} outside 0..{c - 1}")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), idx] = 1.0
    picked = row_sum(mul(probs, constant(onehot)))
    return scale(mean_all(log(clip(picked, 1e-12, 1.0))), -1.0)


def total_loss(
    scores: Tensor,
    targets,
    mode: TaskMode,
    cfg: LossConfig,
    consistency: ConsistencyBatch | None = None,
) -> tuple[Tensor, Tensor, Tensor | None]:
    """(total, task, consistency) losses; the last is None when not requested."""
    if mode is TaskMode.GAR:
        task = ce_loss(scores, targets)
    else:
        task = bce_loss(scores, targets)
    if consistency is None:
        return task, task, None
    cc = consistency_loss(consistency, cfg)
    return add(task, scale(cc, cfg.consistency_weight)), task, cc
