"""Scaled dot-product attention and the residual/layer-norm attention stack.

``attend`` runs one attention layer: queries are projected by w_q, memory
rows by w_k and w_v, scores are scaled by 1/sqrt(d) and softmaxed over the
memory axis, and the weights mix the projected value rows. One softmax
covers all memory rows (single head by default); a ``heads`` knob splits
the projected vectors into column blocks with an independent softmax each.

``attend_stack`` refines the query through several attention layers, each
optionally followed by a residual add and row layer normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import EmptyMemoryError, ShapeError
from .rng import Rng
from .tensor import (
    Tensor,
    add,
    concat,
    layer_norm,
    matmul,
    matmul_t,
    row_softmax,
    scale,
    slice_cols,
)


def glorot(rng: Rng, fan_in: int, fan_out: int) -> Tensor:
    """Glorot-uniform matrix: entries in +-sqrt(6 / (fan_in + fan_out))."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform_array((fan_in, fan_out), -bound, bound), requires_grad=True)


@dataclass
class AttnParams:
    """One attention layer: three square D x D projections."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    d: int
    heads: int = 1

    @classmethod
    def init(cls, dim: int, rng: Rng, heads: int = 1) -> "AttnParams":
        if heads < 1 or dim % heads != 0:
            raise ShapeError(f"heads={heads} must divide dim={dim}")
        return cls(
            w_q=glorot(rng, dim, dim),
            w_k=glorot(rng, dim, dim),
            w_v=glorot(rng, dim, dim),
            d=dim,
            heads=heads,
        )

    def named_tensors(self, prefix: str):
        yield f"{prefix}.w_q", self.w_q
        yield f"{prefix}.w_k", self.w_k
        yield f"{prefix}.w_v", self.w_v


@dataclass
class AttnStackParams:
    """Stacked attention layers sharing one width, plus per-layer norm affines."""

    layers: list[AttnParams]
    gains: list[Tensor]
    biases: list[Tensor]
    residual: bool = True
    normalize: bool = True

    @classmethod
    def init(
        cls,
        dim: int,
        depth: int,
        rng: Rng,
        heads: int = 1,
        residual: bool = True,
        normalize: bool = True,
    ) -> "AttnStackParams":
        if depth < 1:
            raise ShapeError(f"stack depth must be >= 1, got {depth}")
        layers = [AttnParams.init(dim, rng, heads=heads) for _ in range(depth)]
        gains = [Tensor([[1.0] * dim], requires_grad=True) for _ in range(depth)]
        biases = [Tensor([[0.0] * dim], requires_grad=True) for _ in range(depth)]
        return cls(layers=layers, gains=gains, biases=biases)

    @property
    def dim(self) -> int:
        return self.layers[0].d

    def named_tensors(self, prefix: str):
        for i, layer in enumerate(self.layers):
            yield from layer.named_tensors(f"{prefix}.layer{i}")
            yield f"{prefix}.layer{i}.ln_gain", self.gains[i]
            yield f"{prefix}.layer{i}.ln_bias", self.biases[i]


def attend(q: Tensor, keys: Tensor, values: Tensor, p: AttnParams) -> Tensor:
    """One scaled dot-product attention layer over M memory rows.

    ``q`` may hold several query rows; each row attends independently.
    Output rows are convex combinations of the rows of values @ w_v.
    """
    if keys.data.ndim != 2 or values.data.ndim != 2:
        raise ShapeError(f"memory must be rank-2, got {keys.shape} and {values.shape}")
    if keys.shape[0] == 0:
        raise EmptyMemoryError("attention over an empty memory; substitute a null token")
    if keys.shape != values.shape:
        raise ShapeError(f"keys {keys.shape} and values {values.shape} disagree")
    if q.data.ndim != 2 or q.shape[1] != p.d:
        raise ShapeError(f"query {q.shape} does not match width {p.d}")
    if keys.shape[1] != p.d:
        raise ShapeError(f"memory width {keys.shape[1]} != params width {p.d}")

    qp = matmul(q, p.w_q)
    kp = matmul(keys, p.w_k)
    vp = matmul(values, p.w_v)
    if p.heads == 1:
        scores = scale(matmul_t(qp, kp), 1.0 / math.sqrt(p.d))
        weights = row_softmax(scores)
        return matmul(weights, vp)
    width = p.d // p.heads
    outs = []
    for h in range(p.heads):
        qh = slice_cols(qp, h * width, (h + 1) * width)
        kh = slice_cols(kp, h * width, (h + 1) * width)
        vh = slice_cols(vp, h * width, (h + 1) * width)
        scores = scale(matmul_t(qh, kh), 1.0 / math.sqrt(width))
        outs.append(matmul(row_softmax(scores), vh))
    return concat(outs, axis=1)


def attention_weights(q: Tensor, keys: Tensor, p: AttnParams) -> Tensor:
    """The softmax weights ``attend`` would use (single-head form)."""
    qp = matmul(q, p.w_q)
    kp = matmul(keys, p.w_k)
    scores = scale(matmul_t(qp, kp), 1.0 / math.sqrt(p.d))
    return row_softmax(scores)


def attend_stack(q: Tensor, keys: Tensor, values: Tensor, p: AttnStackParams) -> Tensor:
    """Refine query rows through the layered attention stack.

    Every layer attends against the same memory; with residuals and
    normalization on (the default) each step is LN(q + attn(q)).
    """
    out = q
    for layer, gain, bias in zip(p.layers, p.gains, p.biases):
        attended = attend(out, keys, values, layer)
        if p.residual:
            attended = add(out, attended)
        if p.normalize:
            attended = layer_norm(attended, gain, bias)
        out = attended
    return out
