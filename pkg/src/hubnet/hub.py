"""Three-channel temporal attention blocks over clip token memories.

A block refines a query against past, current and future key-value
memories, one attention stack per channel, then maps the concatenated
channel outputs through a 3D x D aggregation matrix. Memories are built
from per-clip token banks: the past and future channels take the top-k
most similar clips inside a window on each side of the current clip
(similarity measured between mean-pooled clip summaries), the current
channel takes the current clip's tokens. Keys and values share the same
raw token rows; the distinction comes from the per-layer projections.

An empty channel (video boundary, or a lone actor after self-exclusion)
is backed by a learned null token instead of special-casing the softmax.

Two specializations cover the two interaction types: ``actor_hub``
attends over other actors' feature rows, ``context_hub`` attends over
spatio-temporal context tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttnStackParams, attend_stack, glorot
from .errors import ConfigError, ShapeError
from .rng import Rng
from .tensor import Tensor, concat, matmul, scale

CHANNELS = ("past", "current", "future")


def np_cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Plain cosine similarity on raw vectors; zero-norm inputs give 0."""
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b) / (na * nb)


@dataclass
class ClipFeatures:
    """Token bank of one video: tokens[t] holds clip t's rows.

    ``token_ids`` tags each token row with the actor it belongs to
    (-1 for rows that are not actor-specific); ``clip_summary`` is the
    token mean per clip and is what clip selection compares.
    """

    tokens: np.ndarray  # T x S x D
    token_ids: np.ndarray | None = None  # T x S ints
    clip_summary: np.ndarray = field(default=None)  # type: ignore[assignment]
    _memory_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.tokens.ndim != 3:
            raise ShapeError(f"clip tokens must be T x S x D, got {self.tokens.shape}")
        means = self.tokens.mean(axis=1)
        if self.clip_summary is None:
            self.clip_summary = means
        elif not np.allclose(self.clip_summary, means, atol=1e-9):
            raise ShapeError("clip_summary does not match token means")
        if self.token_ids is not None and self.token_ids.shape != self.tokens.shape[:2]:
            raise ShapeError(
                f"token_ids shape {self.token_ids.shape} != {self.tokens.shape[:2]}"
            )

    @property
    def num_clips(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]


def merge_token_banks(a: ClipFeatures, b: ClipFeatures) -> ClipFeatures:
    """Row-concatenate two banks clip by clip (for the non-hierarchical variant)."""
    if a.num_clips != b.num_clips or a.dim != b.dim:
        raise ShapeError(f"banks disagree: {a.tokens.shape} vs {b.tokens.shape}")
    tokens = np.concatenate([a.tokens, b.tokens], axis=1)
    ids_a = a.token_ids if a.token_ids is not None else np.full(a.tokens.shape[:2], -1, dtype=int)
    ids_b = b.token_ids if b.token_ids is not None else np.full(b.tokens.shape[:2], -1, dtype=int)
    return ClipFeatures(tokens=tokens, token_ids=np.concatenate([ids_a, ids_b], axis=1))


@dataclass(frozen=True)
class SelectionConfig:
    """Window size and per-side top-k for pre-computed clip selection."""

    window: int
    top_k: int

    def __post_init__(self):
        if not (1 <= self.top_k <= self.window):
            raise ConfigError(f"need 1 <= top_k <= window, got k={self.top_k} w={self.window}")


def select_clips(
    features: ClipFeatures, t: int, cfg: SelectionConfig
) -> tuple[list[int], list[int]]:
    """Top-k most relevant clips on each side of t, in temporal order.

    Relevance is cosine similarity between clip summaries and clip t's
    summary; ties break by temporal proximity, then by lower index. Sides
    with fewer than k candidates return everything available.
    """
    if not (0 <= t < features.num_clips):
        raise ShapeError(f"clip index {t} outside 0..{features.num_clips - 1}")
    anchor = features.clip_summary[t]

    def side(candidates: list[int]) -> list[int]:
        ranked = sorted(
            candidates,
            key=lambda c: (-np_cosine(features.clip_summary[c], anchor), abs(c - t), c),
        )
        return sorted(ranked[: cfg.top_k])

    past = side(list(range(max(0, t - cfg.window), t)))
    future = side(list(range(t + 1, min(features.num_clips, t + cfg.window + 1))))
    return past, future


@dataclass
class TemporalMemory:
    """Key-value rows per channel; keys and values share the rows.

    Each channel is a list of token matrices (as constant tensors): one
    concatenated matrix in selection mode, one matrix per window clip when
    selection is off (the block then averages the per-clip attention
    outputs). An empty list marks a channel that the forward pass backs
    with its learned null token, so the current channel is never attended
    empty.
    """

    past: list[Tensor]
    current: list[Tensor]
    future: list[Tensor]

    def channel(self, name: str) -> list[Tensor]:
        return getattr(self, name)


def _clip_rows(
    features: ClipFeatures, c: int, t: int, exclude_actor: int | None, scope: str
) -> np.ndarray:
    rows = features.tokens[c]
    if exclude_actor is None or features.token_ids is None:
        return rows
    if scope == "current" and c != t:
        return rows
    return rows[features.token_ids[c] != exclude_actor]


def build_memory(
    features: ClipFeatures,
    t: int,
    cfg: SelectionConfig,
    *,
    exclude_actor: int | None = None,
    exclusion_scope: str = "all",
    use_selection: bool = True,
    use_temporal: bool = True,
) -> TemporalMemory:
    """Assemble the three channels for clip t.

    With selection on, each side's selected clips concatenate into a
    single matrix; with selection off, every clip in the window stays a
    separate item. ``exclude_actor`` drops that actor's rows, either in
    every clip or only in the current one per ``exclusion_scope``.

    Results are cached on the feature bank (tokens are immutable), so
    repeated forward passes share the same constant tensors.
    """
    if exclusion_scope not in ("all", "current"):
        raise ConfigError(f"exclusion_scope must be 'all' or 'current', got {exclusion_scope!r}")
    cache_key = (t, exclude_actor, exclusion_scope, use_selection, use_temporal, cfg)
    cached = features._memory_cache.get(cache_key)
    if cached is not None:
        return cached

    def gather(indices: list[int], merge: bool) -> list[Tensor]:
        blocks = []
        for c in indices:
            rows = _clip_rows(features, c, t, exclude_actor, exclusion_scope)
            if rows.shape[0]:
                blocks.append(rows)
        if not blocks:
            return []
        if merge:
            return [Tensor(np.concatenate(blocks, axis=0))]
        return [Tensor(b) for b in blocks]

    if not use_temporal:
        past_idx: list[int] = []
        future_idx: list[int] = []
    elif use_selection:
        past_idx, future_idx = select_clips(features, t, cfg)
    else:
        past_idx = list(range(max(0, t - cfg.window), t))
        future_idx = list(range(t + 1, min(features.num_clips, t + cfg.window + 1)))

    mem = TemporalMemory(
        past=gather(past_idx, merge=use_selection),
        current=gather([t], merge=True),
        future=gather(future_idx, merge=use_selection),
    )
    features._memory_cache[cache_key] = mem
    return mem


@dataclass
class HubParams:
    """Per-channel attention stacks, the 3D x D aggregation, and null tokens."""

    stacks: dict[str, AttnStackParams]
    w_agg: Tensor
    null_tokens: dict[str, Tensor]
    channels_shared: bool = False

    @classmethod
    def init(
        cls,
        dim: int,
        layers: int,
        rng: Rng,
        heads: int = 1,
        share_channels: bool = False,
        residual: bool = True,
        normalize: bool = True,
    ) -> "HubParams":
        if share_channels:
            shared = AttnStackParams.init(dim, layers, rng, heads=heads, residual=residual, normalize=normalize)
            stacks = {name: shared for name in CHANNELS}
        else:
            stacks = {
                name: AttnStackParams.init(dim, layers, rng, heads=heads, residual=residual, normalize=normalize)
                for name in CHANNELS
            }
        w_agg = glorot(rng, 3 * dim, dim)
        nulls = {
            name: Tensor(rng.normal_array((1, dim), std=0.02), requires_grad=True)
            for name in CHANNELS
        }
        return cls(stacks=stacks, w_agg=w_agg, null_tokens=nulls, channels_shared=share_channels)

    @property
    def dim(self) -> int:
        return self.w_agg.shape[1]

    def named_tensors(self, prefix: str):
        if self.channels_shared:
            yield from self.stacks["past"].named_tensors(f"{prefix}.stack_shared")
        else:
            for name in CHANNELS:
                yield from self.stacks[name].named_tensors(f"{prefix}.stack_{name}")
        yield f"{prefix}.w_agg", self.w_agg
        for name in CHANNELS:
            yield f"{prefix}.null_{name}", self.null_tokens[name]


def hub_forward(q: Tensor, mem: TemporalMemory, p: HubParams) -> Tensor:
    """Refine query rows through the three channels and aggregate.

    Output rows are [past_out, current_out, future_out] @ w_agg. A channel
    with several memory items averages the per-item stack outputs; an
    empty channel attends over its learned null token.
    """
    if q.shape[1] != p.dim:
        raise ShapeError(f"query width {q.shape[1]} != block width {p.dim}")
    channel_outs = []
    for name in CHANNELS:
        items = mem.channel(name)
        stack = p.stacks[name]
        if not items:
            null = p.null_tokens[name]
            channel_outs.append(attend_stack(q, null, null, stack))
            continue
        outs = [attend_stack(q, m, m, stack) for m in items]
        if len(outs) == 1:
            channel_outs.append(outs[0])
        else:
            total = outs[0]
            for extra in outs[1:]:
                total = total + extra
            channel_outs.append(scale(total, 1.0 / len(outs)))
    return matmul(concat(channel_outs, axis=1), p.w_agg)


def actor_hub(
    q: Tensor,
    actor_id: int,
    t: int,
    actor_feats: ClipFeatures,
    cfg: SelectionConfig,
    p: HubParams,
    *,
    self_exclusion: str = "all",
    use_selection: bool = True,
    use_temporal: bool = True,
) -> Tensor:
    """Refine against other actors' rows; the query actor's own rows are
    excluded (everywhere by default, or only from the current clip)."""
    mem = build_memory(
        actor_feats,
        t,
        cfg,
        exclude_actor=actor_id,
        exclusion_scope=self_exclusion,
        use_selection=use_selection,
        use_temporal=use_temporal,
    )
    return hub_forward(q, mem, p)


def context_hub(
    q: Tensor,
    t: int,
    context_feats: ClipFeatures,
    cfg: SelectionConfig,
    p: HubParams,
    *,
    use_selection: bool = True,
    use_temporal: bool = True,
) -> Tensor:
    """Refine against context tokens; no exclusion applies."""
    mem = build_memory(
        context_feats,
        t,
        cfg,
        use_selection=use_selection,
        use_temporal=use_temporal,
    )
    return hub_forward(q, mem, p)
