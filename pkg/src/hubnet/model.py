"""Full model: per-modality query machines, aggregation head, task modes.

Each modality machine refines an actor query through an actor-interaction
block followed by a context block (optionally repeated); the refined
per-modality embeddings concatenate into a small MLP head. Ablation flags
switch every architectural component on or off so the same code path
serves the component and modality studies.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING

import numpy as np

from .attention import glorot
from .errors import ConfigError, ShapeError
from .hub import (
    ClipFeatures,
    HubParams,
    SelectionConfig,
    actor_hub,
    build_memory,
    context_hub,
    hub_forward,
    merge_token_banks,
)
from .rng import Rng
from .tensor import Tensor, concat, matmul, mean_rows, relu, row_softmax, sigmoid

if TYPE_CHECKING:  # circular-import guard; data builds on the types here
    from .data import VideoRecord

MODALITY_ORDER = ("vis", "key")
KEYPOINT_COUNT = 17
KEYPOINT_WIDTH = KEYPOINT_COUNT * 3


class TaskMode(Enum):
    """Per-actor multi-label localization vs per-video single-label recognition."""

    STAL = "stal"
    GAR = "gar"


@dataclass(frozen=True)
class AblationFlags:
    """Component and modality switches; invalid combinations fail fast."""

    use_hierarchy: bool = True
    use_hh: bool = True
    use_hc: bool = True
    use_temporal: bool = True
    use_selection: bool = True
    modalities: tuple[str, ...] = ("vis", "key")
    use_consistency: bool = True

    def __post_init__(self):
        bad = [m for m in self.modalities if m not in MODALITY_ORDER]
        if bad or not self.modalities:
            raise ConfigError(f"modalities must be a non-empty subset of {MODALITY_ORDER}")
        if len(set(self.modalities)) != len(self.modalities):
            raise ConfigError("duplicate modality")
        if not (self.use_hh or self.use_hc):
            raise ConfigError("at least one of use_hh/use_hc must stay on")
        if not self.use_hierarchy and not (self.use_hh and self.use_hc):
            raise ConfigError("the merged (non-hierarchical) variant needs both blocks on")
        if self.use_consistency and len(self.modalities) < 2:
            raise ConfigError("consistency training needs both modalities")

    def active_modalities(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITY_ORDER if m in self.modalities)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters (training knobs live in the run config)."""

    dim: int = 24
    attn_layers: int = 2
    heads: int = 1
    depth: int = 1
    share_channels: bool = False
    residual: bool = True
    normalize: bool = True
    classes: int = 5
    head_hidden: int = 32
    kp_hidden: int = 16
    raw_keypoints: bool = False
    window: int = 2
    top_k: int = 1
    self_exclusion: str = "all"
    hh_memories: str = "vis"  # or "matched"

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.self_exclusion not in ("all", "current"):
            raise ConfigError(f"self_exclusion must be 'all' or 'current', got {self.self_exclusion!r}")
        if self.hh_memories not in ("vis", "matched"):
            raise ConfigError(f"hh_memories must be 'vis' or 'matched', got {self.hh_memories!r}")
        if self.raw_keypoints and self.hh_memories == "matched":
            raise ConfigError("matched actor memories need embedded keypoint vectors")

    @property
    def selection(self) -> SelectionConfig:
        return SelectionConfig(window=self.window, top_k=self.top_k)


@dataclass
class ActorQuery:
    """One actor's modality-specific embedding with identity and time tags."""

    vec: Tensor  # 1 x D
    actor_id: int
    time: int
    modality: str

    def __post_init__(self):
        if self.modality not in MODALITY_ORDER:
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.vec.data.ndim != 2 or self.vec.shape[0] != 1:
            raise ShapeError(f"query vec must be 1 x D, got {self.vec.shape}")


@dataclass
class MlpParams:
    """Two-layer perceptron: linear, relu, linear."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, n_in: int, n_hidden: int, n_out: int, rng: Rng) -> "MlpParams":
        return cls(
            w1=glorot(rng, n_in, n_hidden),
            b1=Tensor(np.zeros((1, n_hidden)), requires_grad=True),
            w2=glorot(rng, n_hidden, n_out),
            b2=Tensor(np.zeros((1, n_out)), requires_grad=True),
        )

    def forward(self, x: Tensor) -> Tensor:
        hidden = relu(matmul(x, self.w1) + self.b1)
        return matmul(hidden, self.w2) + self.b2

    def named_tensors(self, prefix: str):
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2


@dataclass
class ModalityMachineParams:
    """One modality's stacked refinement stages (parameters shared across stages)."""

    hh: HubParams
    hc: HubParams
    depth: int = 1

    def named_tensors(self, prefix: str):
        yield from self.hh.named_tensors(f"{prefix}.hh")
        yield from self.hc.named_tensors(f"{prefix}.hc")


@dataclass
class ModelParams:
    """Everything learnable: per-modality machines, head MLP, keypoint embedder."""

    machines: dict[str, ModalityMachineParams]
    head: MlpParams
    kp_embedder: MlpParams | None = None

    def named_tensors(self):
        for modality in MODALITY_ORDER:
            if modality in self.machines:
                yield from self.machines[modality].named_tensors(modality)
        yield from self.head.named_tensors("head")
        if self.kp_embedder is not None:
            yield from self.kp_embedder.named_tensors("kp_embedder")

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.grad = None


def init_params(mcfg: ModelConfig, flags: AblationFlags, rng: Rng) -> ModelParams:
    """Fresh parameters, deterministic in the rng seed.

    Matrices are Glorot-uniform, biases zero, null tokens N(0, 0.02^2).
    """
    machines: dict[str, ModalityMachineParams] = {}
    for idx, modality in enumerate(flags.active_modalities()):
        sub = rng.spawn(10 + idx)
        machines[modality] = ModalityMachineParams(
            hh=HubParams.init(
                mcfg.dim, mcfg.attn_layers, sub.spawn(0),
                heads=mcfg.heads, share_channels=mcfg.share_channels,
                residual=mcfg.residual, normalize=mcfg.normalize,
            ),
            hc=HubParams.init(
                mcfg.dim, mcfg.attn_layers, sub.spawn(1),
                heads=mcfg.heads, share_channels=mcfg.share_channels,
                residual=mcfg.residual, normalize=mcfg.normalize,
            ),
            depth=mcfg.depth,
        )
    head_in = len(flags.active_modalities()) * mcfg.dim
    head = MlpParams.init(head_in, mcfg.head_hidden, mcfg.classes, rng.spawn(20))
    kp = None
    if mcfg.raw_keypoints and "key" in flags.active_modalities():
        kp = MlpParams.init(KEYPOINT_WIDTH, mcfg.kp_hidden, mcfg.dim, rng.spawn(21))
    return ModelParams(machines=machines, head=head, kp_embedder=kp)


def count_params(mcfg: ModelConfig, flags: AblationFlags) -> int:
    """Closed-form learnable-value count for a configuration.

    Per attention layer: 3 D^2 projections plus the 2D norm affine.
    Per block: 3 stacks (1 if channels are shared), the 3D x D aggregation
    and three 1 x D null tokens. Each modality has two blocks; the head is
    a (m D -> H -> C) MLP and the optional keypoint embedder a
    (51 -> kp_hidden -> D) MLP.
    """
    d = mcfg.dim
    per_layer = 3 * d * d + 2 * d
    stacks = 1 if mcfg.share_channels else 3
    per_block = stacks * mcfg.attn_layers * per_layer + 3 * d * d + 3 * d
    m = len(flags.active_modalities())
    total = m * 2 * per_block
    total += (m * d) * mcfg.head_hidden + mcfg.head_hidden
    total += mcfg.head_hidden * mcfg.classes + mcfg.classes
    if mcfg.raw_keypoints and "key" in flags.active_modalities():
        total += KEYPOINT_WIDTH * mcfg.kp_hidden + mcfg.kp_hidden
        total += mcfg.kp_hidden * d + d
    return total


def embed_keypoints(kp: np.ndarray, embedder: MlpParams) -> Tensor:
    """Map one 17 x 3 keypoint array (x, y, confidence in [0, 1]) to a 1 x D row."""
    arr = np.asarray(kp, dtype=float)
    if arr.shape != (KEYPOINT_COUNT, 3):
        raise ShapeError(f"keypoints must be {KEYPOINT_COUNT} x 3, got {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        warnings.warn("keypoint coordinates outside [0, 1]; clamping", RuntimeWarning)
        arr = np.clip(arr, 0.0, 1.0)
    return embedder.forward(Tensor(arr.reshape(1, KEYPOINT_WIDTH)))


def _hh_bank(video: "VideoRecord", modality: str, mcfg: ModelConfig) -> ClipFeatures:
    if mcfg.hh_memories == "matched" and modality == "key":
        return video.key_bank()
    return video.human_bank()


def _stage(
    q: Tensor,
    actor_id: int,
    t: int,
    video: "VideoRecord",
    machine: ModalityMachineParams,
    modality: str,
    flags: AblationFlags,
    mcfg: ModelConfig,
) -> Tensor:
    sel = mcfg.selection
    if not flags.use_hierarchy:
        merged = video.merged_bank(mcfg.hh_memories if modality == "key" else "vis")
        mem = build_memory(
            merged, t, sel,
            exclude_actor=actor_id, exclusion_scope=mcfg.self_exclusion,
            use_selection=flags.use_selection, use_temporal=flags.use_temporal,
        )
        return hub_forward(q, mem, machine.hh)
    out = q
    if flags.use_hh:
        out = actor_hub(
            out, actor_id, t, _hh_bank(video, modality, mcfg), sel, machine.hh,
            self_exclusion=mcfg.self_exclusion,
            use_selection=flags.use_selection, use_temporal=flags.use_temporal,
        )
    if flags.use_hc:
        out = context_hub(
            out, t, video.context, sel, machine.hc,
            use_selection=flags.use_selection, use_temporal=flags.use_temporal,
        )
    return out


def modality_forward(
    query: ActorQuery,
    video: "VideoRecord",
    machine: ModalityMachineParams,
    flags: AblationFlags,
    mcfg: ModelConfig,
) -> Tensor:
    """Refine one actor query against the video's token banks (1 x D out)."""
    out = query.vec
    for _ in range(machine.depth):
        out = _stage(out, query.actor_id, query.time, video, machine, query.modality, flags, mcfg)
    return out


@dataclass
class PredictOutput:
    """Scores plus the refined per-row embeddings that produced them.

    ``rows`` aligns with the embedding rows: one (actor_id, time) per row.
    STAL scores have one row per (actor, time); the single GAR score row
    is a distribution over classes.
    """

    scores: Tensor
    rows: list[tuple[int, int]]
    embeddings: dict[str, Tensor]


def _batched_refine(
    video: "VideoRecord",
    modality: str,
    machine: ModalityMachineParams,
    flags: AblationFlags,
    mcfg: ModelConfig,
    params: ModelParams,
) -> tuple[Tensor, list[tuple[int, int]]]:
    """All (actor, time) rows of one modality, context stage batched per clip."""
    sel = mcfg.selection
    fast = flags.use_hierarchy and machine.depth == 1
    per_t: list[Tensor] = []
    rows: list[tuple[int, int]] = []
    for t in range(video.num_clips):
        row_vecs = [video.query_vec(modality, i, t, params) for i in range(len(video.actor_ids))]
        rows.extend((aid, t) for aid in video.actor_ids)
        if not fast:
            outs = []
            for i, vec in enumerate(row_vecs):
                query = ActorQuery(vec=vec, actor_id=video.actor_ids[i], time=t, modality=modality)
                outs.append(modality_forward(query, video, machine, flags, mcfg))
            per_t.append(concat(outs, axis=0) if len(outs) > 1 else outs[0])
            continue
        if flags.use_hh:
            refined = [
                actor_hub(
                    vec, video.actor_ids[i], t, _hh_bank(video, modality, mcfg), sel, machine.hh,
                    self_exclusion=mcfg.self_exclusion,
                    use_selection=flags.use_selection, use_temporal=flags.use_temporal,
                )
                for i, vec in enumerate(row_vecs)
            ]
        else:
            refined = row_vecs
        stacked = concat(refined, axis=0) if len(refined) > 1 else refined[0]
        if flags.use_hc:
            stacked = context_hub(
                stacked, t, video.context, sel, machine.hc,
                use_selection=flags.use_selection, use_temporal=flags.use_temporal,
            )
        per_t.append(stacked)
    return concat(per_t, axis=0) if len(per_t) > 1 else per_t[0], rows


def predict(
    video: "VideoRecord",
    params: ModelParams,
    mode: TaskMode,
    flags: AblationFlags,
    mcfg: ModelConfig,
) -> PredictOutput:
    """Scores for one video: sigmoid rows per (actor, time) or one softmax row."""
    if not video.actor_ids:
        raise ConfigError(f"video {video.video_id} has no actors")
    embeddings: dict[str, Tensor] = {}
    rows: list[tuple[int, int]] = []
    for modality in flags.active_modalities():
        emb, rows = _batched_refine(video, modality, params.machines[modality], flags, mcfg, params)
        embeddings[modality] = emb
    if mode is TaskMode.GAR:
        pooled = [mean_rows(embeddings[m]) for m in flags.active_modalities()]
        fused = concat(pooled, axis=1) if len(pooled) > 1 else pooled[0]
        scores = row_softmax(params.head.forward(fused))
    else:
        parts = [embeddings[m] for m in flags.active_modalities()]
        fused = concat(parts, axis=1) if len(parts) > 1 else parts[0]
        scores = sigmoid(params.head.forward(fused))
    return PredictOutput(scores=scores, rows=rows, embeddings=embeddings)
