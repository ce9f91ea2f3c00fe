"""Feature ingestion and the synthetic multi-modal video generator.

The generator plants label evidence so that every architectural component
carries signal that the others cannot replace:

* Per (actor, time, class) there is a sign latent: u-latents ride in the
  visual space, w-latents in the skeleton space. Classes split into
  vis-owned (label = sign of u), key-owned (sign of w) and joint (sign of
  u * w, so neither modality decodes it alone).
* A fraction ``temporal_strength`` (rho) of each latent's evidence moves
  out of the query vector into the context tokens of the two neighboring
  clips, so the past/future channels and the context block are needed to
  recover it. At rho=1 the query and current clip carry none of it.
* Each actor's u-latents are additionally copied into the *next* actor's
  feature rows (same rho split across time), reachable only through the
  actor-interaction block.
* Context slots and actor rows share per-actor tag directions and a
  slowly drifting per-video scene vector; neighboring clips therefore
  look most similar, which is what clip selection keys on. Non-actor
  context slots carry high-amplitude junk that pure averaging (selection
  off) mixes in.
* Queries also carry modality-private nuisance components; the refined
  embeddings of the two modalities agree only on shared content, which is
  what the consistency loss rewards.

Labels are functions of the latents alone, never of the noise draws.
All emitted arrays are quantized to float32 values (kept in float64), so
writing and re-reading tensor files is lossless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ctf import read_ctf, write_ctf
from .errors import ConfigError, DataFormatError, ShapeError
from .hub import ClipFeatures, merge_token_banks
from .model import KEYPOINT_COUNT, ModelParams, TaskMode, embed_keypoints
from .rng import Rng
from .tensor import Tensor


@dataclass(frozen=True)
class SyntheticConfig:
    seed: int = 0
    num_videos: int = 24
    clips: int = 6
    actors: int = 2
    tokens: int = 4
    dim: int = 40
    classes: int = 5
    noise: float = 0.3
    temporal_strength: float = 0.5  # rho
    frac_vis: float = 0.35
    frac_key: float = 0.25
    frac_joint: float = 0.4
    task: TaskMode = TaskMode.STAL
    raw_keypoints: bool = False
    # amplitudes
    tag_amp: float = 1.0
    code_amp: float = 1.5
    ctx_gain: float = 1.6
    shared_amp: float = 0.5
    scene_amp: float = 0.8
    actor_scene_amp: float = 0.25
    scene_drift: float = 0.7
    social_amp: float = 0.9
    nuisance_amp: float = 1.5
    junk_amp: float = 1.5

    def __post_init__(self):
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")
        if not (0.0 <= self.temporal_strength <= 1.0):
            raise ConfigError(f"temporal_strength must be in [0, 1], got {self.temporal_strength}")
        total = self.frac_vis + self.frac_key + self.frac_joint
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"modality fractions must sum to 1, got {total}")
        for name in ("num_videos", "clips", "actors", "tokens", "dim", "classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def class_split(self) -> tuple[list[int], list[int], list[int]]:
        """Class indices owned by vis, by key, and jointly (largest remainder)."""
        fracs = [self.frac_vis, self.frac_key, self.frac_joint]
        base = [int(math.floor(f * self.classes)) for f in fracs]
        leftover = self.classes - sum(base)
        order = sorted(range(3), key=lambda i: (-(fracs[i] * self.classes - base[i]), i))
        for i in order[:leftover]:
            base[i] += 1
        vis_end = base[0]
        key_end = base[0] + base[1]
        return (
            list(range(0, vis_end)),
            list(range(vis_end, key_end)),
            list(range(key_end, self.classes)),
        )


@dataclass
class VideoRecord:
    """One video's ingested features and labels."""

    video_id: str
    actor_ids: list[int]
    context: ClipFeatures
    vis: np.ndarray  # T x N x D
    key: np.ndarray | None = None  # T x N x D
    keypoints: np.ndarray | None = None  # T x N x 17 x 3
    stal_labels: np.ndarray | None = None  # T x N x C
    gar_class: int | None = None
    _human_bank: ClipFeatures | None = field(default=None, repr=False)
    _key_bank: ClipFeatures | None = field(default=None, repr=False)
    _merged: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.vis.ndim != 3:
            raise ShapeError(f"{self.video_id}: vis bank must be T x N x D, got {self.vis.shape}")
        if self.vis.shape[0] != self.context.num_clips:
            raise ShapeError(
                f"{self.video_id}: vis has {self.vis.shape[0]} clips, context {self.context.num_clips}"
            )
        if self.vis.shape[1] != len(self.actor_ids):
            raise ShapeError(
                f"{self.video_id}: vis has {self.vis.shape[1]} actors, ids list {len(self.actor_ids)}"
            )
        if self.key is None and self.keypoints is None:
            raise ShapeError(f"{self.video_id}: need key vectors or raw keypoints")

    @property
    def num_clips(self) -> int:
        return self.vis.shape[0]

    def _ids_grid(self) -> np.ndarray:
        return np.tile(np.asarray(self.actor_ids, dtype=int), (self.num_clips, 1))

    def human_bank(self) -> ClipFeatures:
        if self._human_bank is None:
            self._human_bank = ClipFeatures(tokens=self.vis, token_ids=self._ids_grid())
        return self._human_bank

    def key_bank(self) -> ClipFeatures:
        if self.key is None:
            raise ConfigError(f"{self.video_id}: no embedded skeleton vectors in raw mode")
        if self._key_bank is None:
            self._key_bank = ClipFeatures(tokens=self.key, token_ids=self._ids_grid())
        return self._key_bank

    def merged_bank(self, human_source: str = "vis") -> ClipFeatures:
        if human_source not in self._merged:
            human = self.key_bank() if human_source == "matched" else self.human_bank()
            self._merged[human_source] = merge_token_banks(human, self.context)
        return self._merged[human_source]

    def query_vec(self, modality: str, actor_index: int, t: int, params: ModelParams) -> Tensor:
        if modality == "vis":
            return Tensor(self.vis[t, actor_index][None, :])
        if self.key is not None:
            return Tensor(self.key[t, actor_index][None, :])
        if params.kp_embedder is None:
            raise ConfigError("raw keypoints present but the model has no embedder")
        return embed_keypoints(self.keypoints[t, actor_index], params.kp_embedder)

    def stal_targets(self) -> np.ndarray:
        """Targets aligned with prediction rows: (T * N) x C, t-major."""
        if self.stal_labels is None:
            raise ConfigError(f"{self.video_id}: no per-actor labels")
        t, n, c = self.stal_labels.shape
        return self.stal_labels.reshape(t * n, c)


def _f32(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32).astype(np.float64)


def _orthonormal_set(rng: Rng, count: int, dim: int) -> list[np.ndarray]:
    """`count` unit directions; exactly orthogonal when they fit in `dim`."""
    raw = [rng.unit_vector(dim) for _ in range(count)]
    if count > dim:
        return raw
    basis: list[np.ndarray] = []
    for v in raw:
        u = v.copy()
        for b in basis:
            u -= (u @ b) * b
        norm = np.linalg.norm(u)
        u = u / norm if norm > 1e-12 else rng.unit_vector(dim)
        basis.append(u)
    return basis


class _Directions:
    """Unit payload directions; orthogonal when the width allows it.

    Context payload directions are per (class, actor): uniform attention
    over a clip's slots then still passes each actor's temporal evidence
    on its own subspace, which gives the routing gradient something to
    bite on from the first epoch.
    """

    def __init__(self, cfg: SyntheticConfig, rng: Rng, n_vis_codes: int, n_key_codes: int):
        n = cfg.actors
        count = (
            n + n_vis_codes + n_key_codes + n_vis_codes + 2
            + n * (n_vis_codes + n_key_codes) + cfg.classes
        )
        dirs = _orthonormal_set(rng, count, cfg.dim)
        it = iter(dirs)
        self.tags = [next(it) for _ in range(n)]
        self.shared = [next(it) for _ in range(cfg.classes)]
        self.vis_code = [next(it) for _ in range(n_vis_codes)]
        self.key_code = [next(it) for _ in range(n_key_codes)]
        self.social = [next(it) for _ in range(n_vis_codes)]
        self.nuis_vis = next(it)
        self.nuis_key = next(it)
        self.ctx_u = [[next(it) for _ in range(n)] for _ in range(n_vis_codes)]
        self.ctx_w = [[next(it) for _ in range(n)] for _ in range(n_key_codes)]


def _scene_walk(rng: Rng, clips: int, dim: int, drift: float) -> list[np.ndarray]:
    walk = [rng.unit_vector(dim)]
    for _ in range(1, clips):
        step = walk[-1] + drift * rng.unit_vector(dim)
        walk.append(step / np.linalg.norm(step))
    return walk


def _base_pose() -> np.ndarray:
    # fixed plausible skeleton: joints spread over the unit square
    grid = np.linspace(0.25, 0.75, KEYPOINT_COUNT)
    pose = np.stack([grid, grid[::-1], np.full(KEYPOINT_COUNT, 0.9)], axis=1)
    return pose


def generate(cfg: SyntheticConfig) -> list[VideoRecord]:
    """Synthesize a dataset; identical config gives identical bytes."""
    root = Rng(cfg.seed)
    dirs_rng = root.spawn(0)
    lat_rng = root.spawn(1)
    noise_rng = root.spawn(2)
    misc_rng = root.spawn(3)

    vis_owned, key_owned, joint = cfg.class_split()
    vis_codes = sorted(vis_owned + joint)  # classes whose u-latent exists
    key_codes = sorted(key_owned + joint)
    u_pos = {c: i for i, c in enumerate(vis_codes)}
    w_pos = {c: i for i, c in enumerate(key_codes)}
    dirs = _Directions(cfg, dirs_rng, len(vis_codes), len(key_codes))

    T, N, S, D, C = cfg.clips, cfg.actors, cfg.tokens, cfg.dim, cfg.classes
    rho = cfg.temporal_strength
    kp_offsets = None
    if cfg.raw_keypoints:
        kp_offsets = [
            dirs_rng.normal_array((KEYPOINT_COUNT, 3), std=1.0) * 0.05 for _ in key_codes
        ]

    records: list[VideoRecord] = []
    for v in range(cfg.num_videos):
        # latent signs, one per (actor, time, carried class)
        u = np.zeros((N, T, len(vis_codes)))
        w = np.zeros((N, T, len(key_codes)))
        if cfg.task is TaskMode.GAR:
            gar_class = lat_rng.int_below(C)
        else:
            gar_class = None
        for i in range(N):
            for t in range(T):
                for j, c in enumerate(vis_codes):
                    if cfg.task is TaskMode.GAR:
                        u[i, t, j] = 1.0 if c == gar_class else -1.0
                    else:
                        u[i, t, j] = 1.0 if lat_rng.uniform() < 0.5 else -1.0
                for j, c in enumerate(key_codes):
                    if cfg.task is TaskMode.GAR:
                        w[i, t, j] = 1.0 if c == gar_class else -1.0
                    else:
                        w[i, t, j] = 1.0 if lat_rng.uniform() < 0.5 else -1.0

        labels = np.zeros((T, N, C))
        label_sign = np.zeros((N, T, C))
        for t in range(T):
            for i in range(N):
                for c in range(C):
                    if c in vis_owned:
                        s = u[i, t, u_pos[c]]
                    elif c in key_owned:
                        s = w[i, t, w_pos[c]]
                    else:
                        s = u[i, t, u_pos[c]] * w[i, t, w_pos[c]]
                    label_sign[i, t, c] = s
                    labels[t, i, c] = 1.0 if s > 0 else 0.0

        scene = _scene_walk(misc_rng, T, D, cfg.scene_drift)
        xi_vis = misc_rng.normal_array((N, T))
        xi_key = misc_rng.normal_array((N, T))

        vis = np.zeros((T, N, D))
        key = np.zeros((T, N, D))
        keypoints = np.zeros((T, N, KEYPOINT_COUNT, 3)) if cfg.raw_keypoints else None
        for t in range(T):
            for i in range(N):
                vec = cfg.tag_amp * dirs.tags[i] + cfg.actor_scene_amp * scene[t]
                for j in range(len(vis_codes)):
                    vec = vec + cfg.code_amp * (1.0 - rho) * u[i, t, j] * dirs.vis_code[j]
                # copy of the previous actor's u-latents, rho-split across time
                p = (i - 1) % N
                for j in range(len(vis_codes)):
                    amount = (1.0 - rho) * u[p, t, j]
                    if t > 0:
                        amount += rho * u[p, t - 1, j]
                    if t < T - 1:
                        amount += rho * u[p, t + 1, j]
                    vec = vec + cfg.social_amp * amount * dirs.social[j]
                for c in range(C):
                    vec = vec + cfg.shared_amp * (1.0 - rho) * label_sign[i, t, c] * dirs.shared[c]
                vec = vec + cfg.nuisance_amp * xi_vis[i, t] * dirs.nuis_vis
                vis[t, i] = vec + cfg.noise * noise_rng.normal_array((D,))

                kvec = cfg.tag_amp * dirs.tags[i]
                for j in range(len(key_codes)):
                    kvec = kvec + cfg.code_amp * (1.0 - rho) * w[i, t, j] * dirs.key_code[j]
                for c in range(C):
                    kvec = kvec + cfg.shared_amp * (1.0 - rho) * label_sign[i, t, c] * dirs.shared[c]
                kvec = kvec + cfg.nuisance_amp * xi_key[i, t] * dirs.nuis_key
                key[t, i] = kvec + cfg.noise * noise_rng.normal_array((D,))

                if cfg.raw_keypoints:
                    pose = _base_pose()
                    for j in range(len(key_codes)):
                        pose = pose + w[i, t, j] * kp_offsets[j]
                    pose = pose + 0.02 * cfg.noise * noise_rng.normal_array((KEYPOINT_COUNT, 3))
                    keypoints[t, i] = np.clip(pose, 0.0, 1.0)

        context = np.zeros((T, S, D))
        for t in range(T):
            for s in range(S):
                if s < N:
                    i = s
                    tok = cfg.tag_amp * dirs.tags[i] + cfg.scene_amp * scene[t]
                    # evidence about the neighboring clips' latents lives here
                    for j in range(len(vis_codes)):
                        amount = 0.0
                        if t > 0:
                            amount += rho * u[i, t - 1, j]
                        if t < T - 1:
                            amount += rho * u[i, t + 1, j]
                        tok = tok + cfg.code_amp * cfg.ctx_gain * amount * dirs.ctx_u[j][i]
                    for j in range(len(key_codes)):
                        amount = 0.0
                        if t > 0:
                            amount += rho * w[i, t - 1, j]
                        if t < T - 1:
                            amount += rho * w[i, t + 1, j]
                        tok = tok + cfg.code_amp * cfg.ctx_gain * amount * dirs.ctx_w[j][i]
                else:
                    tok = cfg.scene_amp * scene[t]
                    tok = tok + cfg.junk_amp * misc_rng.normal() * misc_rng.unit_vector(D)
                context[t, s] = tok + cfg.noise * noise_rng.normal_array((D,))

        records.append(
            VideoRecord(
                video_id=f"v{v:04d}",
                actor_ids=[v * N + i for i in range(N)],
                context=ClipFeatures(tokens=_f32(context)),
                vis=_f32(vis),
                key=None if cfg.raw_keypoints else _f32(key),
                keypoints=_f32(keypoints) if cfg.raw_keypoints else None,
                stal_labels=labels if cfg.task is TaskMode.STAL else None,
                gar_class=gar_class,
            )
        )
    return records


# ---------------------------------------------------------------------------
# Manifest I/O. One record per line, space-separated key=value fields:
#
#   video=<id> task=<stal|gar> actors=<id,id,...> context=<file> vis=<file>
#   [key=<file>] [keypoints=<file>] [labels=<file>] [class=<int>]
#
# Paths are relative to the manifest. Lines starting with '#' are comments.


def save_dataset(records: list[VideoRecord], out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in records:
        fields = [f"video={rec.video_id}"]
        fields.append(f"task={'gar' if rec.gar_class is not None else 'stal'}")
        fields.append("actors=" + ",".join(str(a) for a in rec.actor_ids))
        write_ctf(out / f"{rec.video_id}_context.ctf", rec.context.tokens)
        fields.append(f"context={rec.video_id}_context.ctf")
        write_ctf(out / f"{rec.video_id}_vis.ctf", rec.vis)
        fields.append(f"vis={rec.video_id}_vis.ctf")
        if rec.key is not None:
            write_ctf(out / f"{rec.video_id}_key.ctf", rec.key)
            fields.append(f"key={rec.video_id}_key.ctf")
        if rec.keypoints is not None:
            t, n = rec.keypoints.shape[:2]
            write_ctf(out / f"{rec.video_id}_kp.ctf", rec.keypoints.reshape(t, n, -1))
            fields.append(f"keypoints={rec.video_id}_kp.ctf")
        if rec.stal_labels is not None:
            write_ctf(out / f"{rec.video_id}_labels.ctf", rec.stal_labels)
            fields.append(f"labels={rec.video_id}_labels.ctf")
        if rec.gar_class is not None:
            fields.append(f"class={rec.gar_class}")
        lines.append(" ".join(fields))
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def _parse_line(line: str, lineno: int, path: Path) -> dict[str, str]:
    fields = {}
    for token in line.split():
        if "=" not in token:
            raise DataFormatError(f"{path}:{lineno}: malformed field {token!r}")
        k, _, val = token.partition("=")
        fields[k] = val
    for required in ("video", "task", "actors", "context", "vis"):
        if required not in fields:
            raise DataFormatError(f"{path}:{lineno}: missing field {required!r}")
    return fields


def load_manifest(path: str | Path, expect_dim: int | None = None) -> list[VideoRecord]:
    manifest = Path(path)
    if not manifest.exists():
        raise DataFormatError(f"{manifest}: manifest not found")
    base = manifest.parent
    records = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = _parse_line(line, lineno, manifest)
        vid = fields["video"]
        context = read_ctf(base / fields["context"]).astype(np.float64)
        vis = read_ctf(base / fields["vis"]).astype(np.float64)
        if expect_dim is not None and vis.shape[-1] != expect_dim:
            raise DataFormatError(
                f"{base / fields['vis']}: feature dim {vis.shape[-1]} != configured {expect_dim}"
            )
        if context.shape[-1] != vis.shape[-1]:
            raise DataFormatError(
                f"{base / fields['context']}: context dim {context.shape[-1]} != vis dim {vis.shape[-1]}"
            )
        if context.shape[0] != vis.shape[0]:
            raise DataFormatError(
                f"{base / fields['context']}: {context.shape[0]} clips but vis has {vis.shape[0]}"
            )
        actor_ids = [int(a) for a in fields["actors"].split(",")]
        key = None
        keypoints = None
        if "key" in fields:
            key = read_ctf(base / fields["key"]).astype(np.float64)
            if key.shape != vis.shape:
                raise DataFormatError(f"{base / fields['key']}: shape {key.shape} != vis {vis.shape}")
        if "keypoints" in fields:
            flat = read_ctf(base / fields["keypoints"]).astype(np.float64)
            if flat.shape[:2] != vis.shape[:2] or flat.shape[2] != KEYPOINT_COUNT * 3:
                raise DataFormatError(
                    f"{base / fields['keypoints']}: shape {flat.shape} does not match {vis.shape[:2]} x 51"
                )
            keypoints = flat.reshape(flat.shape[0], flat.shape[1], KEYPOINT_COUNT, 3)
        stal_labels = None
        gar_class = None
        if fields["task"] == "gar":
            if "class" not in fields:
                raise DataFormatError(f"{manifest}:{lineno}: gar record without class")
            gar_class = int(fields["class"])
        elif "labels" in fields:
            stal_labels = read_ctf(base / fields["labels"]).astype(np.float64)
            if stal_labels.shape[:2] != (vis.shape[0], vis.shape[1]):
                raise DataFormatError(
                    f"{base / fields['labels']}: label grid {stal_labels.shape[:2]} != clips x actors"
                )
        else:
            raise DataFormatError(f"{manifest}:{lineno}: stal record without labels")
        records.append(
            VideoRecord(
                video_id=vid,
                actor_ids=actor_ids,
                context=ClipFeatures(tokens=context),
                vis=vis,
                key=key,
                keypoints=keypoints,
                stal_labels=stal_labels,
                gar_class=gar_class,
            )
        )
    return records
