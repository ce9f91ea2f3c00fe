"""End-to-end training, evaluation and checkpointing on the synthetic data."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .ctf import read_ctf, write_ctf
from .data import VideoRecord, generate, load_manifest
from .errors import ConfigError, DataFormatError, NumericError
from .losses import ConsistencyBatch, total_loss
from .metrics import accuracy, alignment, mean_average_precision
from .model import ModelParams, TaskMode, init_params, predict
from .rng import Rng
from .tensor import Tape, Tensor, concat, constant, matmul


class Adam:
    """Standard Adam over a fixed, ordered set of named tensors."""

    def __init__(self, named, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.slots = [(name, t, np.zeros_like(t.data), np.zeros_like(t.data)) for name, t in named]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0

    def step(self) -> None:
        self.steps += 1
        b1c = 1.0 - self.beta1 ** self.steps
        b2c = 1.0 - self.beta2 ** self.steps
        for _, t, m, v in self.slots:
            g = t.grad if t.grad is not None else 0.0
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            t.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


@dataclass
class EpochRecord:
    epoch: int
    task_loss: float
    cc_loss: float
    total_loss: float
    metric: float
    alignment: float

    def line(self) -> str:
        return (
            f"epoch={self.epoch} task_loss={self.task_loss!r} cc_loss={self.cc_loss!r} "
            f"total_loss={self.total_loss!r} metric={self.metric!r} alignment={self.alignment!r}"
        )


@dataclass
class MetricsReport:
    """Per-epoch records plus final evaluation results.

    ``wall_clock`` is informational only and deliberately left out of the
    canonical metric lines so that identically seeded runs emit identical
    files.
    """

    epochs: list[EpochRecord]
    final_metric: float
    final_alignment: float
    wall_clock: float

    def lines(self) -> list[str]:
        out = [e.line() for e in self.epochs]
        out.append(f"final metric={self.final_metric!r} alignment={self.final_alignment!r}")
        return out


def load_records(cfg: RunConfig) -> tuple[list[VideoRecord], list[VideoRecord]]:
    """Train/eval split: the last ``eval_videos`` records are held out."""
    if cfg.data_manifest:
        records = load_manifest(cfg.data_manifest, expect_dim=cfg.dim)
    else:
        records = generate(cfg.synthetic_config())
    if len(records) <= cfg.eval_videos:
        raise ConfigError(
            f"need more than eval_videos={cfg.eval_videos} records, have {len(records)}"
        )
    return records[: -cfg.eval_videos], records[-cfg.eval_videos :]


def _video_targets(video: VideoRecord, mode: TaskMode):
    if mode is TaskMode.GAR:
        if video.gar_class is None:
            raise ConfigError(f"{video.video_id}: gar run needs per-video classes")
        return video.gar_class
    return video.stal_targets()


def _gather_rows(emb: Tensor, row_indices: list[int]) -> Tensor:
    sel = np.zeros((len(row_indices), emb.shape[0]))
    for out_row, src in enumerate(row_indices):
        sel[out_row, src] = 1.0
    return matmul(constant(sel), emb)


def _batch_loss(
    videos: list[VideoRecord],
    params: ModelParams,
    cfg: RunConfig,
    batch_rng: Rng,
):
    mode = cfg.task_mode()
    flags = cfg.flags()
    mcfg = cfg.model_config()
    loss_cfg = cfg.loss_config()

    outputs = [predict(v, params, mode, flags, mcfg) for v in videos]
    scores = concat([o.scores for o in outputs], axis=0) if len(outputs) > 1 else outputs[0].scores
    if mode is TaskMode.GAR:
        targets = [_video_targets(v, mode) for v in videos]
    else:
        targets = np.concatenate([_video_targets(v, mode) for v in videos], axis=0)

    consistency = None
    if flags.use_consistency:
        vis_rows, key_rows, ids = [], [], []
        for video, out in zip(videos, outputs):
            n = len(video.actor_ids)
            clips = video.num_clips
            for i, actor_id in enumerate(video.actor_ids):
                t = batch_rng.int_below(clips)
                row = t * n + i
                vis_rows.append((out.embeddings["vis"], row))
                key_rows.append((out.embeddings["key"], row))
                ids.append(actor_id)
        if len(ids) >= 2:
            vis = concat([_gather_rows(e, [r]) for e, r in vis_rows], axis=0)
            key = concat([_gather_rows(e, [r]) for e, r in key_rows], axis=0)
            consistency = ConsistencyBatch(vis=vis, key=key, ids=ids)

    return total_loss(scores, targets, mode, loss_cfg, consistency)


def evaluate(params: ModelParams, records: list[VideoRecord], cfg: RunConfig) -> dict[str, float]:
    """Deterministic forward-only evaluation: task metric and alignment."""
    mode = cfg.task_mode()
    flags = cfg.flags()
    mcfg = cfg.model_config()
    all_scores, all_targets, preds, classes = [], [], [], []
    vis_emb, key_emb = [], []
    for video in records:
        out = predict(video, params, mode, flags, mcfg)
        if mode is TaskMode.GAR:
            preds.append(int(np.argmax(out.scores.data[0])))
            classes.append(_video_targets(video, mode))
        else:
            all_scores.append(out.scores.data)
            all_targets.append(_video_targets(video, mode))
        if "vis" in out.embeddings and "key" in out.embeddings:
            vis_emb.append(out.embeddings["vis"].data)
            key_emb.append(out.embeddings["key"].data)
    if mode is TaskMode.GAR:
        metric = accuracy(preds, classes)
    else:
        metric = mean_average_precision(np.concatenate(all_scores), np.concatenate(all_targets))
    align = 0.0
    if vis_emb:
        align = alignment(np.concatenate(vis_emb), np.concatenate(key_emb))
    return {"metric": metric, "alignment": align}


def train_run(cfg: RunConfig) -> tuple[ModelParams, MetricsReport, list[VideoRecord]]:
    """Train per config; returns parameters, the report, and the eval split."""
    cfg.validate()
    started = time.perf_counter()
    train_records, eval_records = load_records(cfg)
    root = Rng(cfg.seed)
    params = init_params(cfg.model_config(), cfg.flags(), root.spawn(100))
    adam = Adam(
        list(params.named_tensors()), lr=cfg.lr,
        beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps,
    )
    order_rng = root.spawn(200)
    epochs: list[EpochRecord] = []
    for epoch in range(1, cfg.epochs + 1):
        order = list(range(len(train_records)))
        order_rng.shuffle(order)
        batch_rng = root.spawn(300 + epoch)
        task_losses, cc_losses, totals = [], [], []
        for start in range(0, len(order), cfg.batch_videos):
            chunk = [train_records[i] for i in order[start : start + cfg.batch_videos]]
            params.zero_grad()
            try:
                with Tape() as tape:
                    total, task, cc = _batch_loss(chunk, params, cfg, batch_rng)
                if cfg.lr > 0:
                    tape.backward(total)
                    adam.step()
            except NumericError as exc:
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}: {exc}"
                ) from exc
            task_losses.append(task.item())
            cc_losses.append(cc.item() if cc is not None else 0.0)
            totals.append(total.item())
        scores = evaluate(params, eval_records, cfg)
        epochs.append(
            EpochRecord(
                epoch=epoch,
                task_loss=float(np.mean(task_losses)),
                cc_loss=float(np.mean(cc_losses)),
                total_loss=float(np.mean(totals)),
                metric=scores["metric"],
                alignment=scores["alignment"],
            )
        )
    final = evaluate(params, eval_records, cfg) if cfg.epochs == 0 else {
        "metric": epochs[-1].metric,
        "alignment": epochs[-1].alignment,
    }
    report = MetricsReport(
        epochs=epochs,
        final_metric=final["metric"],
        final_alignment=final["alignment"],
        wall_clock=time.perf_counter() - started,
    )
    return params, report, eval_records


# ---------------------------------------------------------------------------
# Checkpoints: a directory of CTF tensors plus a key=value manifest.


def save_checkpoint(out_dir: str | Path, params: ModelParams, cfg: RunConfig) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"config.{k}={v}" for k, v in sorted(cfg.to_dict().items())]
    for idx, (name, tensor) in enumerate(params.named_tensors()):
        fname = f"t{idx:04d}.ctf"
        write_ctf(out / fname, tensor.data)
        lines.append(f"tensor.{name}={fname}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return out


def load_checkpoint(ckpt_dir: str | Path) -> tuple[ModelParams, RunConfig]:
    ckpt = Path(ckpt_dir)
    manifest = ckpt / "manifest.txt"
    if not manifest.exists():
        raise DataFormatError(f"{manifest}: checkpoint manifest not found")
    config_items: list[str] = []
    tensor_files: dict[str, str] = {}
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        if key.startswith("config."):
            config_items.append(f"{key[len('config.'):]}={value}")
        elif key.startswith("tensor."):
            tensor_files[key[len("tensor."):]] = value
        else:
            raise DataFormatError(f"{manifest}: unexpected line {line!r}")
    cfg = load_config(None, config_items)
    params = init_params(cfg.model_config(), cfg.flags(), Rng(cfg.seed).spawn(100))
    named = dict(params.named_tensors())
    if set(named) != set(tensor_files):
        missing = set(named) ^ set(tensor_files)
        raise DataFormatError(f"{manifest}: tensor set mismatch on {sorted(missing)}")
    for name, fname in tensor_files.items():
        arr = read_ctf(ckpt / fname).astype(np.float64)
        if arr.shape != named[name].data.shape:
            raise DataFormatError(
                f"{ckpt / fname}: shape {arr.shape} != expected {named[name].data.shape}"
            )
        named[name].data = arr
    return params, cfg
