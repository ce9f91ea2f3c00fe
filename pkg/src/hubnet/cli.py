"""Command-line entry point: train, eval, gradcheck, ablate, gen-data.

Every command is deterministic under a fixed seed. Exit codes: 0 success,
1 configuration or data error, 2 numeric failure (non-finite loss or a
gradient-check breach).
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, with_overrides
from .data import generate, save_dataset
from .errors import ConfigError, DataFormatError, NumericError
from .losses import ConsistencyBatch, total_loss
from .model import init_params, modality_forward, ActorQuery, predict
from .rng import Rng
from .tensor import concat, constant, grad_check_named, matmul
from .train import evaluate, load_records, save_checkpoint, load_checkpoint, train_run

GRADCHECK_TOLERANCE = 1e-5

ABLATION_ROWS: list[tuple[str, dict]] = [
    ("key_only", {"modalities": "key", "use_consistency": False}),
    ("vis_only", {"modalities": "vis", "use_consistency": False}),
    ("both", {"use_consistency": False}),
    ("full", {}),
    ("no_hierarchy", {"use_hierarchy": False}),
    ("no_hc", {"use_hc": False}),
    ("no_hh", {"use_hh": False}),
    ("no_temporal", {"use_temporal": False}),
    ("no_selection", {"use_selection": False}),
]


def gradcheck_defaults() -> RunConfig:
    """Small dims so the elementwise finite-difference sweep stays fast."""
    return RunConfig(
        dim=4,
        clips=4,
        actors=2,
        tokens=3,
        classes=3,
        head_hidden=8,
        kp_hidden=8,
        raw_keypoints=True,
        num_videos=1,
        eval_videos=1,
        window=2,
        top_k=1,
    )


def gradcheck_report(cfg: RunConfig) -> dict[str, float]:
    """Max relative gradient error per parameter tensor through the full loss."""
    if cfg.dim > 8:
        raise ConfigError(f"gradcheck is restricted to dim <= 8, got {cfg.dim}")
    mode = cfg.task_mode()
    flags = cfg.flags()
    mcfg = cfg.model_config()
    loss_cfg = cfg.loss_config()
    records = generate(cfg.synthetic_config(num_videos=2))
    v0, v1 = records
    params = init_params(mcfg, flags, Rng(cfg.seed).spawn(100))
    times = Rng(cfg.seed).spawn(400)
    anchor_times = [times.int_below(v0.num_clips) for _ in v0.actor_ids]
    extra_time = times.int_below(v1.num_clips)

    def f():
        out = predict(v0, params, mode, flags, mcfg)
        targets = v0.gar_class if v0.gar_class is not None else v0.stal_targets()
        consistency = None
        if flags.use_consistency:
            n = len(v0.actor_ids)
            vis_parts, key_parts, ids = [], [], []
            for i, actor_id in enumerate(v0.actor_ids):
                row = anchor_times[i] * n + i
                sel = np.zeros((1, out.embeddings["vis"].shape[0]))
                sel[0, row] = 1.0
                vis_parts.append(matmul(constant(sel), out.embeddings["vis"]))
                key_parts.append(matmul(constant(sel), out.embeddings["key"]))
                ids.append(actor_id)
            for modality, parts in (("vis", vis_parts), ("key", key_parts)):
                query = ActorQuery(
                    vec=v1.query_vec(modality, 0, extra_time, params),
                    actor_id=v1.actor_ids[0],
                    time=extra_time,
                    modality=modality,
                )
                parts.append(modality_forward(query, v1, params.machines[modality], flags, mcfg))
            ids.append(v1.actor_ids[0])
            consistency = ConsistencyBatch(
                vis=concat(vis_parts, axis=0), key=concat(key_parts, axis=0), ids=ids
            )
        total, _, _ = total_loss(out.scores, targets, mode, loss_cfg, consistency)
        return total

    return grad_check_named(f, list(params.named_tensors()), eps=1e-5)


def _cmd_gradcheck(cfg: RunConfig) -> int:
    started = time.perf_counter()
    report = gradcheck_report(cfg)
    worst = 0.0
    for name, err in report.items():
        print(f"group={name} max_rel_err={err!r}")
        worst = max(worst, err)
    elapsed = time.perf_counter() - started
    print(f"worst={worst!r} tolerance={GRADCHECK_TOLERANCE!r} elapsed_s={elapsed:.1f}")
    if worst >= GRADCHECK_TOLERANCE:
        print("gradient check FAILED", file=sys.stderr)
        return 2
    print("gradient check passed")
    return 0


def _cmd_train(cfg: RunConfig, out_dir: Path) -> int:
    params, report, _ = train_run(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.txt").write_text("\n".join(report.lines()) + "\n")
    save_checkpoint(out_dir / "checkpoint", params, cfg)
    print(f"final metric={report.final_metric!r} alignment={report.final_alignment!r}")
    print(f"wall_clock_s={report.wall_clock:.2f}")
    print(f"wrote {out_dir / 'metrics.txt'} and {out_dir / 'checkpoint'}")
    return 0


def _cmd_eval(cfg: RunConfig | None, checkpoint: Path, out_dir: Path | None) -> int:
    params, ckpt_cfg = load_checkpoint(checkpoint)
    data_cfg = cfg if cfg is not None else ckpt_cfg
    # model structure always comes from the checkpoint
    merged = with_overrides(
        data_cfg,
        **{
            k: getattr(ckpt_cfg, k)
            for k in (
                "dim", "attn_layers", "heads", "depth", "share_channels", "residual",
                "normalize", "head_hidden", "kp_hidden", "window", "top_k",
                "self_exclusion", "hh_memories", "use_hierarchy", "use_hh", "use_hc",
                "use_temporal", "use_selection", "modalities", "use_consistency",
                "classes", "task", "raw_keypoints",
            )
        },
    )
    _, eval_records = load_records(merged)
    scores = evaluate(params, eval_records, merged)
    line = f"metric={scores['metric']!r} alignment={scores['alignment']!r}"
    print(line)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "eval.txt").write_text(line + "\n")
    return 0


def ablation_matrix(cfg: RunConfig) -> list[dict]:
    """Train every matrix row over the configured seeds; mean and sd per cell."""
    results = []
    for name, overrides in ABLATION_ROWS:
        metrics, aligns, seeds = [], [], []
        for rep in range(cfg.ablate_repeats):
            run_cfg = with_overrides(cfg, seed=cfg.seed + rep, **overrides)
            _, report, _ = train_run(run_cfg)
            metrics.append(report.final_metric)
            aligns.append(report.final_alignment)
            seeds.append(run_cfg.seed)
        results.append(
            {
                "row": name,
                "seeds": seeds,
                "metric_mean": float(np.mean(metrics)),
                "metric_sd": float(np.std(metrics, ddof=1)) if len(metrics) > 1 else 0.0,
                "alignment_mean": float(np.mean(aligns)),
                "alignment_sd": float(np.std(aligns, ddof=1)) if len(aligns) > 1 else 0.0,
                "metrics": metrics,
            }
        )
    return results


def _cmd_ablate(cfg: RunConfig, out_dir: Path) -> int:
    started = time.perf_counter()
    results = ablation_matrix(cfg)
    lines = []
    for r in results:
        lines.append(
            f"row={r['row']} seeds={','.join(str(s) for s in r['seeds'])} "
            f"metric_mean={r['metric_mean']!r} metric_sd={r['metric_sd']!r} "
            f"alignment_mean={r['alignment_mean']!r} alignment_sd={r['alignment_sd']!r}"
        )
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablate.txt").write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    print(f"wall_clock_s={time.perf_counter() - started:.1f}")
    return 0


def _cmd_gen_data(cfg: RunConfig, out_dir: Path) -> int:
    records = generate(cfg.synthetic_config())
    manifest = save_dataset(records, out_dir)
    print(f"wrote {len(records)} videos to {manifest}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hubnet")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_out in (
        ("train", True),
        ("eval", False),
        ("gradcheck", False),
        ("ablate", True),
        ("gen-data", True),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=Path, required=needs_out, default=None)
        if name == "eval":
            p.add_argument("--checkpoint", type=Path, required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.command == "gradcheck" and args.config is None:
            cfg = load_config(None, overrides, base=gradcheck_defaults())
        elif args.command == "eval" and args.config is None and not overrides:
            cfg = None
        else:
            cfg = load_config(args.config, overrides)
        if args.command == "train":
            return _cmd_train(cfg, args.out)
        if args.command == "eval":
            return _cmd_eval(cfg, args.checkpoint, args.out)
        if args.command == "gradcheck":
            return _cmd_gradcheck(cfg)
        if args.command == "ablate":
            return _cmd_ablate(cfg, args.out)
        if args.command == "gen-data":
            return _cmd_gen_data(cfg, args.out)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
