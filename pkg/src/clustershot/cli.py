"""Operator commands: pretrain, evaluate, inspect-clusters.

Exit codes: 0 success, 1 runtime failure, 2 configuration error. Flags
override config-file values; ``CLUSTERSHOT_DATASET_ROOT`` overrides the
dataset root only.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .cluster import hdbscan
from .config import (
    ConfigError,
    EpisodicConfig,
    ExperimentConfig,
    config_to_dict,
    dump_config,
    load_config,
)
from .data import IngestError, load_split, sample_pretrain_batch
from .encoder import load_encoder
from .episodic import evaluate
from .losses import BatchLayout, pretrain_loss
from .pretrain import pretrain, pretrain_config_from_dict
from .rerank import rerank
from .seeding import DOMAIN_INSPECT, stream

ENV_DATASET_ROOT = "CLUSTERSHOT_DATASET_ROOT"


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clustershot")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, help="experiment config YAML")
        p.add_argument("--seed", type=int, help="override the experiment seed")
        p.add_argument("--out", type=Path, help="output root directory (default: out/)")
        p.add_argument("--dataset-root", type=Path, help="override the dataset root")

    p = sub.add_parser("pretrain", help="run self-supervised pre-training")
    common(p)
    p.add_argument("--steps", type=int, help="override pretrain.total_steps")
    p.add_argument("--log-every", type=int, default=0, help="print progress every N steps")

    p = sub.add_parser("evaluate", help="episodic evaluation of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--n", type=int, help="classes per episode")
    p.add_argument("--k", type=int, help="support shots per class")
    p.add_argument("--episodes", type=int, help="episodes per run")
    p.add_argument("--runs", type=int, help="independent evaluation runs")
    p.add_argument("--ft-epochs", type=int, help="head fine-tuning epochs")

    p = sub.add_parser("inspect-clusters", help="dump re-ranking and clustering of one batch")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--batch-originals", type=int, help="originals per batch (default: from checkpoint)")
    p.add_argument("--views", type=int, help="views per original (default: from checkpoint)")
    p.add_argument("--batch-index", type=int, default=0, help="which seeded batch to draw")

    return parser


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, pretrain=replace(cfg.pretrain, seed=args.seed))
    root_override = os.environ.get(ENV_DATASET_ROOT)
    if args.dataset_root is not None:
        cfg = replace(cfg, dataset_root=str(args.dataset_root))
    elif root_override:
        cfg = replace(cfg, dataset_root=root_override)
    return cfg


def _experiment_dir(args, cfg: ExperimentConfig) -> Path:
    out_root = args.out if args.out else Path("out")
    return Path(out_root) / cfg.name


def cmd_pretrain(args) -> int:
    cfg = _resolve_config(args)
    if args.steps is not None:
        cfg = replace(cfg, pretrain=replace(cfg.pretrain, total_steps=args.steps))
    root = Path(cfg.dataset_root)
    if not root.is_dir():
        raise IngestError(f"dataset root not found: {root}")

    exp_dir = _experiment_dir(args, cfg)
    exp_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, exp_dir / "config.echo")

    profile = cfg.profile
    train_samples = load_split(profile, "train", root)
    val_samples = None
    if cfg.pretrain.val_every and cfg.pretrain.total_steps >= cfg.pretrain.val_every:
        val_samples = load_split(profile, "val", root)

    final = pretrain(
        cfg.pretrain,
        cfg.encoder,
        train_samples,
        exp_dir,
        policy=cfg.augment,
        val_samples=val_samples,
        log_every=args.log_every,
    )
    print(f"final checkpoint: {final}")
    return 0


def _load_checkpoint_for(args, cfg: ExperimentConfig):
    encoder, payload = load_encoder(args.checkpoint)
    expected = tuple(cfg.profile.image_shape)
    actual = tuple(encoder.config.image_shape)
    if actual != expected:
        raise ConfigError(
            f"checkpoint encoder expects input {actual} but dataset profile "
            f"{cfg.dataset_profile!r} provides {expected}"
        )
    return encoder, payload


def cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    epi = cfg.episodic
    if args.split is not None:
        epi = replace(epi, split=args.split)
    if args.n is not None:
        epi = replace(epi, n_way=args.n)
    if args.k is not None:
        epi = replace(epi, k_shot=args.k)
    if args.episodes is not None:
        epi = replace(epi, episodes=args.episodes)
    if args.runs is not None:
        epi = replace(epi, runs=args.runs)
    if args.ft_epochs is not None:
        epi = replace(epi, finetune_epochs=args.ft_epochs)
    cfg = replace(cfg, episodic=epi)

    root = Path(cfg.dataset_root)
    if not root.is_dir():
        raise IngestError(f"dataset root not found: {root}")
    encoder, payload = _load_checkpoint_for(args, cfg)
    seed = args.seed if args.seed is not None else cfg.seed

    out_dir = Path(args.out) / cfg.name if args.out else args.checkpoint.parent.parent
    tag = f"{epi.split}_{epi.n_way}way_{epi.k_shot}shot"
    dump_config(
        cfg,
        out_dir / "eval" / f"{tag}.config.echo",
        extra={"checkpoint": str(args.checkpoint)},
    )

    samples = load_split(cfg.profile, epi.split, root)
    report = evaluate(
        encoder,
        samples,
        n_way=epi.n_way,
        k_shot=epi.k_shot,
        queries_per_class=epi.queries_per_class,
        episodes=epi.episodes,
        runs=epi.runs,
        seed=seed,
        ft_cfg=epi.finetune,
    )
    report_path = out_dir / "eval" / f"{tag}.json"
    report.save(report_path)
    print(report.table())
    print(f"report: {report_path}")
    return 0


def cmd_inspect_clusters(args) -> int:
    cfg = _resolve_config(args)
    root = Path(cfg.dataset_root)
    if not root.is_dir():
        raise IngestError(f"dataset root not found: {root}")
    encoder, payload = _load_checkpoint_for(args, cfg)
    train_cfg = pretrain_config_from_dict(payload["pretrain_config"])
    seed = args.seed if args.seed is not None else cfg.seed
    num_orig = args.batch_originals or train_cfg.num_originals
    views = args.views or train_cfg.views_per_original

    out_dir = Path(args.out) / cfg.name if args.out else args.checkpoint.parent.parent
    inspect_dir = out_dir / "inspect"
    inspect_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, inspect_dir / "config.echo", extra={"checkpoint": str(args.checkpoint)})

    samples = load_split(cfg.profile, "train", root)
    rng = stream(seed, DOMAIN_INSPECT, args.batch_index)
    batch = sample_pretrain_batch(samples, num_orig, views, cfg.augment, rng)

    with torch.no_grad():
        embeddings = encoder.embed(batch.images(), train=False)
    emb64 = np.asarray(embeddings, dtype=np.float64)
    reranked, parts = rerank(emb64, train_cfg.rerank.clipped(batch.size), return_parts=True)
    assignment, tree = hdbscan(reranked, train_cfg.resolved_cluster, return_tree=True)
    breakdown = pretrain_loss(embeddings, BatchLayout(num_orig, views), assignment)

    np.savez(
        inspect_dir / f"batch_{args.batch_index:03d}.npz",
        base_distances=parts["base"],
        rescaled_base=parts["rescaled_base"],
        jaccard=parts["jaccard"],
        reranked=reranked,
        labels=assignment.labels,
    )
    lines = [
        f"batch: {num_orig} originals x {views} views (B={batch.size}), seed={seed}, "
        f"index={args.batch_index}",
        f"clusters: P={assignment.n_clusters} sizes={assignment.sizes}",
        f"noise fraction: {assignment.noise_fraction:.4f}",
        f"loss: cluster={float(breakdown.cluster_term):.6f} "
        f"instance={float(breakdown.instance_term):.6f} total={float(breakdown.total):.6f} "
        f"(contributing views: {breakdown.cluster_view_count}/{breakdown.instance_view_count})",
    ]
    lines += tree.summary_lines()
    text = "\n".join(lines)
    (inspect_dir / f"batch_{args.batch_index:03d}.txt").write_text(text + "\n")
    print(text)
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "pretrain": cmd_pretrain,
        "evaluate": cmd_evaluate,
        "inspect-clusters": cmd_inspect_clusters,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, IngestError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
