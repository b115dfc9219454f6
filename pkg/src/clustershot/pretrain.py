"""Outer optimisation loop: batch -> embed -> re-rank -> cluster -> loss -> step.

Runs Adam on the encoder with a step-decayed learning rate, appends one CSV
row per step, checkpoints on a cadence, and resumes exactly from the latest
checkpoint (batches are a pure function of (seed, step), so a resumed run is
bit-identical to an uninterrupted one).
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentationPolicy
from .cluster import ClusterAssignment, ClusterConfig, hdbscan
from .data import ImageSample, PretrainBatch, sample_pretrain_batch
from .encoder import ConvEncoder, EncoderConfig, init_encoder, load_encoder, save_encoder
from .episodic import FinetuneConfig, run_episode
from .losses import BatchLayout, LossBreakdown, pretrain_loss
from .rerank import RerankConfig, rerank
from .seeding import DOMAIN_PRETRAIN_BATCH, DOMAIN_VALIDATION, stream
from .data import sample_episode

LOSS_CSV_HEADER = "step,lr,L1,L2,total,P,noise_fraction"
VAL_CSV_HEADER = "step,accuracy,query_loss"


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; diagnostics were dumped before raising."""


@dataclass(frozen=True)
class PretrainConfig:
    num_originals: int = 50  # originals per batch
    views_per_original: int = 3
    total_steps: int = 10_000
    lr: float = 1e-3
    lr_decay: float = 0.5
    lr_decay_every: int = 25_000
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float | None = None  # off unless set
    seed: int = 0
    checkpoint_every: int = 1_000
    val_every: int = 2_500  # 0 disables validation
    val_tasks: int = 15
    val_n_way: int = 5
    val_k_shot: int = 1
    val_queries: int = 15
    rerank: RerankConfig = field(default_factory=RerankConfig)
    cluster: ClusterConfig | None = None  # None -> min_cluster_size = Q+1

    def validate(self) -> None:
        if self.num_originals < 1 or self.views_per_original < 1:
            raise ValueError("batch sizes must be positive")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if self.lr_decay_every < 1:
            raise ValueError("lr_decay_every must be >= 1")

    @property
    def batch_size(self) -> int:
        return self.num_originals * (self.views_per_original + 1)

    @property
    def resolved_cluster(self) -> ClusterConfig:
        if self.cluster is not None:
            return self.cluster
        # A semantic cluster should at least hold one original and its views.
        return ClusterConfig(min_cluster_size=self.views_per_original + 1)


def lr_at(step: int, cfg: PretrainConfig) -> float:
    """Step-decayed rate: lr * decay^(step // interval)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return cfg.lr * cfg.lr_decay ** (step // cfg.lr_decay_every)


@dataclass
class TrainState:
    config: PretrainConfig
    encoder: ConvEncoder
    optimizer: torch.optim.Adam
    step: int = 0


@dataclass
class StepRecord:
    step: int
    lr: float
    breakdown: LossBreakdown
    n_clusters: int
    noise_fraction: float

    def csv_row(self) -> str:
        return ",".join(
            [
                str(self.step),
                repr(self.lr),
                repr(float(self.breakdown.cluster_term)),
                repr(float(self.breakdown.instance_term)),
                repr(float(self.breakdown.total)),
                str(self.n_clusters),
                repr(self.noise_fraction),
            ]
        )


def init_train_state(cfg: PretrainConfig, encoder_cfg: EncoderConfig) -> TrainState:
    cfg.validate()
    encoder = init_encoder(encoder_cfg, cfg.seed)
    optimizer = torch.optim.Adam(
        encoder.parameters(), lr=cfg.lr, betas=cfg.adam_betas, eps=cfg.adam_eps
    )
    return TrainState(config=cfg, encoder=encoder, optimizer=optimizer)


def pretrain_step(state: TrainState, batch: PretrainBatch) -> tuple[TrainState, StepRecord]:
    """One optimisation step; raises TrainingDiverged on non-finite loss."""
    cfg = state.config
    embeddings = state.encoder.embed(batch.images(), train=True)
    detached = embeddings.detach().to(torch.float64).numpy()

    reranked = rerank(detached, cfg.rerank.clipped(batch.size))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # tiny batches fall back to all-noise
        assignment = hdbscan(reranked, cfg.resolved_cluster)

    layout = BatchLayout(batch.num_originals, batch.views_per_original)
    try:
        breakdown = pretrain_loss(embeddings, layout, assignment)
    except FloatingPointError as exc:
        raise TrainingDiverged(str(exc)) from exc

    lr = lr_at(state.step, cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad()
    breakdown.total.backward()
    if cfg.grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(state.encoder.parameters(), cfg.grad_clip)
    state.optimizer.step()
    state.step += 1

    record = StepRecord(
        step=state.step,
        lr=lr,
        breakdown=breakdown,
        n_clusters=assignment.n_clusters,
        noise_fraction=assignment.noise_fraction,
    )
    return state, record


def save_train_checkpoint(path: str | Path, state: TrainState) -> None:
    save_encoder(
        path,
        state.encoder,
        extra={
            "optimizer_state": state.optimizer.state_dict(),
            "step": state.step,
            "pretrain_config": asdict(state.config),
        },
    )


def load_train_checkpoint(path: str | Path) -> TrainState:
    encoder, payload = load_encoder(path)
    cfg = pretrain_config_from_dict(payload["pretrain_config"])
    optimizer = torch.optim.Adam(
        encoder.parameters(), lr=cfg.lr, betas=cfg.adam_betas, eps=cfg.adam_eps
    )
    optimizer.load_state_dict(payload["optimizer_state"])
    return TrainState(config=cfg, encoder=encoder, optimizer=optimizer, step=int(payload["step"]))


def pretrain_config_from_dict(d: dict) -> PretrainConfig:
    d = dict(d)
    if d.get("rerank") is not None and not isinstance(d["rerank"], RerankConfig):
        d["rerank"] = RerankConfig(**d["rerank"])
    if d.get("cluster") is not None and not isinstance(d["cluster"], ClusterConfig):
        d["cluster"] = ClusterConfig(**d["cluster"])
    if d.get("adam_betas") is not None:
        d["adam_betas"] = tuple(d["adam_betas"])
    return PretrainConfig(**d)


def _truncate_csv(path: Path, header: str, max_step: int) -> None:
    if not path.is_file():
        path.write_text(header + "\n")
        return
    lines = path.read_text().splitlines()
    kept = [header]
    for line in lines[1:]:
        if line and int(line.split(",", 1)[0]) <= max_step:
            kept.append(line)
    path.write_text("\n".join(kept) + "\n")


def _validate_state(state: TrainState, val_samples: list[ImageSample]) -> tuple[float, float]:
    """Mean episodic accuracy and query cross-entropy on held-out tasks."""
    cfg = state.config
    accs, losses = [], []
    for t in range(cfg.val_tasks):
        rng = stream(cfg.seed, DOMAIN_VALIDATION, state.step, t)
        episode = sample_episode(val_samples, cfg.val_n_way, cfg.val_k_shot, cfg.val_queries, rng)
        acc, loss = _episode_metrics(state.encoder, episode)
        accs.append(acc)
        losses.append(loss)
    return float(np.mean(accs)), float(np.mean(losses))


def _episode_metrics(encoder, episode) -> tuple[float, float]:
    from . import episodic

    sup = episodic._embed_numpy(encoder, episode.support_images)
    qry = episodic._embed_numpy(encoder, episode.query_images)
    head = episodic.init_head(
        episodic.prototypes_from_embeddings(sup, episode.support_labels, episode.n_way)
    )
    head = episodic.finetune_head(head, sup, episode.support_labels, FinetuneConfig())
    logits = head.logits(qry)
    pred = np.argmax(logits, axis=1)
    acc = float((pred == episode.query_labels).mean())
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_p[np.arange(len(pred)), episode.query_labels].mean())
    return acc, loss


def pretrain(
    cfg: PretrainConfig,
    encoder_cfg: EncoderConfig,
    train_samples: list[ImageSample],
    out_dir: str | Path,
    policy: AugmentationPolicy | None = None,
    val_samples: list[ImageSample] | None = None,
    log_every: int = 0,
) -> Path:
    """Run (or resume) pre-training; returns the final checkpoint path.

    Writes ``loss.csv``, ``val.csv``, ``timings.csv`` and
    ``checkpoints/step_*.pt`` plus ``checkpoints/final.pt`` under ``out_dir``.
    Timing lives in its own file so the loss log is reproducible byte for
    byte.
    """
    cfg.validate()
    policy = policy or AugmentationPolicy()
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    loss_csv = out_dir / "loss.csv"
    val_csv = out_dir / "val.csv"
    timing_csv = out_dir / "timings.csv"
    final_path = ckpt_dir / "final.pt"

    state: TrainState | None = None
    existing = sorted(ckpt_dir.glob("step_*.pt"))
    while existing:
        candidate = existing.pop()
        resumed = load_train_checkpoint(candidate)
        if resumed.step <= cfg.total_steps:
            state = resumed
            break
    if state is None:
        state = TrainState(
            config=cfg,
            encoder=init_encoder(encoder_cfg, cfg.seed),
            optimizer=None,  # type: ignore[arg-type]
        )
        state.optimizer = torch.optim.Adam(
            state.encoder.parameters(), lr=cfg.lr, betas=cfg.adam_betas, eps=cfg.adam_eps
        )
    _truncate_csv(loss_csv, LOSS_CSV_HEADER, state.step)
    _truncate_csv(val_csv, VAL_CSV_HEADER, state.step)
    if not timing_csv.is_file():
        timing_csv.write_text("step,wall_ms\n")

    if cfg.total_steps == 0:
        save_train_checkpoint(final_path, state)
        return final_path

    with loss_csv.open("a") as loss_f, val_csv.open("a") as val_f, timing_csv.open("a") as time_f:
        while state.step < cfg.total_steps:
            t0 = time.perf_counter()
            rng = stream(cfg.seed, DOMAIN_PRETRAIN_BATCH, state.step)
            batch = sample_pretrain_batch(
                train_samples, cfg.num_originals, cfg.views_per_original, policy, rng
            )
            try:
                state, record = pretrain_step(state, batch)
            except TrainingDiverged:
                _dump_diagnostics(out_dir, state, batch)
                raise
            loss_f.write(record.csv_row() + "\n")
            time_f.write(f"{record.step},{(time.perf_counter() - t0) * 1000:.3f}\n")

            if log_every and record.step % log_every == 0:
                print(
                    f"step {record.step}: total={float(record.breakdown.total):.4f} "
                    f"P={record.n_clusters} noise={record.noise_fraction:.2f}",
                    flush=True,
                )
            if cfg.val_every and val_samples and record.step % cfg.val_every == 0:
                acc, vloss = _validate_state(state, val_samples)
                val_f.write(f"{record.step},{repr(acc)},{repr(vloss)}\n")
            if cfg.checkpoint_every and record.step % cfg.checkpoint_every == 0:
                save_train_checkpoint(ckpt_dir / f"step_{record.step:07d}.pt", state)

    save_train_checkpoint(ckpt_dir / f"step_{state.step:07d}.pt", state)
    save_train_checkpoint(final_path, state)
    return final_path


def _dump_diagnostics(out_dir: Path, state: TrainState, batch: PretrainBatch) -> None:
    diag = out_dir / "diagnostics"
    diag.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        emb = state.encoder.embed(batch.images(), train=False).numpy()
    payload = {"embeddings": emb, "images": batch.images(), "origin_index": batch.origin_index}
    try:
        reranked = rerank(np.asarray(emb, dtype=np.float64), state.config.rerank.clipped(batch.size))
        payload["rerank"] = reranked
        payload["labels"] = hdbscan(reranked, state.config.resolved_cluster).labels
    except Exception:  # the dump is best effort; the original error matters more
        pass
    np.savez(diag / f"diverged_step_{state.step:07d}.npz", **payload)
