"""Few-shot episodes: prototypes, head initialisation, fine-tuning, evaluation.

The encoder stays frozen. A linear head starts at the exact nearest-prototype
classifier (weights 2c, bias -|c|^2, so its argmax equals the argmin of
squared distance to the prototypes) and is then optionally fine-tuned with
cross-entropy on the support set. Accuracy is reported over runs x episodes
with a normal-approximation 95% confidence interval.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import Episode, ImageSample, sample_episode
from .seeding import DOMAIN_EVAL, derived_int, stream


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 15
    lr: float = 1e-3


@dataclass
class ClassifierHead:
    weights: np.ndarray  # (N, E)
    bias: np.ndarray  # (N,)

    def logits(self, embeddings: np.ndarray) -> np.ndarray:
        return embeddings @ self.weights.T + self.bias

    def predict(self, embeddings: np.ndarray) -> np.ndarray:
        # np.argmax takes the first maximum, i.e. ties go to the lowest class.
        return np.argmax(self.logits(embeddings), axis=1)


@dataclass
class EvalReport:
    n_way: int
    k_shot: int
    queries_per_class: int
    episodes_per_run: int
    runs: int
    seed: int
    run_seeds: list[int]
    accuracies: np.ndarray  # (runs, episodes)

    @property
    def run_means(self) -> list[float]:
        return [float(m) for m in self.accuracies.mean(axis=1)]

    @property
    def mean_accuracy(self) -> float:
        return float(self.accuracies.mean())

    @property
    def ci95(self) -> float:
        """1.96 * sigma / sqrt(n) over the pooled episode accuracies."""
        pooled = self.accuracies.ravel()
        return float(1.96 * pooled.std(ddof=0) / np.sqrt(pooled.size))

    def to_dict(self) -> dict:
        return {
            "task": {"n_way": self.n_way, "k_shot": self.k_shot,
                     "queries_per_class": self.queries_per_class},
            "episodes_per_run": self.episodes_per_run,
            "runs": self.runs,
            "seed": self.seed,
            "run_seeds": self.run_seeds,
            "mean_accuracy": self.mean_accuracy,
            "ci95": self.ci95,
            "run_means": self.run_means,
            "accuracies": self.accuracies.tolist(),
        }

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            n_way=d["task"]["n_way"],
            k_shot=d["task"]["k_shot"],
            queries_per_class=d["task"]["queries_per_class"],
            episodes_per_run=d["episodes_per_run"],
            runs=d["runs"],
            seed=d["seed"],
            run_seeds=list(d["run_seeds"]),
            accuracies=np.asarray(d["accuracies"], dtype=np.float64),
        )

    def table(self) -> str:
        rows = [
            f"task: {self.n_way}-way {self.k_shot}-shot, "
            f"{self.queries_per_class} queries/class",
            f"runs: {self.runs} x {self.episodes_per_run} episodes (seed {self.seed})",
        ]
        for r, m in enumerate(self.run_means):
            rows.append(f"  run {r}: {100 * m:.2f}%")
        rows.append(f"mean accuracy: {100 * self.mean_accuracy:.2f}% +/- {100 * self.ci95:.2f}")
        return "\n".join(rows)


def _embed_numpy(encoder, images: np.ndarray) -> np.ndarray:
    """Eval-mode embeddings as float64 numpy rows."""
    with torch.no_grad():
        out = encoder.embed(images, train=False)
    return np.asarray(out, dtype=np.float64)


def compute_prototypes(encoder, support_images: np.ndarray, support_labels: np.ndarray,
                       n_way: int) -> np.ndarray:
    """(N, E) per-class mean embeddings of the support set."""
    emb = _embed_numpy(encoder, support_images)
    return prototypes_from_embeddings(emb, support_labels, n_way)


def prototypes_from_embeddings(embeddings: np.ndarray, labels: np.ndarray, n_way: int) -> np.ndarray:
    labels = np.asarray(labels)
    protos = np.empty((n_way, embeddings.shape[1]), dtype=np.float64)
    for c in range(n_way):
        members = np.flatnonzero(labels == c)
        if len(members) == 0:
            raise ValueError(f"support set has no samples of class {c}")
        protos[c] = embeddings[members].mean(axis=0)
    return protos


def init_head(prototypes: np.ndarray) -> ClassifierHead:
    """Linear head equal to the nearest-prototype rule: W=2c, b=-|c|^2."""
    protos = np.asarray(prototypes, dtype=np.float64)
    return ClassifierHead(weights=2.0 * protos, bias=-np.sum(protos**2, axis=1))


def finetune_head(
    head: ClassifierHead,
    support_embeddings: np.ndarray,
    support_labels: np.ndarray,
    cfg: FinetuneConfig,
) -> ClassifierHead:
    """Full-batch cross-entropy on the (frozen) support embeddings.

    ``epochs=0`` returns the head unchanged (pure nearest-prototype).
    """
    if cfg.epochs == 0:
        return ClassifierHead(weights=head.weights.copy(), bias=head.bias.copy())
    x = torch.from_numpy(np.asarray(support_embeddings, dtype=np.float64))
    y = torch.from_numpy(np.asarray(support_labels, dtype=np.int64))
    w = torch.from_numpy(np.asarray(head.weights, dtype=np.float64)).clone().requires_grad_(True)
    b = torch.from_numpy(np.asarray(head.bias, dtype=np.float64)).clone().requires_grad_(True)
    opt = torch.optim.Adam([w, b], lr=cfg.lr)
    for _ in range(cfg.epochs):
        opt.zero_grad()
        loss = F.cross_entropy(x @ w.T + b, y)
        loss.backward()
        opt.step()
    return ClassifierHead(weights=w.detach().numpy(), bias=b.detach().numpy())


def run_episode(
    encoder,
    episode: Episode,
    ft_cfg: FinetuneConfig,
) -> float:
    """Accuracy of the fine-tuned head on the episode's query set."""
    n_way = episode.n_way
    sup = _embed_numpy(encoder, episode.support_images)
    qry = _embed_numpy(encoder, episode.query_images)
    head = init_head(prototypes_from_embeddings(sup, episode.support_labels, n_way))
    head = finetune_head(head, sup, episode.support_labels, ft_cfg)
    pred = head.predict(qry)
    return float((pred == episode.query_labels).mean())


def evaluate(
    encoder,
    samples: list[ImageSample],
    n_way: int,
    k_shot: int,
    queries_per_class: int,
    episodes: int,
    runs: int,
    seed: int,
    ft_cfg: FinetuneConfig = FinetuneConfig(),
) -> EvalReport:
    """Episodic accuracy over ``runs`` independent runs of ``episodes`` each.

    Episode sampling streams are addressed by (seed, run, episode), so the
    report is reproducible and episodes could be evaluated in any order.
    """
    acc = np.empty((runs, episodes), dtype=np.float64)
    for r in range(runs):
        for e in range(episodes):
            rng = stream(seed, DOMAIN_EVAL, r, e)
            episode = sample_episode(samples, n_way, k_shot, queries_per_class, rng)
            acc[r, e] = run_episode(encoder, episode, ft_cfg)
    return EvalReport(
        n_way=n_way,
        k_shot=k_shot,
        queries_per_class=queries_per_class,
        episodes_per_run=episodes,
        runs=runs,
        seed=seed,
        run_seeds=[derived_int(seed, DOMAIN_EVAL, r) for r in range(runs)],
        accuracies=acc,
    )
