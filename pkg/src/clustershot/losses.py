"""Two-term contrastive objective over an embedded pre-training batch.

Both terms are softmax cross-entropies over negative squared Euclidean
distances:

* cluster term -- each augmented view is pulled toward the mean of the
  cluster its own row was assigned to, against all other cluster means.
  Views labelled noise are skipped and the term averages over the views
  that do contribute.
* instance term -- each augmented view is pulled toward the embedding of
  its source image, against all other originals in the batch; averaged
  over all L*Q views.

Cluster assignments are constants of the batch (no gradients through the
re-ranking or clustering); cluster means remain differentiable in the
embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .cluster import NOISE, ClusterAssignment


@dataclass(frozen=True)
class BatchLayout:
    """Row bookkeeping of an embedded batch: L originals then L*Q views."""

    num_originals: int
    views_per_original: int

    @property
    def size(self) -> int:
        return self.num_originals * (self.views_per_original + 1)

    @property
    def origin_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_originals), self.views_per_original)


@dataclass
class LossBreakdown:
    """Scalar terms of one batch. Tensors stay differentiable; use float() to log."""

    cluster_term: torch.Tensor
    instance_term: torch.Tensor
    total: torch.Tensor
    cluster_view_count: int  # views that contributed to the cluster term
    instance_view_count: int


def _sq_distances(points: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """(n, m) squared Euclidean distances; direct form keeps gradients stable at 0."""
    diff = points[:, None, :] - targets[None, :, :]
    return (diff * diff).sum(dim=-1)


def cluster_means(embeddings: torch.Tensor, assign: ClusterAssignment) -> torch.Tensor:
    """(P, E) arithmetic means over each cluster's member rows; differentiable."""
    labels = np.asarray(assign.labels)
    if len(labels) != embeddings.shape[0]:
        raise ValueError(
            f"assignment covers {len(labels)} rows but embeddings have {embeddings.shape[0]}"
        )
    p = assign.n_clusters
    if p == 0:
        return embeddings.new_zeros((0, embeddings.shape[1]))
    weights = embeddings.new_zeros((p, embeddings.shape[0]))
    for cluster in range(1, p + 1):
        members = np.flatnonzero(labels == cluster)
        weights[cluster - 1, torch.from_numpy(members)] = 1.0 / len(members)
    return weights @ embeddings


def cluster_term(view_embedding: torch.Tensor, target_cluster: int, means: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of the view against its cluster mean vs all means."""
    p = means.shape[0]
    if not 1 <= target_cluster <= p:
        raise ValueError(f"target cluster {target_cluster} outside 1..{p}")
    d = _sq_distances(view_embedding[None, :], means)
    return -F.log_softmax(-d, dim=1)[0, target_cluster - 1]


def instance_term(view_embedding: torch.Tensor, origin: int, original_embeddings: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of the view against its source vs all originals."""
    n = original_embeddings.shape[0]
    if not 0 <= origin < n:
        raise ValueError(f"origin index {origin} outside 0..{n - 1}")
    d = _sq_distances(view_embedding[None, :], original_embeddings)
    return -F.log_softmax(-d, dim=1)[0, origin]


def pretrain_loss(
    embeddings: torch.Tensor,
    layout: BatchLayout,
    assign: ClusterAssignment,
) -> LossBreakdown:
    """Both loss terms over an embedded batch in layout row order."""
    l_orig = layout.num_originals
    if embeddings.shape[0] != layout.size:
        raise ValueError(
            f"embeddings have {embeddings.shape[0]} rows, layout expects {layout.size}"
        )
    if len(assign.labels) != layout.size:
        raise ValueError(
            f"assignment covers {len(assign.labels)} rows, layout expects {layout.size}"
        )

    originals = embeddings[:l_orig]
    views = embeddings[l_orig:]
    n_views = views.shape[0]

    origin = torch.from_numpy(np.ascontiguousarray(layout.origin_index))
    d_inst = _sq_distances(views, originals)
    log_p = F.log_softmax(-d_inst, dim=1)
    inst = -log_p[torch.arange(n_views), origin].mean()

    view_labels = np.asarray(assign.labels)[l_orig:]
    contributing = np.flatnonzero(view_labels != NOISE)
    if assign.n_clusters == 0 or len(contributing) == 0:
        clus = embeddings.new_zeros(())
        n_contrib = 0
    else:
        means = cluster_means(embeddings, assign)
        idx = torch.from_numpy(contributing)
        d_clus = _sq_distances(views[idx], means)
        log_p = F.log_softmax(-d_clus, dim=1)
        targets = torch.from_numpy(view_labels[contributing] - 1)
        clus = -log_p[torch.arange(len(contributing)), targets].mean()
        n_contrib = int(len(contributing))

    if not (torch.isfinite(clus) and torch.isfinite(inst)):
        raise FloatingPointError(
            f"non-finite loss terms: cluster={float(clus)} instance={float(inst)}"
        )
    return LossBreakdown(
        cluster_term=clus,
        instance_term=inst,
        total=clus + inst,
        cluster_view_count=n_contrib,
        instance_view_count=n_views,
    )
