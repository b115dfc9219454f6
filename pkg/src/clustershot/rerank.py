"""k-reciprocal nearest-neighbour re-ranking of batch embeddings.

Produces a symmetric, zero-diagonal distance matrix over all batch rows:

1. squared-Euclidean base distances, rescaled to [0, 1] by the matrix max;
2. k1-reciprocal neighbour sets, expanded by each candidate's half-size
   (k1/2) reciprocal set whenever at least 2/3 of that set already overlaps;
3. Gaussian membership weights exp(-d) over the expanded sets;
4. local query expansion: average membership over each row's k2 nearest
   neighbours;
5. weighted Jaccard distance between the expanded membership vectors;
6. final distance = blend_weight * rescaled_base + (1-blend_weight) * Jaccard,
   symmetrised by averaging.

Everything is an exact dense computation; neighbour ties break by row index
(stable sort), so the output is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class RerankConfig:
    k1: int = 20
    k2: int = 6
    blend_weight: float = 0.3  # weight of the rescaled base distance in step 6

    def validate(self, batch_size: int) -> None:
        if not 1 <= self.k2 <= self.k1:
            raise ValueError(f"need 1 <= k2 <= k1, got k1={self.k1} k2={self.k2}")
        if self.k1 >= batch_size:
            raise ValueError(
                f"k1={self.k1} must be < batch size {batch_size}; "
                f"clip with cfg.clipped(batch_size)"
            )
        if not 0.0 <= self.blend_weight <= 1.0:
            raise ValueError(f"blend_weight must lie in [0, 1], got {self.blend_weight}")

    def clipped(self, batch_size: int) -> "RerankConfig":
        """Shrink neighbourhood sizes to fit a small batch."""
        k1 = min(self.k1, batch_size - 1)
        k2 = min(self.k2, k1)
        return replace(self, k1=k1, k2=k2)


def pairwise_sq_euclidean(embeddings: np.ndarray) -> np.ndarray:
    """Exact squared-Euclidean distances; symmetric with zero diagonal."""
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 2:
        raise ValueError(f"expected a (B>=2, E) matrix, got shape {e.shape}")
    if not np.isfinite(e).all():
        raise ValueError("embeddings contain non-finite values")
    diff = e[:, None, :] - e[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _reciprocal_sets(order: np.ndarray, k: int) -> list[np.ndarray]:
    """Index sets {j : j in fwd_k(i) and i in fwd_k(j)}; fwd includes self."""
    b = order.shape[0]
    forward = np.zeros((b, b), dtype=bool)
    rows = np.repeat(np.arange(b), k + 1)
    forward[rows, order[:, : k + 1].ravel()] = True
    mutual = forward & forward.T
    return [np.flatnonzero(mutual[i]) for i in range(b)]


def rerank(embeddings: np.ndarray, cfg: RerankConfig, return_parts: bool = False):
    """Re-ranked distance matrix R over all batch embeddings (float64).

    With ``return_parts`` also returns a dict of intermediates (base
    distances, rescaled base, Jaccard matrix) for diagnostics.
    """
    d_base = pairwise_sq_euclidean(embeddings)
    b = d_base.shape[0]
    cfg.validate(b)

    dmax = d_base.max()
    d_hat = d_base / dmax if dmax > 0 else np.zeros_like(d_base)

    order = np.argsort(d_hat, axis=1, kind="stable")
    recip = _reciprocal_sets(order, cfg.k1)
    half = round(cfg.k1 / 2)
    recip_half = _reciprocal_sets(order, half)

    membership = np.zeros((b, b), dtype=np.float64)
    for i in range(b):
        expanded = set(recip[i].tolist())
        base_set = recip[i]
        for cand in base_set:
            cand_set = recip_half[cand]
            overlap = np.intersect1d(cand_set, base_set, assume_unique=True)
            if len(overlap) >= (2.0 / 3.0) * len(cand_set):
                expanded.update(cand_set.tolist())
        idx = np.fromiter(sorted(expanded), dtype=np.int64)
        membership[i, idx] = np.exp(-d_hat[i, idx])

    expanded_membership = np.empty_like(membership)
    for i in range(b):
        expanded_membership[i] = membership[order[i, : cfg.k2]].mean(axis=0)

    jaccard = np.empty((b, b), dtype=np.float64)
    for i in range(b):
        mins = np.minimum(expanded_membership[i], expanded_membership).sum(axis=1)
        maxs = np.maximum(expanded_membership[i], expanded_membership).sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            jaccard[i] = np.where(maxs > 0, 1.0 - mins / maxs, 0.0)

    blended = cfg.blend_weight * d_hat + (1.0 - cfg.blend_weight) * jaccard
    result = (blended + blended.T) / 2.0
    if return_parts:
        return result, {"base": d_base, "rescaled_base": d_hat, "jaccard": jaccard}
    return result
