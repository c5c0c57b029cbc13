"""Ranking losses between a minibatch and a reference set, with analytic gradients.

All distances are cosine distances d = 1 - <a, b> on unit-normalized vectors,
computed in one minibatch x reference matrix pass. Gradients are taken with
respect to minibatch rows only: reference rows are constants (no gradient into
stored memory), except that a minibatch row re-appearing inside the reference
at self_offset receives the gradient from that role too, since it is the same
live embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig, NotNormalized
from .memory import MemoryBank
from .moments import EmbeddingBatch

__all__ = [
    "PairMinerConfig",
    "MinedPairs",
    "LossOutput",
    "cosine_distance",
    "distance_matrix",
    "check_normalized",
    "mine_pairs",
    "contrastive_loss",
    "triplet_loss",
    "xbm_loss",
]

XBM_VARIANTS = ("no-xbm", "xbm", "xbm-star")


@dataclass(frozen=True)
class PairMinerConfig:
    """Margins, in cosine-distance units, for pair selection and the hinges."""

    pos_margin: float = 0.2
    neg_margin: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.pos_margin < self.neg_margin <= 2.0:
            raise InvalidConfig(
                f"margins must satisfy 0 <= pos < neg <= 2, got "
                f"({self.pos_margin}, {self.neg_margin})"
            )


@dataclass(frozen=True)
class MinedPairs:
    """Index pairs (query row, reference row) selected by the margin miner.

    self_offset records where the minibatch rows sit inside the reference, so
    losses can route gradients to both roles of a minibatch row.
    """

    positives: np.ndarray  # (n_pos, 2) int
    negatives: np.ndarray  # (n_neg, 2) int
    self_offset: int = 0


@dataclass(frozen=True)
class LossOutput:
    value: float
    grad: np.ndarray  # d(value)/d(minibatch vectors), same shape as the minibatch

    def __add__(self, other: "LossOutput") -> "LossOutput":
        return LossOutput(self.value + other.value, self.grad + other.grad)


def check_normalized(vectors: np.ndarray, tol: float = 1e-6) -> None:
    norms = np.linalg.norm(np.atleast_2d(vectors), axis=1)
    worst = float(np.abs(norms - 1.0).max()) if norms.size else 0.0
    if worst > tol:
        raise NotNormalized(f"vector norm off unit by {worst:.3g} (tolerance {tol:g})")


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - <a, b> for two unit vectors; validates normalization."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    check_normalized(a)
    check_normalized(b)
    return float(1.0 - a @ b)


def distance_matrix(batch_vectors: np.ndarray, reference_vectors: np.ndarray) -> np.ndarray:
    """Cosine distances, batch rows x reference rows."""
    return 1.0 - batch_vectors @ reference_vectors.T


def _self_mask(n_batch: int, n_reference: int, self_offset: int) -> np.ndarray:
    rows = np.arange(n_batch)[:, None]
    cols = np.arange(n_reference)[None, :]
    return cols == rows + self_offset


def mine_pairs(
    batch: EmbeddingBatch,
    reference: EmbeddingBatch,
    cfg: PairMinerConfig,
    self_offset: int,
) -> MinedPairs:
    """Margin mining over the full distance matrix.

    Positives: equal label, distance > pos_margin, excluding the positional
    self-pair (reference column self_offset + i for query i). Negatives:
    different label, distance < neg_margin. Duplicate embeddings of the same
    class at other positions still form valid pairs.
    """
    d = distance_matrix(batch.vectors, reference.vectors)
    same = batch.labels[:, None] == reference.labels[None, :]
    is_self = _self_mask(batch.n, reference.n, self_offset)
    pos_mask = same & (d > cfg.pos_margin) & ~is_self
    neg_mask = ~same & (d < cfg.neg_margin)
    return MinedPairs(
        positives=np.argwhere(pos_mask),
        negatives=np.argwhere(neg_mask),
        self_offset=self_offset,
    )


def _weights_to_grad(
    weights: np.ndarray,
    batch_vectors: np.ndarray,
    reference_vectors: np.ndarray,
    self_offset: int,
) -> np.ndarray:
    """Gradient of sum_ij weights[i,j] * d[i,j] with respect to the minibatch rows.

    d[i,j] = 1 - <b_i, r_j>, so the query role contributes -weights @ R and the
    reference role of minibatch row i' (= column self_offset + i') contributes
    -weights[:, col].T @ B back onto that row.
    """
    grad = -(weights @ reference_vectors)
    n, m = weights.shape
    lo = max(self_offset, 0)
    hi = min(self_offset + n, m)
    if hi > lo:
        grad[lo - self_offset : hi - self_offset] += -(weights[:, lo:hi].T @ batch_vectors)
    return grad


def contrastive_loss(
    batch: EmbeddingBatch,
    reference: EmbeddingBatch,
    pairs: MinedPairs,
    cfg: PairMinerConfig,
) -> LossOutput:
    """Margin-hinge contrastive loss over mined pairs.

    value = mean over positives of [d - pos_margin]_+
          + mean over negatives of [neg_margin - d]_+,
    each mean over its own nonempty list (an empty list contributes 0).
    """
    d = distance_matrix(batch.vectors, reference.vectors)
    weights = np.zeros_like(d)
    value = 0.0
    pos, neg = pairs.positives, pairs.negatives
    if len(pos):
        pd = d[pos[:, 0], pos[:, 1]]
        value += float(np.maximum(0.0, pd - cfg.pos_margin).mean())
        active = pd > cfg.pos_margin
        np.add.at(weights, (pos[active, 0], pos[active, 1]), 1.0 / len(pos))
    if len(neg):
        nd = d[neg[:, 0], neg[:, 1]]
        value += float(np.maximum(0.0, cfg.neg_margin - nd).mean())
        active = nd < cfg.neg_margin
        np.add.at(weights, (neg[active, 0], neg[active, 1]), -1.0 / len(neg))
    grad = _weights_to_grad(weights, batch.vectors, reference.vectors, pairs.self_offset)
    return LossOutput(value=value, grad=grad)


def triplet_loss(
    batch: EmbeddingBatch,
    reference: EmbeddingBatch,
    margin: float,
    self_offset: int,
) -> LossOutput:
    """Triplet loss over all valid (anchor, positive, negative) reference triplets.

    Each anchor averages [d(a,p) - d(a,n) + margin]_+ over its full triplet set;
    the value is the mean over anchors that have at least one triplet. Anchors
    without one are skipped.
    """
    if margin < 0:
        raise InvalidConfig(f"margin must be >= 0, got {margin}")
    d = distance_matrix(batch.vectors, reference.vectors)
    same = batch.labels[:, None] == reference.labels[None, :]
    is_self = _self_mask(batch.n, reference.n, self_offset)
    weights = np.zeros_like(d)
    total = 0.0
    anchors_used = 0
    for i in range(batch.n):
        pos_idx = np.where(same[i] & ~is_self[i])[0]
        neg_idx = np.where(~same[i])[0]
        if len(pos_idx) == 0 or len(neg_idx) == 0:
            continue
        hinge = d[i, pos_idx][:, None] - d[i, neg_idx][None, :] + margin
        active = hinge > 0
        n_triplets = len(pos_idx) * len(neg_idx)
        total += float(np.where(active, hinge, 0.0).sum()) / n_triplets
        weights[i, pos_idx] += active.sum(axis=1) / n_triplets
        weights[i, neg_idx] -= active.sum(axis=0) / n_triplets
        anchors_used += 1
    if anchors_used == 0:
        return LossOutput(value=0.0, grad=np.zeros_like(batch.vectors))
    weights /= anchors_used
    grad = _weights_to_grad(weights, batch.vectors, reference.vectors, self_offset)
    return LossOutput(value=total / anchors_used, grad=grad)


def xbm_loss(
    batch: EmbeddingBatch,
    bank: MemoryBank,
    cfg: PairMinerConfig,
    variant: str,
) -> LossOutput:
    """Contrastive loss under one of the reference-set variants.

    no-xbm: reference is the batch itself. xbm: reference is the bank contents
    followed by the batch. xbm-star: sum of the two. The bank is read, never
    modified; enqueueing and adaptation are the trainer's job before this call.
    """
    if variant not in XBM_VARIANTS:
        raise InvalidConfig(f"variant must be one of {XBM_VARIANTS}, got {variant!r}")

    def minibatch_only() -> LossOutput:
        pairs = mine_pairs(batch, batch, cfg, self_offset=0)
        return contrastive_loss(batch, batch, pairs, cfg)

    def with_memory() -> LossOutput:
        reference = bank.reference_set(batch)
        pairs = mine_pairs(batch, reference, cfg, self_offset=len(bank))
        return contrastive_loss(batch, reference, pairs, cfg)

    if variant == "no-xbm":
        return minibatch_only()
    if variant == "xbm":
        return with_memory()
    return minibatch_only() + with_memory()
