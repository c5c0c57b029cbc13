"""Recall@k by exhaustive cosine-similarity nearest-neighbor search.

Two protocols: a single self-excluded set (queries double as the gallery and
a query never retrieves its own index) and a separate query/gallery split.
Similarities are accumulated in float64 and ties are broken by ascending
gallery index, so results are deterministic and order-stable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InvalidConfig
from .moments import EmbeddingBatch

__all__ = ["RetrievalProtocol", "recall_at_k"]


@dataclass(frozen=True)
class RetrievalProtocol:
    mode: str = "single"  # "single" (self-excluded) or "query-gallery"
    k_values: tuple[int, ...] = (1,)

    def validate(self) -> None:
        if self.mode not in ("single", "query-gallery"):
            raise InvalidConfig(f"mode must be single or query-gallery, got {self.mode!r}")
        ks = tuple(self.k_values)
        if not ks or any(k < 1 for k in ks) or list(ks) != sorted(ks):
            raise InvalidConfig(f"k values must be >= 1 and ascending, got {ks}")


def recall_at_k(
    queries: EmbeddingBatch, gallery: EmbeddingBatch, protocol: RetrievalProtocol
) -> dict[int, float]:
    """Fraction of queries whose k nearest gallery items include a label match.

    In single mode queries and gallery must be the same batch; the query's own
    index is excluded from its candidates, so the effective gallery size is
    n - 1. Every requested k must be smaller than the effective gallery size.
    """
    protocol.validate()
    if queries.dim != gallery.dim:
        raise DimensionMismatch(f"query dim {queries.dim} != gallery dim {gallery.dim}")
    single = protocol.mode == "single"
    if single and queries.n != gallery.n:
        raise InvalidConfig("single mode requires queries and gallery to be the same batch")
    effective = gallery.n - 1 if single else gallery.n
    ks = tuple(protocol.k_values)
    if ks[-1] >= effective:
        raise InvalidConfig(f"k={ks[-1]} must be < effective gallery size {effective}")
    if queries.n == 0:
        raise InvalidConfig("no queries to evaluate")

    sims = queries.vectors @ gallery.vectors.T
    # Stable argsort on the negated similarities keeps equal-similarity items
    # in ascending index order.
    order = np.argsort(-sims, axis=1, kind="stable")
    k_max = ks[-1]
    hits = {k: 0 for k in ks}
    for i in range(queries.n):
        row = order[i]
        if single:
            row = row[row != i]
        top_labels = gallery.labels[row[:k_max]]
        good = top_labels == queries.labels[i]
        for k in ks:
            if good[:k].any():
                hits[k] += 1
    return {k: hits[k] / queries.n for k in ks}
