"""Bipartite feature matrices, reference-column weighting, richness
profiles, and richness bins.

Each entity row holds log-normalized weights over its type-specific
features plus one extra reference column standing in for a minimal-richness
prototype entity. Rows are stochastic: weights sum to 1, and entities with
no features of a type route all weight to the reference column.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .numeric import Array, SparseRowMatrix, cosine, rng_for
from .tkg import (
    ALL_TYPES,
    STRUCTURAL_TYPES,
    FeatureType,
    TemporalKnowledgeGraph,
    feature_counts,
    temporal_reference_count,
)

log = logging.getLogger(__name__)

__all__ = [
    "FeatureType",
    "BipartiteFeatureMatrix",
    "RichnessProfile",
    "build_bipartite",
    "init_features",
    "reference_similarity",
    "richness_bins",
    "entity_adjacency",
    "feature_count_for",
]


@dataclass(frozen=True)
class BipartiteFeatureMatrix:
    """Entity x (features + reference) weight matrix for one feature type.

    The reference column is the last one (index feature_count)."""

    ftype: FeatureType
    matrix: SparseRowMatrix
    feature_count: int

    @property
    def reference_column(self) -> int:
        return self.feature_count


def feature_count_for(graph: TemporalKnowledgeGraph, ftype: FeatureType) -> int:
    if ftype is FeatureType.E:
        return graph.entity_count
    if ftype is FeatureType.R:
        return graph.relation_count
    if ftype is FeatureType.T:
        return graph.timestamp_count
    return len(graph.interval_vocab)


def _reference_count(graph, entity, ftype) -> int:
    if ftype in STRUCTURAL_TYPES:
        # total incident fact count, i.e. the sum of per-neighbor fact counts
        return sum(feature_counts(graph, entity, FeatureType.E).values())
    return temporal_reference_count(graph, entity)


def build_bipartite(graph: TemporalKnowledgeGraph,
                    ftype: FeatureType) -> BipartiteFeatureMatrix:
    """Log-normalized feature weights per entity, reference column last.

    Weight of feature c for entity e is ln(|F_ec| + 1) normalized over all
    of e's features plus the reference column; entities with no features of
    the type get reference weight 1.
    """
    n_features = feature_count_for(graph, ftype)
    ref_col = n_features
    rows = []
    for e in range(graph.entity_count):
        counts = feature_counts(graph, e, ftype)
        entries = [(c, math.log(k + 1)) for c, k in sorted(counts.items())]
        ref_raw = _reference_count(graph, e, ftype)
        if ref_raw > 0:
            entries.append((ref_col, math.log(ref_raw + 1)))
        total = sum(w for _, w in entries)
        if total <= 0.0:
            rows.append([(ref_col, 1.0)])
        else:
            rows.append([(c, w / total) for c, w in entries if w > 0.0])
    return BipartiteFeatureMatrix(
        ftype=ftype,
        matrix=SparseRowMatrix.from_rows(graph.entity_count, n_features + 1, rows),
        feature_count=n_features,
    )


def init_features(ftype: FeatureType, feature_count: int, dim: int,
                  rng_seed: int) -> Array:
    """Trainable (feature_count + 1) x dim init matrix, reference row last.

    Entries are zero-mean Gaussian with variance 1/dim.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = rng_for(rng_seed, "init_features", ftype.value)
    return rng.normal(0.0, 1.0 / math.sqrt(dim), size=(feature_count + 1, dim))


def reference_similarity(embeddings: Array, reference_row: Array) -> Array:
    """Per-row cosine similarity to the reference embedding."""
    if np.linalg.norm(reference_row) < 1e-12:
        log.warning("reference embedding is numerically zero; similarities set to 0")
        return np.zeros(embeddings.shape[0])
    return np.array([cosine(row, reference_row) for row in embeddings])


RICHNESS_BIN_EDGES = {
    FeatureType.E: (3, 8),
    FeatureType.R: (2, 4),
    FeatureType.T: (1, 5),
    FeatureType.I: (3, 5),
}


def richness_bins(graph: TemporalKnowledgeGraph, ftype: FeatureType) -> list:
    """Per-entity richness label in {low, medium, high} by distinct feature
    count of the given type."""
    lo, hi = RICHNESS_BIN_EDGES[ftype]
    labels = []
    for e in range(graph.entity_count):
        n = len(feature_counts(graph, e, ftype))
        labels.append("low" if n < lo else "medium" if n < hi else "high")
    return labels


def entity_adjacency(graph: TemporalKnowledgeGraph) -> SparseRowMatrix:
    """Row-normalized entity adjacency with fact-count weights.

    Isolated entities get an identity self-entry so that repeated
    application carries their features forward unchanged.
    """
    rows = []
    for e in range(graph.entity_count):
        counts = feature_counts(graph, e, FeatureType.E)
        total = sum(counts.values())
        if total == 0:
            rows.append([(e, 1.0)])
        else:
            rows.append([(j, k / total) for j, k in sorted(counts.items())])
    return SparseRowMatrix.from_rows(graph.entity_count, graph.entity_count, rows)


@dataclass
class RichnessProfile:
    """Reference similarities per entity, per type and per layer, plus the
    n x 4 reference matrix with column order (E, R, T, I)."""

    layer_sims: dict
    final_sims: dict
    reference_matrix: Array

    @classmethod
    def from_sims(cls, layer_sims: dict, final_sims: dict) -> "RichnessProfile":
        columns = [np.asarray(final_sims[t], dtype=np.float64) for t in ALL_TYPES]
        return cls(layer_sims=layer_sims, final_sims=final_sims,
                   reference_matrix=np.stack(columns, axis=1))
