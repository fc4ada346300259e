"""Per-cluster attention scoring and representative-patch selection.

Within each cluster, every patch gets a self-attention score from the
element-wise product of its own query and key projections (scaled by
sqrt(d_v)), softmax-normalized over the cluster, and folded with its value
projection into one scalar importance.  The single highest-scoring patch
represents the cluster; its *original* embedding row (not a value-mixed
vector) is copied into the representative matrix.

Cluster members are processed in a canonical order (lexicographic by
embedding coordinates, then original index) so that score ties resolve to
the lexicographically smallest embedding and the whole selection is
invariant to patch order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import ContractError, Matrix, Node, constant, random_uniform


@dataclass(frozen=True)
class SelectorParams:
    """Trainable square projections, one each for query/key/value."""

    w_query: Matrix
    w_key: Matrix
    w_value: Matrix

    @classmethod
    def init(cls, rng: np.random.Generator, d_v: int) -> "SelectorParams":
        s = 1.0 / np.sqrt(d_v)
        return cls(random_uniform(rng, d_v, d_v, -s, s),
                   random_uniform(rng, d_v, d_v, -s, s),
                   random_uniform(rng, d_v, d_v, -s, s))


@dataclass(frozen=True)
class ClusterChoice:
    cluster_id: int
    members: tuple[int, ...]          # original patch indices, canonical order
    alpha: np.ndarray                 # attention weights, canonical order
    scores: np.ndarray                # importance scores, canonical order
    representative: int               # original patch index
    alpha_node: Node
    score_node: Node


@dataclass(frozen=True)
class ClusterSelection:
    choices: tuple[ClusterChoice, ...]
    representative_indices: tuple[int, ...]
    representatives: Matrix           # K_eff x d_v, copies of original rows


def _canonical_order(rows: np.ndarray, indices: np.ndarray) -> list[int]:
    return sorted((int(i) for i in indices),
                  key=lambda i: (tuple(rows[i]), i))


def select_representatives(embeddings, hard_assignments, w_query, w_key,
                           w_value, pairwise: bool = False) -> ClusterSelection:
    """Pick one representative patch per non-empty cluster.

    `hard_assignments` maps each patch to a cluster id; empty ids are
    skipped, so the representative matrix has K_eff <= K rows, stacked in
    increasing cluster-id order.  With `pairwise=True` an experimental
    full query-key attention replaces the per-patch self score.
    """
    emb = embeddings if isinstance(embeddings, Node) else constant(embeddings)
    rows = emb.value.data
    n = rows.shape[0]
    d_v = rows.shape[1]
    hard = np.asarray(hard_assignments, dtype=int)
    if hard.shape != (n,):
        raise ContractError(
            f"hard_assignments must have one entry per patch ({n}), got {hard.shape}")
    if n == 0:
        raise ContractError("select_representatives: no patches")

    wq = w_query if isinstance(w_query, Node) else constant(w_query)
    wk = w_key if isinstance(w_key, Node) else constant(w_key)
    wv = w_value if isinstance(w_value, Node) else constant(w_value)
    for name, w in (("w_query", wq), ("w_key", wk), ("w_value", wv)):
        if w.value.shape != (d_v, d_v):
            raise nm.DimensionError(
                f"{name} must be {d_v}x{d_v}, got {w.value.shape}")

    scale = 1.0 / np.sqrt(d_v)
    choices = []
    for cid in sorted(set(int(c) for c in hard)):
        members = _canonical_order(rows, np.flatnonzero(hard == cid))
        z = nm.gather_rows(emb, members)
        q = nm.matmul(z, wq)
        k = nm.matmul(z, wk)
        v = nm.matmul(z, wv)
        if pairwise:
            att = nm.scalar_mul(nm.matmul(q, nm.transpose(k)), scale)
            weights = nm.softmax_rows(att)                        # N_k x N_k
            alpha_node = weights
            score_node = nm.row_sums(nm.matmul(weights, v))       # N_k x 1
            alpha_flat = weights.value.data.mean(axis=0)
        else:
            e = nm.scalar_mul(nm.row_sums(nm.elementwise_mul(q, k)), scale)
            alpha_node = nm.softmax_rows(nm.transpose(e))         # 1 x N_k
            score_node = nm.elementwise_mul(nm.transpose(alpha_node),
                                            nm.row_sums(v))       # N_k x 1
            alpha_flat = alpha_node.value.data.ravel()
        scores = score_node.value.data.ravel()
        best = int(np.argmax(scores))   # first max wins = canonical tie-break
        choices.append(ClusterChoice(cluster_id=cid,
                                     members=tuple(members),
                                     alpha=alpha_flat.copy(),
                                     scores=scores.copy(),
                                     representative=members[best],
                                     alpha_node=alpha_node,
                                     score_node=score_node))

    if not choices:
        raise ContractError("select_representatives: all clusters empty")
    rep_idx = tuple(c.representative for c in choices)
    reps = Matrix(rows[list(rep_idx)].copy())
    return ClusterSelection(choices=tuple(choices),
                            representative_indices=rep_idx,
                            representatives=reps)
