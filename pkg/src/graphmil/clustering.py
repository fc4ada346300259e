"""Embedded clustering of a bag's patches.

Soft assignments follow a Student-t kernel around trainable centroids; a
sharpened, mass-balanced target distribution is recomputed each epoch and
the KL divergence from it drives centroid refinement.  Patches whose
embeddings are near-duplicates end up in the same cluster, which is what
lets the later selection stage strip redundancy.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import ContractError, Matrix, Node, backward, constant, parameter
from .optim import AdamState, adam_step


@dataclass(frozen=True)
class ClusterState:
    centroids: Matrix            # K x d_v
    K: int
    alpha: float
    epsilon: float
    Q: Matrix                    # N x K soft assignments, rows sum to 1
    T: Matrix                    # N x K sharpened targets, rows sum to 1
    n_iters: int = 0             # gradient updates taken
    n_epochs: int = 0            # target refreshes
    initial_loss: float = 0.0
    final_loss: float = 0.0

    def hard_assignments(self) -> np.ndarray:
        return hard_assignments(self.Q)


def hard_assignments(Q: Matrix) -> np.ndarray:
    """argmax per row; ties resolve to the lowest cluster index."""
    return np.argmax(Q.data, axis=1)


def _lex_smallest(rows: np.ndarray, candidates: np.ndarray) -> int:
    best = candidates[0]
    for c in candidates[1:]:
        if tuple(rows[c]) < tuple(rows[best]):
            best = c
    return int(best)


def init_centroids(embeddings: Matrix, K: int) -> Matrix:
    """Greedy farthest-point seeding, invariant to row order.

    The first centroid is the row with minimal L2 norm (ties broken by
    lexicographic comparison of coordinates); each further centroid is the
    row maximizing its distance to the nearest already-chosen centroid,
    with the same tie rule.  The result depends only on the multiset of
    rows, which keeps the whole pipeline permutation-invariant.
    """
    if K < 1:
        raise ContractError("K must be >= 1")
    pts = embeddings.data
    n = pts.shape[0]
    if K > n:
        warnings.warn(f"K={K} exceeds the {n} available patches; clamping to {n}")
        K = n

    norms = np.linalg.norm(pts, axis=1)
    chosen = [_lex_smallest(pts, np.flatnonzero(norms == norms.min()))]
    min_dist = np.linalg.norm(pts - pts[chosen[0]], axis=1)
    while len(chosen) < K:
        far = np.flatnonzero(min_dist == min_dist.max())
        nxt = _lex_smallest(pts, far)
        chosen.append(nxt)
        min_dist = np.minimum(min_dist, np.linalg.norm(pts - pts[nxt], axis=1))
    return Matrix(pts[chosen].copy())


def soft_assign(embeddings, centroids, alpha: float = 1.0) -> Node:
    """N x K soft assignment matrix under the Student-t kernel.

    Row i, column k holds the normalized (1 + ||f_i - mu_k||^2 / alpha)
    ^ (-(alpha+1)/2) weight.  Differentiable w.r.t. both operands.
    """
    F = embeddings if isinstance(embeddings, Node) else constant(embeddings)
    MU = centroids if isinstance(centroids, Node) else constant(centroids)
    if F.value.cols != MU.value.cols:
        raise nm.DimensionError(
            f"soft_assign: embedding dim {F.value.cols} != centroid dim {MU.value.cols}")

    ff = nm.row_sums(nm.elementwise_mul(F, F))                   # N x 1
    mm = nm.transpose(nm.row_sums(nm.elementwise_mul(MU, MU)))   # 1 x K
    cross = nm.matmul(F, nm.transpose(MU))                       # N x K
    d2 = nm.sub(nm.add(ff, mm), nm.scalar_mul(cross, 2.0))
    d2 = nm.clip(d2, 0.0, 1e300)  # guard tiny negative cancellation residue
    kernel = nm.pow_scalar(nm.add(nm.scalar_mul(d2, 1.0 / alpha), Matrix([[1.0]])),
                           -(alpha + 1.0) / 2.0)
    return nm.divide(kernel, nm.row_sums(kernel))


def target_distribution(Q: Matrix) -> Matrix:
    """Sharpened targets: squared assignments, balanced by cluster mass,
    re-normalized per row.  Treated as a constant downstream (no gradient
    flows through the target)."""
    q = Q.data
    mass = q.sum(axis=0, keepdims=True)          # 1 x K
    num = q * q / mass
    return Matrix(num / num.sum(axis=1, keepdims=True))


def clustering_loss(T, Q) -> Node:
    """KL(T || Q) summed over patches and clusters; >= 0, zero iff T == Q."""
    Tn = T if isinstance(T, Node) else constant(T)
    Qn = Q if isinstance(Q, Node) else constant(Q)
    if Tn.value.shape != Qn.value.shape:
        raise nm.DimensionError(
            f"clustering_loss: shapes {Tn.value.shape} vs {Qn.value.shape}")
    return nm.reduce_sum(nm.elementwise_mul(Tn, nm.sub(nm.log(Tn), nm.log(Qn))))


def dec_fit(embeddings: Matrix, K: int, epsilon: float = 1e-4,
            max_iters: int = 200, lr: float = 0.05,
            alpha: float = 1.0, inner_steps: int = 40) -> ClusterState:
    """Refine centroids by minimizing the clustering loss.

    The sharpened target is recomputed at the start of each epoch and held
    constant while up to `inner_steps` Adam updates chase it; `max_iters`
    caps the total number of updates across epochs.  Fitting stops early
    once the fraction of patches changing hard assignment between epochs
    drops below `epsilon`.  `initial_loss` is the loss against the first
    target before any update; `final_loss` is the loss against the last
    epoch's target after its updates.
    """
    if max_iters < 1:
        raise ContractError("max_iters must be >= 1")
    if inner_steps < 1:
        raise ContractError("inner_steps must be >= 1")
    mu = np.array(init_centroids(embeddings, K).data)
    k_eff = mu.shape[0]
    state = AdamState()

    Q = soft_assign(embeddings, Matrix(mu), alpha).value
    prev_hard = hard_assignments(Q)
    initial_loss = None
    final_loss = None
    T = target_distribution(Q)

    steps = 0
    epochs = 0
    while steps < max_iters:
        epochs += 1
        T = target_distribution(Q)
        if initial_loss is None:
            initial_loss = clustering_loss(T, Q).value.item()
        for _ in range(min(inner_steps, max_iters - steps)):
            mu_node = parameter(Matrix(mu))
            loss = clustering_loss(T, soft_assign(embeddings, mu_node, alpha))
            backward(loss)
            adam_step({"mu": mu}, {"mu": mu_node.grad}, state, lr)
            steps += 1

        Q = soft_assign(embeddings, Matrix(mu), alpha).value
        final_loss = clustering_loss(T, Q).value.item()
        hard = hard_assignments(Q)
        changed = float(np.mean(hard != prev_hard))
        prev_hard = hard
        if changed < epsilon:
            break

    return ClusterState(centroids=Matrix(mu), K=k_eff, alpha=alpha,
                        epsilon=epsilon, Q=Q, T=target_distribution(Q),
                        n_iters=steps, n_epochs=epochs,
                        initial_loss=initial_loss, final_loss=final_loss)
