"""Graph attention aggregation over the similarity graph.

Each layer projects node features, scores every edge with a learnable
2*d_out attention vector through a LeakyReLU, softmax-normalizes the
scores over each node's neighborhood, and averages the projected
neighbors under those weights (again through the LeakyReLU).  After the
final layer, global mean pooling collapses node features into one bag
embedding.  The same slope serves both the scoring nonlinearity and the
outer activation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import ContractError, Matrix, Node, constant, random_uniform

NEG_MASK = -1e9  # additive mask for non-edges; exp underflows to exactly 0


@dataclass(frozen=True)
class GatLayerParams:
    w: Matrix          # d_in x d_out
    a: Matrix          # (2*d_out) x 1 attention vector


@dataclass(frozen=True)
class GatStack:
    layers: tuple[GatLayerParams, ...]
    slope: float = 0.2
    dropout: float = 0.3

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_out: int = 512,
             n_layers: int = 3, slope: float = 0.2,
             dropout: float = 0.3) -> "GatStack":
        layers = []
        dim = d_in
        for _ in range(n_layers):
            sw = 1.0 / np.sqrt(dim)
            sa = 1.0 / np.sqrt(d_out)
            layers.append(GatLayerParams(
                w=random_uniform(rng, dim, d_out, -sw, sw),
                a=random_uniform(rng, 2 * d_out, 1, -sa, sa)))
            dim = d_out
        return cls(layers=tuple(layers), slope=slope, dropout=dropout)


def _edge_mask(adjacency: np.ndarray) -> Matrix:
    return Matrix(np.where(adjacency > 0, 0.0, NEG_MASK))


def gat_layer(h, adjacency: np.ndarray, w, a, slope: float = 0.2,
              dropout_mask: np.ndarray | None = None) -> tuple[Node, Node]:
    """One attention layer; returns (updated features, attention matrix).

    `adjacency` must contain self-loops so every neighborhood is non-empty.
    Row v of the attention matrix holds the coefficients node v assigns to
    its neighbors (zero off-neighborhood).
    """
    hn = h if isinstance(h, Node) else constant(h)
    wn = w if isinstance(w, Node) else constant(w)
    an = a if isinstance(a, Node) else constant(a)
    k = hn.value.rows
    if adjacency.shape != (k, k):
        raise ContractError(
            f"adjacency {adjacency.shape} does not match {k} nodes")
    if not np.diagonal(adjacency).all():
        raise ContractError("adjacency must carry self-loops")
    d_out = wn.value.cols
    if an.value.shape != (2 * d_out, 1):
        raise nm.DimensionError(
            f"attention vector must be {2 * d_out}x1, got {an.value.shape}")

    wh = nm.matmul(hn, wn)                                   # K x d_out
    s_self = nm.matmul(wh, nm.slice_rows(an, 0, d_out))      # K x 1
    s_neigh = nm.matmul(wh, nm.slice_rows(an, d_out, 2 * d_out))
    scores = nm.leaky_relu(nm.add(s_self, nm.transpose(s_neigh)), slope)
    scores = nm.add(scores, _edge_mask(adjacency))
    beta = nm.softmax_rows(scores)
    if dropout_mask is not None:
        beta = nm.elementwise_mul(beta, Matrix(dropout_mask))
    out = nm.leaky_relu(nm.matmul(beta, wh), slope)
    return out, beta


def gat_forward(features, adjacency: np.ndarray, layer_params, slope: float = 0.2,
                dropout: float = 0.0, training: bool = False,
                rng: np.random.Generator | None = None) -> tuple[Node, list[Node]]:
    """Run the full stack and mean-pool to a 1 x d_out bag embedding.

    `layer_params` is a sequence of (w, a) pairs (Matrix or Node).  In
    training mode, inverted dropout with rate `dropout` is applied to each
    layer's attention weights using masks drawn from `rng`.
    """
    h = features if isinstance(features, Node) else constant(features)
    k = h.value.rows
    betas = []
    for w, a in layer_params:
        mask = None
        if training and dropout > 0.0:
            if rng is None:
                raise ContractError("training-mode dropout needs an rng")
            keep = (rng.random((k, k)) >= dropout).astype(np.float64)
            mask = keep / (1.0 - dropout)
        h, beta = gat_layer(h, adjacency, w, a, slope, mask)
        betas.append(beta)
    pool = Matrix(np.full((1, k), 1.0 / k))
    return nm.matmul(pool, h), betas


def bag_embedding(graph, stack: GatStack) -> Matrix:
    """Eval-mode bag embedding for a built similarity graph."""
    pooled, _ = gat_forward(graph.nodes, graph.adjacency,
                            [(l.w, l.a) for l in stack.layers],
                            slope=stack.slope, dropout=0.0, training=False)
    return pooled.value
