"""Classification head, loss compositions, and the visual-prefix projection.

The bag embedding runs through a small two-layer MLP with a sigmoid output
for binary classification; for captioning it is mapped by a single linear
projection into the decoder's token-embedding space and prepended to the
caption as a one-token visual prefix.  Both task losses add the clustering
loss with a configurable weight (1.0 reproduces the plain sum).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import ContractError, Matrix, Node, constant, random_uniform

PROB_EPS = 1e-7  # predicted probabilities live in [PROB_EPS, 1 - PROB_EPS]


@dataclass(frozen=True)
class ClassifierHead:
    w1: Matrix                    # d_in x hidden
    b1: Matrix                    # 1 x hidden
    w2: Matrix                    # hidden x 1
    b2: Matrix                    # 1 x 1
    slope: float = 0.2

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int,
             hidden: int = 128, slope: float = 0.2) -> "ClassifierHead":
        s1 = 1.0 / np.sqrt(d_in)
        s2 = 1.0 / np.sqrt(hidden)
        return cls(w1=random_uniform(rng, d_in, hidden, -s1, s1),
                   b1=Matrix.zeros(1, hidden),
                   w2=random_uniform(rng, hidden, 1, -s2, s2),
                   b2=Matrix.zeros(1, 1),
                   slope=slope)


def classify(h_mean, w1, b1, w2, b2, slope: float = 0.2) -> Node:
    """Bag probability in (0, 1); rows of `h_mean` are independent bags."""
    hidden = nm.leaky_relu(nm.add(nm.matmul(h_mean, w1), b1), slope)
    logit = nm.add(nm.matmul(hidden, w2), b2)
    return nm.clip(nm.sigmoid(logit), PROB_EPS, 1.0 - PROB_EPS)


def bce_loss(preds, labels) -> Node:
    """Mean binary cross-entropy over the batch; labels are 0/1."""
    p = preds if isinstance(preds, Node) else constant(preds)
    y = labels if isinstance(labels, Node) else constant(labels)
    n = p.value.rows
    if n < 1:
        raise ContractError("bce_loss: empty batch")
    if y.value.shape != p.value.shape:
        raise nm.DimensionError(
            f"bce_loss: predictions {p.value.shape} vs labels {y.value.shape}")
    yv = y.value.data
    if not np.isin(yv, (0.0, 1.0)).all():
        raise ContractError("bce_loss: labels must be 0 or 1")
    ones = Matrix.full(n, 1, 1.0)
    pos = nm.elementwise_mul(y, nm.log(p))
    neg = nm.elementwise_mul(nm.sub(ones, y), nm.log(nm.sub(ones, p)))
    return nm.scalar_mul(nm.reduce_sum(nm.add(pos, neg)), -1.0 / n)


def total_loss_classification(bce, clu, lambda_clu: float = 1.0) -> Node:
    b = bce if isinstance(bce, Node) else constant(bce)
    c = clu if isinstance(clu, Node) else constant(clu)
    return nm.add(b, nm.scalar_mul(c, lambda_clu))


def total_loss_caption(cap, clu, lambda_clu: float = 1.0) -> Node:
    return total_loss_classification(cap, clu, lambda_clu)


def project_prefix(h_mean, w_c) -> Node:
    """Map the bag embedding into the decoder input space (1 x d_model)."""
    return nm.matmul(h_mean, w_c)


def init_prefix_projection(rng: np.random.Generator, d_in: int,
                           d_model: int = 768) -> Matrix:
    s = 1.0 / np.sqrt(d_in)
    return random_uniform(rng, d_in, d_model, -s, s)
