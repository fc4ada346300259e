"""Per-bag similarity graph over representative embeddings.

Nodes are the selected representatives; the similarity matrix is cosine;
edges come from per-row top-m selection with Gumbel perturbation during
training and a deterministic argmax at evaluation.  Self-similarity is
masked before selection (a node linking only itself carries no relational
signal) and self-loops are reinserted afterwards so aggregation always
sees a non-empty neighborhood.  Edges are structure, not differentiable
quantities: no gradient crosses the discrete choice.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .numerics import ContractError, Matrix


@dataclass(frozen=True)
class SimilarityGraph:
    nodes: Matrix                 # K_eff x d_v representative embeddings
    similarity: Matrix            # K_eff x K_eff cosine matrix (unmasked)
    adjacency: np.ndarray         # K_eff x K_eff 0/1, symmetric, self-loops

    @property
    def n_nodes(self) -> int:
        return self.nodes.rows

    def neighbors(self, i: int) -> tuple[int, ...]:
        return tuple(int(j) for j in np.flatnonzero(self.adjacency[i]))


def cosine_similarity_matrix(reps: Matrix) -> Matrix:
    """Pairwise cosine similarities; rejects zero-norm representatives."""
    r = reps.data
    norms = np.linalg.norm(r, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ContractError(f"representative node {zero[0]} has zero norm")
    unit = r / norms[:, None]
    s = unit @ unit.T
    return Matrix(np.clip(s, -1.0, 1.0))


def build_edges(S: Matrix, mode: str = "eval", m_neighbors: int = 1,
                tau: float = 1.0, rng: np.random.Generator | None = None,
                symmetrize: bool = True) -> np.ndarray:
    """0/1 adjacency from per-row top-m neighbor selection.

    Train mode perturbs each masked similarity row with tau-scaled
    Gumbel(0,1) noise before taking the top m; eval mode is noiseless with
    ties resolved to the lower column index.  The diagonal is masked during
    selection and self-loops are added after symmetrization.
    """
    if m_neighbors < 1:
        raise ContractError("m_neighbors must be >= 1")
    if mode not in ("train", "eval"):
        raise ContractError(f"unknown edge mode {mode!r}")
    s = np.array(S.data, dtype=np.float64)
    k = s.shape[0]
    if s.shape != (k, k):
        raise ContractError(f"similarity matrix must be square, got {s.shape}")
    if k == 1:
        return np.ones((1, 1), dtype=np.int8)

    np.fill_diagonal(s, -np.inf)
    if mode == "train":
        if rng is None:
            raise ContractError("train mode needs an rng for Gumbel noise")
        u = rng.uniform(size=(k, k))
        s = s + tau * -np.log(-np.log(u))

    m = min(m_neighbors, k - 1)
    adj = np.zeros((k, k), dtype=np.int8)
    cols = np.arange(k)
    for i in range(k):
        order = np.lexsort((cols, -s[i]))   # similarity desc, index asc
        adj[i, order[:m]] = 1
    if symmetrize:
        adj = adj | adj.T
    np.fill_diagonal(adj, 1)
    return adj


def build_graph(reps: Matrix, mode: str = "eval", m_neighbors: int = 1,
                tau: float = 1.0, rng: np.random.Generator | None = None,
                symmetrize: bool = True) -> SimilarityGraph:
    S = cosine_similarity_matrix(reps)
    adj = build_edges(S, mode=mode, m_neighbors=m_neighbors, tau=tau, rng=rng,
                      symmetrize=symmetrize)
    return SimilarityGraph(nodes=reps, similarity=S, adjacency=adj)


def to_dot(graph: SimilarityGraph) -> str:
    lines = ["graph bag {"]
    for i in range(graph.n_nodes):
        lines.append(f"  n{i};")
    for i in range(graph.n_nodes):
        for j in range(i + 1, graph.n_nodes):
            if graph.adjacency[i, j]:
                sim = graph.similarity.data[i, j]
                lines.append(f'  n{i} -- n{j} [label="{sim:.4f}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def to_adjacency_json(graph: SimilarityGraph) -> str:
    doc = {
        "n_nodes": graph.n_nodes,
        "neighbors": {str(i): list(graph.neighbors(i))
                      for i in range(graph.n_nodes)},
        "similarity": [[round(float(v), 12) for v in row]
                       for row in graph.similarity.data],
    }
    return json.dumps(doc, indent=2) + "\n"
