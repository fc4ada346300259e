import numpy as np
import pytest

import graphmil.numerics as nm
from graphmil.numerics import ContractError, Matrix, backward, parameter
from graphmil.selection import SelectorParams, select_representatives

from gradcheck import max_grad_error


def _params(d_v, seed=0):
    return SelectorParams.init(np.random.default_rng(seed), d_v)


def _select(emb, hard, p, **kw):
    return select_representatives(Matrix(emb), hard, p.w_query, p.w_key,
                                  p.w_value, **kw)


def scalar_selection_oracle(rows, wq, wk, wv):
    """Loop re-evaluation of the per-patch self-attention importance."""
    d = len(rows[0])
    nk = len(rows)
    q = [[sum(rows[i][a] * wq[a][m] for a in range(d)) for m in range(d)]
         for i in range(nk)]
    k = [[sum(rows[i][a] * wk[a][m] for a in range(d)) for m in range(d)]
         for i in range(nk)]
    v = [[sum(rows[i][a] * wv[a][m] for a in range(d)) for m in range(d)]
         for i in range(nk)]
    e = [sum(q[i][m] * k[i][m] for m in range(d)) / np.sqrt(d) for i in range(nk)]
    mx = max(e)
    exps = [np.exp(x - mx) for x in e]
    alpha = [x / sum(exps) for x in exps]
    scores = [sum(alpha[i] * v[i][m] for m in range(d)) for i in range(nk)]
    return alpha, scores


def test_singleton_cluster_is_its_own_representative():
    emb = np.array([[1.0, 2.0], [5.0, 5.0], [6.0, 6.0]])
    sel = _select(emb, [0, 1, 1], _params(2))
    first = sel.choices[0]
    assert first.members == (0,)
    np.testing.assert_allclose(first.alpha, [1.0], atol=1e-12)
    assert first.representative == 0


def test_orthonormal_pair_ties_to_lex_smallest_embedding():
    emb = np.array([[1.0, 0.0], [0.0, 1.0]])
    p = SelectorParams(Matrix(np.eye(2)), Matrix(np.eye(2)),
                       Matrix(np.ones((2, 2))))
    sel = _select(emb, [0, 0], p)
    c = sel.choices[0]
    np.testing.assert_allclose(sorted(c.alpha), [0.5, 0.5], atol=1e-12)
    assert c.scores[0] == pytest.approx(c.scores[1])
    # canonical order puts [0,1] first, so the tie selects it
    np.testing.assert_array_equal(sel.representatives.data[0], [0.0, 1.0])


def test_scores_match_scalar_oracle():
    rng = np.random.default_rng(3)
    emb = rng.normal(size=(3, 4))
    p = _params(4, seed=1)
    sel = _select(emb, [0, 0, 0], p)
    c = sel.choices[0]
    ordered = emb[list(c.members)]
    alpha, scores = scalar_selection_oracle(ordered.tolist(),
                                            p.w_query.data.tolist(),
                                            p.w_key.data.tolist(),
                                            p.w_value.data.tolist())
    assert np.abs(np.array(alpha) - c.alpha).max() <= 1e-12
    assert np.abs(np.array(scores) - c.scores).max() <= 1e-12


def test_representative_rows_are_bitwise_copies():
    rng = np.random.default_rng(5)
    emb = rng.normal(size=(8, 3))
    sel = _select(emb, [0, 0, 1, 1, 1, 2, 2, 2], _params(3))
    for row, idx in zip(sel.representatives.data, sel.representative_indices):
        assert np.array_equal(row, emb[idx])


def test_sum_r_has_zero_gradient_into_w_value():
    # Representatives copy original embedding rows, so no loss on R can
    # reach the value projection.
    rng = np.random.default_rng(6)
    emb = rng.normal(size=(5, 3))
    p = _params(3, seed=2)
    wv = parameter(p.w_value)
    sel = select_representatives(Matrix(emb), [0, 0, 1, 1, 1],
                                 p.w_query, p.w_key, wv)
    loss = nm.reduce_sum(nm.gather_rows(Matrix(emb),
                                        list(sel.representative_indices)))
    backward(loss)
    assert wv.grad is None


def test_loss_on_alpha_gradient_matches_fd():
    rng = np.random.default_rng(7)
    emb = rng.normal(size=(4, 3))
    p = _params(3, seed=3)

    def build(nodes):
        sel = select_representatives(Matrix(emb), [0, 0, 0, 1],
                                     nodes[0], p.w_key, p.w_value)
        target = Matrix(np.array([[0.2, 0.5, 0.3]]))
        return nm.reduce_sum(nm.elementwise_mul(sel.choices[0].alpha_node, target))

    assert max_grad_error(build, [np.array(p.w_query.data)]) <= 1e-4


def test_loss_on_score_gradient_matches_fd():
    rng = np.random.default_rng(8)
    emb = rng.normal(size=(4, 3))
    p = _params(3, seed=4)

    def build(nodes):
        sel = select_representatives(Matrix(emb), [0, 0, 0, 0],
                                     p.w_query, nodes[0], nodes[1])
        return nm.reduce_sum(sel.choices[0].score_node)

    err = max_grad_error(build, [np.array(p.w_key.data), np.array(p.w_value.data)])
    assert err <= 1e-4


def test_tiny_param_perturbation_keeps_argmax():
    rng = np.random.default_rng(9)
    emb = rng.normal(size=(6, 4))
    p = _params(4, seed=5)
    base = _select(emb, [0, 0, 0, 1, 1, 1], p)
    bumped = SelectorParams(Matrix(p.w_query.data + 1e-9),
                            Matrix(p.w_key.data + 1e-9),
                            Matrix(p.w_value.data + 1e-9))
    after = _select(emb, [0, 0, 0, 1, 1, 1], bumped)
    assert base.representative_indices == after.representative_indices


def test_alpha_sums_to_one_per_cluster():
    rng = np.random.default_rng(10)
    emb = rng.normal(size=(9, 5))
    sel = _select(emb, [0, 1, 2, 0, 1, 2, 0, 1, 2], _params(5, seed=6))
    for c in sel.choices:
        assert c.alpha.sum() == pytest.approx(1.0, abs=1e-9)


def test_selection_invariant_to_patch_permutation():
    rng = np.random.default_rng(11)
    emb = rng.normal(size=(10, 4))
    hard = np.array([0, 0, 0, 1, 1, 1, 1, 2, 2, 2])
    p = _params(4, seed=7)
    base = _select(emb, hard, p)
    perm = rng.permutation(10)
    permed = _select(emb[perm], hard[perm], p)
    np.testing.assert_array_equal(base.representatives.data,
                                  permed.representatives.data)
    for a, b in zip(base.choices, permed.choices):
        np.testing.assert_allclose(a.alpha, b.alpha, atol=1e-12)
        np.testing.assert_allclose(a.scores, b.scores, atol=1e-12)


def test_duplicated_patches_get_identical_alpha_and_score():
    rng = np.random.default_rng(12)
    row = rng.normal(size=4)
    other = rng.normal(size=4)
    emb = np.stack([row, other, row])
    sel = _select(emb, [0, 0, 0], _params(4, seed=8))
    c = sel.choices[0]
    dup = [i for i, m in enumerate(c.members) if np.array_equal(emb[m], row)]
    assert len(dup) == 2
    assert c.alpha[dup[0]] == pytest.approx(c.alpha[dup[1]], abs=1e-15)
    assert c.scores[dup[0]] == pytest.approx(c.scores[dup[1]], abs=1e-15)


def test_empty_input_rejected():
    with pytest.raises(ContractError):
        select_representatives(Matrix(np.zeros((1, 2))), [], *[np.eye(2)] * 3)


def test_pairwise_variant_runs_and_differs():
    rng = np.random.default_rng(13)
    emb = rng.normal(size=(5, 3))
    p = _params(3, seed=9)
    plain = _select(emb, [0] * 5, p)
    pair = _select(emb, [0] * 5, p, pairwise=True)
    assert pair.representatives.rows == 1
    assert not np.allclose(plain.choices[0].scores, pair.choices[0].scores)
