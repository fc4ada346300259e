import math

import numpy as np
import pytest

import graphmil.numerics as nm
from graphmil.heads import (
    ClassifierHead,
    bce_loss,
    classify,
    init_prefix_projection,
    project_prefix,
    total_loss_caption,
    total_loss_classification,
)
from graphmil.numerics import ContractError, Matrix, constant

from gradcheck import max_grad_error


def test_bce_perfect_prediction_is_clamp_scale():
    preds = Matrix([[1.0 - 1e-7], [1e-7]])
    labels = Matrix([[1.0], [0.0]])
    assert bce_loss(preds, labels).value.item() < 1e-6


def test_bce_at_half_is_log_two():
    preds = Matrix([[0.5], [0.5], [0.5]])
    labels = Matrix([[1.0], [0.0], [1.0]])
    assert bce_loss(preds, labels).value.item() == pytest.approx(math.log(2), abs=1e-12)


def test_bce_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.05, 0.95, size=(6, 1))
    y = rng.integers(0, 2, size=(6, 1)).astype(float)
    got = bce_loss(Matrix(p), Matrix(y)).value.item()
    want = -np.mean([yy * math.log(pp) + (1 - yy) * math.log(1 - pp)
                     for pp, yy in zip(p.ravel(), y.ravel())])
    assert got == pytest.approx(want, abs=1e-12)


def test_bce_rejects_empty_and_nonbinary():
    with pytest.raises(ContractError):
        bce_loss(Matrix(np.zeros((1, 1)) + 0.5), Matrix([[0.3]]))


def test_total_losses():
    z = constant(Matrix([[0.0]]))
    assert total_loss_classification(z, z).value.item() == 0.0
    a = constant(Matrix([[0.5]]))
    b = constant(Matrix([[0.25]]))
    assert total_loss_classification(a, b).value.item() == pytest.approx(0.75)
    assert total_loss_classification(a, b, lambda_clu=0.0).value.item() == 0.5
    assert total_loss_caption(a, b).value.item() == pytest.approx(0.75)


def test_project_prefix_zero_and_basis():
    h = Matrix([[1.0, 0.0, 0.0]])
    wc = Matrix(np.arange(12, dtype=float).reshape(3, 4))
    assert np.all(project_prefix(h, Matrix.zeros(3, 4)).value.data == 0)
    np.testing.assert_array_equal(project_prefix(h, wc).value.data, wc.data[0:1])


def test_project_prefix_gradient_matches_fd():
    rng = np.random.default_rng(1)
    h = rng.normal(size=(1, 4))
    wc = rng.normal(size=(4, 5))

    def build(nodes):
        v = project_prefix(Matrix(h), nodes[0])
        return nm.reduce_sum(nm.elementwise_mul(v, v))

    assert max_grad_error(build, [wc]) <= 1e-4


def test_classifier_output_clamped_and_gradients():
    rng = np.random.default_rng(2)
    head = ClassifierHead.init(rng, d_in=6, hidden=8)
    h = rng.normal(size=(3, 6)) * 50
    out = classify(Matrix(h), head.w1, head.b1, head.w2, head.b2).value.data
    assert (out >= 1e-7).all() and (out <= 1 - 1e-7).all()

    labels = Matrix(np.array([[1.0], [0.0], [1.0]]))
    vals = [np.array(head.w1.data), np.array(head.b1.data),
            np.array(head.w2.data), np.array(head.b2.data)]

    def build(nodes):
        p = classify(Matrix(h / 50), *nodes)
        return bce_loss(p, labels)

    assert max_grad_error(build, vals) <= 1e-4


def test_prefix_projection_init_shape():
    wc = init_prefix_projection(np.random.default_rng(3), d_in=8, d_model=16)
    assert wc.shape == (8, 16)
