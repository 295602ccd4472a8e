import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from primitives import CASES
from transferprune import autodiff as ad
from transferprune.gradcheck import gradient_error


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradients_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(10):
        fn, inputs = CASES[name](rng)
        assert gradient_error(fn, inputs) < 1e-4


def test_matmul_shape_error_names_both_shapes():
    a = ad.Tensor(np.zeros((2, 3)))
    b = ad.Tensor(np.zeros((4, 5)))
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(a, b)


def test_incompatible_broadcast_is_a_shape_error():
    with pytest.raises(ad.ShapeError):
        ad.add(ad.Tensor(np.zeros(3)), ad.Tensor(np.zeros(4)))


def test_backward_requires_scalar():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.ShapeError):
        ad.backward(x * 2.0)


def test_backward_overwrites_rather_than_accumulates():
    x = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    ad.backward(ad.sum(x * x))
    ad.backward(ad.sum(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_reused_node_accumulates_within_one_graph():
    x = ad.Tensor(np.array(3.0), requires_grad=True)
    y = x * x
    ad.backward(y + y)
    assert x.grad == pytest.approx(12.0)


def test_no_grad_builds_no_graph():
    x = ad.Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = x * 3.0
    assert not y.requires_grad
    assert ad.is_grad_enabled()


def test_constants_get_no_gradient():
    x = ad.Tensor(np.ones(2), requires_grad=True)
    c = ad.Tensor(np.ones(2))
    ad.backward(ad.sum(x * c))
    assert c.grad is None


def test_sigmoid_is_stable_at_extremes():
    out = ad.sigmoid(ad.Tensor(np.array([-1000.0, 0.0, 1000.0]))).data
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])
    assert np.all(np.isfinite(out))


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ad.ShapeError):
        ad.cross_entropy(ad.Tensor(np.zeros((2, 3))), np.array([0, 1, 2]))


def test_deep_chain_does_not_hit_recursion_limit():
    x = ad.Tensor(np.array(1.0), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    ad.backward(y)
    assert x.grad == pytest.approx(1.0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)), arrays(np.float64, (4,), elements=st.floats(-5, 5)))
def test_broadcast_gradient_sums_over_expanded_axis(a, b):
    ta = ad.Tensor(a, requires_grad=True)
    tb = ad.Tensor(b, requires_grad=True)
    ad.backward(ad.sum(ta * tb))
    np.testing.assert_allclose(ta.grad, np.broadcast_to(b, a.shape))
    np.testing.assert_allclose(tb.grad, a.sum(axis=0))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 5), elements=st.floats(-30, 30)))
def test_softmax_rows_are_distributions(x):
    out = ad.softmax(ad.Tensor(x)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0)
