import numpy as np
import pytest

from transferprune.autodiff import Tensor
from transferprune.optim import NonFiniteGradientError, Optimizer, OptimizerState


def _param(value, grad):
    p = Tensor(np.array(value, dtype=float), requires_grad=True)
    p.grad = np.array(grad, dtype=float)
    return p


def test_sgd_step():
    p = _param(1.0, 2.0)
    Optimizer([p], "sgd", 0.1).step()
    assert p.data == pytest.approx(0.8)


def test_adam_first_step_moves_by_learning_rate():
    p = _param(0.0, 1.0)
    Optimizer([p], "adam", 1e-3).step()
    # bias correction makes the first update lr * g / |g|
    assert p.data == pytest.approx(-1e-3, rel=1e-4)


def test_adam_matches_reference_recurrence():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(5, 3))
    p = Tensor(np.zeros(3), requires_grad=True)
    opt = Optimizer([p], "adam", 0.01)
    m = v = np.zeros(3)
    x = np.zeros(3)
    for t, g in enumerate(grads, start=1):
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p.data, x, rtol=1e-12)


def test_non_finite_gradient_rejects_the_whole_step():
    good, bad = _param(1.0, 1.0), _param(1.0, np.nan)
    opt = Optimizer([good, bad], "sgd", 0.1)
    with pytest.raises(NonFiniteGradientError):
        opt.step()
    assert good.data == 1.0 and opt.state.step_count == 0


def test_step_consumes_gradients():
    p = _param(1.0, 1.0)
    opt = Optimizer([p], "sgd", 0.5)
    opt.step()
    opt.step()  # no fresh gradient, nothing to apply
    assert p.data == pytest.approx(0.5)


@pytest.mark.parametrize("kind,lr", [("rmsprop", 0.1), ("sgd", 0.0), ("adam", -1.0)])
def test_invalid_state(kind, lr):
    with pytest.raises(ValueError):
        OptimizerState(kind, lr)
