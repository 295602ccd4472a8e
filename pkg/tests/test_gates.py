import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transferprune import autodiff as ad
from transferprune.gates import (DEFAULT_CONFIG, GateParams, HardConcreteConfig, deterministic_gate, draw_uniform,
                                 prob_nonzero, sample_gate)


def test_sample_gate_examples():
    assert sample_gate(0.0, 0.5) == pytest.approx(0.5)
    assert sample_gate(30.0, 0.5) == 1.0
    assert sample_gate(-30.0, 0.5) == 0.0


def test_deterministic_gate_examples():
    assert deterministic_gate(0.0) == pytest.approx(0.5)
    assert deterministic_gate(30.0) == 1.0
    assert deterministic_gate(-30.0) == 0.0


@pytest.mark.parametrize("u", [0.0, 1.0, -0.1])
def test_uniform_outside_open_interval_is_rejected(u):
    with pytest.raises(ValueError):
        sample_gate(0.0, u)


def test_prob_nonzero_limits():
    assert prob_nonzero(-1e3) == pytest.approx(0.0, abs=1e-12)
    assert prob_nonzero(1e3) == pytest.approx(1.0)


def _closed_form_mp(log_alpha, beta=mpmath.mpf(2) / 3, lo=mpmath.mpf("-0.1"), hi=mpmath.mpf("1.1")):
    # P(stretched > 0) = P(s > -lo / (hi - lo)), s logistic in (la + noise) / beta
    threshold = -lo / (hi - lo)
    logit = mpmath.log(threshold / (1 - threshold))
    return 1 / (1 + mpmath.exp(-(log_alpha - beta * logit)))


@pytest.mark.parametrize("log_alpha", [-3.0, 0.0, 2.0, 5.0])
def test_prob_nonzero_matches_high_precision_derivation(log_alpha):
    mpmath.mp.dps = 40
    assert prob_nonzero(log_alpha) == pytest.approx(float(_closed_form_mp(mpmath.mpf(log_alpha))), rel=1e-13)


@pytest.mark.parametrize("log_alpha", [-1.0, 0.0, 5.0])
def test_prob_nonzero_matches_monte_carlo(log_alpha):
    n = 200_000
    u = draw_uniform(np.random.default_rng(7), n)
    z = sample_gate(np.full(n, log_alpha), u)
    p = prob_nonzero(log_alpha)
    assert abs(np.mean(z > 0) - p) < 4 * math.sqrt(p * (1 - p) / n)


def test_pathwise_gradient_of_expected_gate():
    n = 100_000
    u = draw_uniform(np.random.default_rng(3), n)
    for la0 in (-0.5, 0.3, 1.5):
        la = ad.Tensor(np.array(la0), requires_grad=True)
        ad.backward(ad.mean(sample_gate(la * np.ones(n), u)))
        eps = 1e-4
        up = np.mean(sample_gate(np.full(n, la0 + eps), u))
        down = np.mean(sample_gate(np.full(n, la0 - eps), u))
        fd = (up - down) / (2 * eps)
        assert float(la.grad) == pytest.approx(fd, rel=1e-2)


def test_tensor_in_tensor_out():
    la = ad.Tensor(np.zeros(3), requires_grad=True)
    assert isinstance(prob_nonzero(la), ad.Tensor)
    assert isinstance(prob_nonzero(np.zeros(3)), np.ndarray)
    assert isinstance(prob_nonzero(0.0), float)


def test_config_validation():
    with pytest.raises(ValueError):
        HardConcreteConfig(beta=0.0)
    with pytest.raises(ValueError):
        HardConcreteConfig(stretch_lo=0.1)
    with pytest.raises(ValueError):
        HardConcreteConfig(stretch_hi=0.9)


def test_init_starts_near_open():
    g = GateParams.init(1000, np.random.default_rng(0))
    assert abs(g.log_alpha.data.mean() - 2.0) < 0.01
    assert np.all(g.probs().data > 0.97)


def test_gate_params_reject_non_finite():
    with pytest.raises(ValueError):
        GateParams(ad.Tensor(np.array([0.0, np.nan])))


@settings(max_examples=60, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(1e-6, 1 - 1e-6))
def test_gates_are_monotone_and_in_range(a, b, u):
    lo, hi = min(a, b), max(a, b)
    for fn in (lambda x: sample_gate(x, u), prob_nonzero, deterministic_gate):
        zl, zh = fn(lo), fn(hi)
        assert 0.0 <= zl <= zh <= 1.0


def test_default_config_shift():
    assert DEFAULT_CONFIG.prob_shift == pytest.approx((2 / 3) * math.log(0.1 / 1.1))
