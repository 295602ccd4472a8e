"""Random instances of every differentiable op, for finite-difference checks.

Each case maps an rng to ``(fn, arrays)`` where ``fn`` takes Tensors and
returns a scalar. Outputs are contracted with a fixed random tensor so every
output element contributes to the checked gradient. Inputs are kept away
from kinks (relu at 0, clamp bounds) where the derivative is undefined.
"""

from __future__ import annotations

import numpy as np

from transferprune import autodiff as ad
from transferprune.coupling import CoupledGateParams, CouplingStrategy, delta_regularizer
from transferprune.gates import sample_gate, prob_nonzero
from transferprune.model import GateSet, ModelConfig
from transferprune.sparsity import SparsityTarget, expected_sparsity, lagrangian_penalty


def _shape(rng, max_dims=2, max_size=4):
    return tuple(int(s) for s in rng.integers(1, max_size + 1, size=rng.integers(1, max_dims + 1)))


def _away_from(x, points, margin=0.05):
    for p in points:
        near = np.abs(x - p) < margin
        x = np.where(near, p + margin * np.sign(x - p + 1e-12) * 2, x)
    return x


def _unary(op, transform=lambda x: x):
    def case(rng):
        x = transform(rng.normal(size=_shape(rng)))
        w = rng.normal(size=x.shape)
        return (lambda a: ad.sum(op(a) * w)), [x]
    return case


def _binary(op, positive_b=False):
    def case(rng):
        shape = _shape(rng)
        # broadcast the second operand over a leading axis half of the time
        b_shape = shape[1:] if len(shape) > 1 and rng.random() < 0.5 else shape
        a = rng.normal(size=shape)
        b = rng.normal(size=b_shape)
        if positive_b:
            b = np.abs(b) + 0.5
        w = rng.normal(size=shape)
        return (lambda x, y: ad.sum(op(x, y) * w)), [a, b]
    return case


def _matmul(rng):
    m, k, n = (int(v) for v in rng.integers(1, 5, size=3))
    if rng.random() < 0.5:
        a = rng.normal(size=(int(rng.integers(1, 3)), m, k))
    else:
        a = rng.normal(size=(m, k))
    b = rng.normal(size=(k, n))
    w = rng.normal(size=np.matmul(a, b).shape)
    return (lambda x, y: ad.sum(ad.matmul(x, y) * w)), [a, b]


def _reduce(op):
    def case(rng):
        x = rng.normal(size=_shape(rng, 3))
        axis = None if rng.random() < 0.3 else int(rng.integers(0, x.ndim))
        keep = bool(rng.random() < 0.5)
        out_shape = np.sum(x, axis=axis, keepdims=keep).shape
        w = rng.normal(size=out_shape)
        return (lambda a: ad.sum(op(a, axis=axis, keepdims=keep) * w)), [x]
    return case


def _prod(rng):
    x = rng.normal(size=_shape(rng, 2, 5))
    if rng.random() < 0.3:
        x.reshape(-1)[0] = 0.0  # exact zeros need the exclusive-product gradient
    axis = int(rng.integers(0, x.ndim))
    w = rng.normal(size=np.prod(x, axis=axis).shape)
    return (lambda a: ad.sum(ad.prod(a, axis=axis) * w)), [x]


def _power(rng):
    x = np.abs(rng.normal(size=_shape(rng))) + 0.3
    p = float(rng.choice([2.0, 3.0, 0.5, -1.0, 1.7]))
    w = rng.normal(size=x.shape)
    return (lambda a: ad.sum(ad.power(a, p) * w)), [x]


def _reshape(rng):
    x = rng.normal(size=(2, 3, int(rng.integers(1, 4))))
    w = rng.normal(size=(6, x.shape[2]))
    return (lambda a: ad.sum(ad.reshape(a, (6, -1)) * w)), [x]


def _transpose(rng):
    x = rng.normal(size=(2, 3, 4))
    axes = tuple(int(v) for v in rng.permutation(3))
    w = rng.normal(size=np.transpose(x, axes).shape)
    return (lambda a: ad.sum(ad.transpose(a, axes) * w)), [x]


def _getitem(rng):
    x = rng.normal(size=(4, 5))
    choice = int(rng.integers(0, 3))
    if choice == 0:
        idx = (slice(1, 3), slice(None, None, 2))
    elif choice == 1:
        idx = rng.integers(0, 4, size=6)  # repeated rows accumulate
    else:
        idx = (rng.integers(0, 4, size=3), rng.integers(0, 5, size=3))
    w = rng.normal(size=x[idx].shape)
    return (lambda a: ad.sum(ad.getitem(a, idx) * w)), [x]


def _concat(rng):
    axis = int(rng.integers(0, 2))
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(1, 3) if axis == 0 else (2, 2))
    w = rng.normal(size=np.concatenate([a, b], axis=axis).shape)
    return (lambda x, y: ad.sum(ad.concat([x, y], axis=axis) * w)), [a, b]


def _clamp(rng):
    lo, hi = -0.5, 0.7
    x = _away_from(rng.normal(size=_shape(rng)), (lo, hi))
    w = rng.normal(size=x.shape)
    return (lambda a: ad.sum(ad.clamp(a, lo, hi) * w)), [x]


def _softmax(rng):
    x = rng.normal(size=_shape(rng, 3))
    axis = int(rng.integers(-1, x.ndim)) if x.ndim > 1 else -1
    w = rng.normal(size=x.shape)
    return (lambda a: ad.sum(ad.softmax(a, axis=axis) * w)), [x]


def _layernorm(rng):
    d = int(rng.integers(3, 7))  # at width 2 the normalized output is constant
    x = rng.normal(size=(int(rng.integers(1, 4)), d))
    g = rng.normal(size=d)
    b = rng.normal(size=d)
    w = rng.normal(size=x.shape)
    return (lambda a, gg, bb: ad.sum(ad.layernorm(a, gg, bb) * w)), [x, g, b]


def _embedding(rng):
    table = rng.normal(size=(6, 3))
    ids = rng.integers(0, 6, size=(2, 4))
    w = rng.normal(size=(2, 4, 3))
    return (lambda t: ad.sum(ad.embedding(t, ids) * w)), [table]


def _cross_entropy(rng):
    b, c = int(rng.integers(1, 5)), int(rng.integers(2, 5))
    logits = rng.normal(size=(b, c)) * 2
    labels = rng.integers(0, c, size=b)
    return (lambda z: ad.cross_entropy(z, labels)), [logits]


def _mse(rng):
    n = int(rng.integers(1, 6))
    target = rng.normal(size=n)
    return (lambda p: ad.mse(p, target)), [rng.normal(size=n)]


def _sample_gate(rng):
    la = rng.normal(size=6) * 2
    u = rng.uniform(0.05, 0.95, size=6)
    # keep the stretched value away from the 0 and 1 clamps
    raw = 1.2 / (1 + np.exp(-(np.log(u) - np.log(1 - u) + la) / (2 / 3))) - 0.1
    la = np.where((raw < 0.02) | (raw > 0.98), 0.0, la)
    u = np.where((raw < 0.02) | (raw > 0.98), 0.5, u)
    w = rng.normal(size=6)
    return (lambda a: ad.sum(sample_gate(a, u) * w)), [la]


def _prob_nonzero(rng):
    la = rng.normal(size=5) * 2
    w = rng.normal(size=5)
    return (lambda a: ad.sum(prob_nonzero(a) * w)), [la]


TINY = ModelConfig(num_layers=2, hidden_dim=4, num_heads=2, ffn_dim=3, vocab_size=10, max_seq_len=4)


def _expected_sparsity(rng):
    probs = rng.uniform(0.05, 0.95, size=TINY.num_gates)
    return (lambda p: expected_sparsity(GateSet.from_flat(p, TINY), TINY)), [probs]


def _lagrangian(rng):
    target = SparsityTarget(float(rng.uniform(0, 0.99)), lambda1=float(rng.normal()),
                            lambda2=float(abs(rng.normal())))
    probs = rng.uniform(0.05, 0.95, size=TINY.num_gates)
    return (lambda p: lagrangian_penalty(expected_sparsity(GateSet.from_flat(p, TINY), TINY), target)), [probs]


def _delta_reg(rng):
    n = int(rng.integers(1, 8))
    weight = float(rng.uniform(0.01, 10))
    coupled = CoupledGateParams.init(CouplingStrategy("delta", weight), n, rng)

    def fn(dt, da):
        coupled.delta_T, coupled.delta_A = dt, da
        return delta_regularizer(coupled)

    return fn, [rng.normal(size=n), rng.normal(size=n)]


CASES = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "div": _binary(ad.div, positive_b=True),
    "neg": _unary(ad.neg),
    "power": _power,
    "matmul": _matmul,
    "sum": _reduce(ad.sum),
    "mean": _reduce(ad.mean),
    "prod": _prod,
    "reshape": _reshape,
    "transpose": _transpose,
    "getitem": _getitem,
    "concat": _concat,
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, lambda x: np.abs(x) + 0.2),
    "sigmoid": _unary(ad.sigmoid, lambda x: 3 * x),
    "tanh": _unary(ad.tanh),
    "relu": _unary(ad.relu, lambda x: _away_from(x, (0.0,))),
    "gelu": _unary(ad.gelu, lambda x: 2 * x),
    "clamp": _clamp,
    "softmax": _softmax,
    "layernorm": _layernorm,
    "embedding": _embedding,
    "cross_entropy": _cross_entropy,
    "mse": _mse,
    "sample_gate": _sample_gate,
    "prob_nonzero": _prob_nonzero,
    "expected_sparsity": _expected_sparsity,
    "lagrangian_penalty": _lagrangian,
    "delta_regularizer": _delta_reg,
}
