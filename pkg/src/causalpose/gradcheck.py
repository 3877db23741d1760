"""Finite-difference checks for every autodiff op and for the full training loss."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import numerics as nm
from .graph import toy_skeleton
from .model import ModelConfig, Strategy, forward, init_params
from .objective import consistency_loss, encode_targets, keypoint_loss, total_loss

TOLERANCE = 1e-4

# Each builder returns (loss_fn, params) for a random point drawn from rng.
Case = Callable[[np.random.Generator], tuple[Callable, dict]]


def _weights(rng, shape):
    # a fixed random projection turns any output into a scalar with a generic gradient
    return rng.normal(size=shape)


def _unary(fn, shape=(3, 4)):
    def build(rng):
        a = rng.normal(size=shape)
        w = _weights(rng, fn(nm.Tensor(a)).shape)
        return (lambda P: nm.sum_(nm.mul(fn(P["a"]), w))), {"a": a}
    return build


def _binary(fn, sa=(3, 4), sb=(3, 4), out=(3, 4)):
    def build(rng):
        w = _weights(rng, out)
        return (lambda P: nm.sum_(nm.mul(fn(P["a"], P["b"]), w))), {"a": rng.normal(size=sa), "b": rng.normal(size=sb)}
    return build


def _kl(rng):
    q = rng.dirichlet(np.ones(5), size=3)
    return (lambda P: nm.sum_(nm.kl_div(q, nm.softmax(P["z"], axis=-1)))), {"z": rng.normal(size=(3, 5))}


def _take(rng):
    idx = np.array([[0, 2, 2], [1, 1, 3]])
    w = _weights(rng, (2, 2, 3))
    return (lambda P: nm.sum_(nm.mul(nm.take(P["a"], idx, axis=1), w))), {"a": rng.normal(size=(2, 4))}


def _take_along(rng):
    idx = rng.integers(0, 4, size=(3, 6))
    w = _weights(rng, (3, 6))
    return (lambda P: nm.sum_(nm.mul(nm.take_along(P["a"], idx, axis=1), w))), {"a": rng.normal(size=(3, 4))}


def _stop_gradient(rng):
    # finite differences see through sg, so only the other operand is checked
    # numerically; the gradient into the sg operand is checked to be exactly zero
    w = _weights(rng, (3, 4))
    a = nm.Tensor(rng.normal(size=(3, 4)), requires_grad=True)

    def loss(P):
        return nm.sum_(nm.mul(nm.mul(nm.stop_gradient(a), P["b"]), w))

    def blocked() -> float:
        a.grad = None
        nm.backward(loss({"b": nm.Tensor(np.ones((3, 4)), requires_grad=True)}))
        return 0.0 if a.grad is None else float(np.abs(a.grad).max())

    return loss, {"b": rng.normal(size=(3, 4))}, blocked


def model_case(K: int = 8, d: int = 16, bins: int = 16, batch: int = 3, lam: float = 0.1, n: int = 2) -> Case:
    """The full composite loss through the whole model at random init.

    The observational target is computed once at the check point and held
    fixed, which is exactly what the stop-gradient means: central differences
    of the raw loss would also move the target and measure a different
    derivative.
    """
    def build(rng):
        spec = toy_skeleton()
        if K != spec.K:
            raise ValueError("model gradcheck uses the 8-keypoint toy skeleton")
        cfg = ModelConfig(d_in=20, n_keypoints=K, hidden=16, d_emb=d, bins_x=bins, bins_y=bins)
        params = init_params(cfg, int(rng.integers(2**31)))
        for k in params:
            params[k] = params[k] + rng.normal(0, 0.1, size=params[k].shape)
        x = rng.normal(size=(batch, cfg.d_in))
        gt = encode_targets(rng.uniform(size=(batch, K, 2)), rng.random((batch, K)) < 0.8, 1.0, bins)
        strategy = Strategy("topn", n)
        base = forward({k: nm.Tensor(v) for k, v in params.items()}, x, spec, strategy, observational=True)
        target = base.pred_obs

        def loss(P):
            out = forward(P, x, spec, strategy)
            return total_loss(keypoint_loss(gt, out.pred), consistency_loss(target, out.pred, out.mask), lam)

        return loss, params
    return build


OPS: dict[str, Case] = {
    "add": _binary(nm.add, sb=(4,)),
    "sub": _binary(nm.sub, sa=(4,), out=(3, 4)),
    "mul": _binary(nm.mul),
    "scale": _unary(lambda a: nm.scale(a, -2.5)),
    "matmul": _binary(nm.matmul, sa=(2, 3, 4), sb=(4, 5), out=(2, 3, 5)),
    "sum": _unary(lambda a: nm.sum_(a, axis=0), shape=(3, 4)),
    "mean": _unary(lambda a: nm.mean(a, axis=1, keepdims=True)),
    "reshape": _unary(lambda a: nm.reshape(a, (2, 6))),
    "concat": _binary(lambda a, b: nm.concat([a, b], axis=1), sb=(3, 2), out=(3, 6)),
    "take": _take,
    "take_along": _take_along,
    "max_along": _unary(lambda a: nm.max_along(a, axis=1)),
    "relu": _unary(nm.relu),
    "sigmoid": _unary(nm.sigmoid),
    "softmax": _unary(lambda a: nm.softmax(a, axis=-1)),
    "kl_div": _kl,
    "stop_gradient": _stop_gradient,
    "model": model_case(),
}


def run(ops=None, seed: int = 0, step: float = 1e-5) -> dict[str, float]:
    """Max relative error per op name, each case seeded from (seed, op position)."""
    names = list(OPS) if ops is None else list(ops)
    unknown = [o for o in names if o not in OPS]
    if unknown:
        raise KeyError(f"unknown op(s): {unknown}")
    report = {}
    for name in names:
        rng = np.random.default_rng([seed, list(OPS).index(name)])
        loss, params, *extra = OPS[name](rng)
        err = nm.grad_check(loss, params, step=step)
        for check in extra:
            err = max(err, check())
        report[name] = err
    return report
