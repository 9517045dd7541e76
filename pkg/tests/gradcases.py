"""Random small inputs for every differentiable op, shared by the gradient suites."""

import numpy as np

from synthrad import autodiff as ad


def _away_from_zero(x, margin=0.05):
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _bce_target(shape, rng):
    return rng.uniform(0, 1, size=shape)


def case_inputs(name: str, rng: np.random.Generator):
    """Return (fn, arrays) for one random case of op ``name``."""
    n = lambda *s: rng.standard_normal(s)
    if name == "matmul":
        m, k, p = rng.integers(1, 5, size=3)
        return ad.matmul, [n(m, k), n(k, p)]
    if name == "conv2d":
        c, o = rng.integers(1, 4, size=2)
        k = int(rng.choice([1, 3]))
        return (lambda x, w, b: ad.conv2d(x, w, b)), [n(2, c, 4, 5), n(o, c, k, k), n(o)]
    if name == "conv2d_valid":
        return (lambda x, w: ad.conv2d(x, w, pad=0)), [n(1, 2, 5, 4), n(3, 2, 3, 3)]
    if name == "upsample2x":
        return ad.upsample2x, [n(2, 2, 3, 3)]
    if name == "avgpool2":
        return ad.avgpool2, [n(2, 2, 4, 6)]
    if name == "add":
        return ad.add, [n(3, 4), n(3, 4)]
    if name == "sub":
        return ad.sub, [n(3, 4), n(3, 4)]
    if name == "mul":
        return ad.mul, [n(2, 3, 2), n(2, 3, 2)]
    if name == "scale":
        c = float(rng.normal())
        return (lambda x: ad.scale(x, c)), [n(5)]
    if name == "concat":
        return (lambda a, b: ad.concat([a, b])), [n(2, 1, 3, 3), n(2, 3, 3, 3)]
    if name == "leaky_relu":
        return ad.leaky_relu, [_away_from_zero(n(4, 5))]
    if name == "silu":
        return ad.silu, [n(4, 5) * 2]
    if name == "sigmoid":
        return ad.sigmoid, [n(4, 5) * 2]
    if name == "tanh":
        return ad.tanh, [n(4, 5)]
    if name == "clip":
        x = rng.uniform(-2, 2, size=(4, 5))
        x = np.where(np.abs(np.abs(x) - 1) < 0.05, x * 0.9, x)
        return (lambda t: ad.clip(t, -1.0, 1.0)), [x]
    if name == "group_norm":
        g = int(rng.choice([1, 2]))
        return (lambda x, ga, be: ad.group_norm(x, ga, be, g)), [n(2, 4, 3, 3), n(4), n(4)]
    if name == "embedding":
        idx = rng.integers(0, 5, size=7)
        return (lambda t: ad.embedding(t, idx)), [n(5, 3)]
    if name == "add_bias":
        return ad.add_bias, [n(2, 3, 2, 2), n(3)]
    if name == "add_channels":
        return ad.add_channels, [n(2, 3, 2, 2), n(2, 3)]
    if name == "reshape":
        return (lambda x: ad.reshape(x, (6, 2))), [n(3, 4)]
    if name == "sum":
        return ad.sum_all, [n(3, 4)]
    if name == "mean":
        return ad.mean_all, [n(3, 4)]
    if name == "mse":
        return ad.mse, [n(2, 1, 4, 4), n(2, 1, 4, 4)]
    if name == "bce":
        y = _bce_target((6,), rng)
        return (lambda p: ad.bce(p, y)), [rng.uniform(0.1, 0.9, size=6)]
    if name == "cross_entropy":
        lab = rng.integers(0, 4, size=5)
        return (lambda z: ad.cross_entropy(z, lab)), [n(5, 4)]
    raise KeyError(name)


OP_NAMES = [
    "matmul", "conv2d", "conv2d_valid", "upsample2x", "avgpool2", "add", "sub", "mul",
    "scale", "concat", "leaky_relu", "silu", "sigmoid", "tanh", "clip", "group_norm",
    "embedding", "add_bias", "add_channels", "reshape", "sum", "mean", "mse", "bce",
    "cross_entropy",
]
