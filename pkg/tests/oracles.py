"""Scalar reference implementations used as test oracles.

Written with plain Python loops and ``math`` so that they share no code
path with the vectorised package functions.
"""
import math

import numpy as np

from cdp_authkit.nn import UNet, mse_loss


def weight(t, x):
    return 1.0 - abs(t - x)


def phi_scalar(w, kind, tau=None, g=5.0, binary=False):
    w = min(max(w, 0.0), 1.0)
    if kind == "identity":
        return w
    if kind == "exponential":
        return (math.exp(g * w) - 1.0) / (math.exp(g) - 1.0)
    if w >= tau:
        return 1.0 if binary else w
    return 0.0


def confidence_loop(t, x, **kw):
    h, w = len(t), len(t[0])
    return [[phi_scalar(weight(t[i][j], x[i][j]), **kw) for j in range(w)] for i in range(h)]


def anomaly_loop(x, y, c):
    return [[c[i][j] * (x[i][j] - y[i][j]) ** 2 for j in range(len(x[0]))] for i in range(len(x))]


def score_loop(a, agg):
    flat = [v for row in a for v in row]
    if agg in ("sum", "l1_norm"):
        return math.fsum(abs(v) for v in flat) if agg == "l1_norm" else math.fsum(flat)
    if agg == "l2_norm":
        return math.sqrt(math.fsum(v * v for v in flat))
    if agg == "mean":
        return math.fsum(flat) / len(flat)
    raise ValueError(agg)


def auc_pairs(pos, neg):
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def grad_check(n_params=120, seed=0):
    """Central differences on a depth-1 float64 model; returns max relative error."""
    rng = np.random.default_rng(seed)
    net = UNet(depth=1, base_channels=4, seed=seed, dtype=np.float64)
    net.params["head.w"] = rng.normal(0, 0.3, net.params["head.w"].shape)
    x = rng.standard_normal((2, 8, 8, 1))
    y = rng.random((2, 8, 8, 1))

    def loss():
        return mse_loss(net.forward(x)[0], y)[0]

    out, cache = net.forward(x)
    grads = net.backward(cache, mse_loss(out, y)[1])
    flat = [(k, i) for k in sorted(net.params) for i in range(net.params[k].size)]
    pick = rng.choice(len(flat), size=min(n_params, len(flat)), replace=False)
    worst, h = 0.0, 1e-5
    for j in pick:
        k, i = flat[j]
        p = net.params[k].reshape(-1)
        old = p[i]
        p[i] = old + h
        lp = loss()
        p[i] = old - h
        lm = loss()
        p[i] = old
        num = (lp - lm) / (2 * h)
        ana = grads[k].reshape(-1)[i]
        denom = max(abs(num), abs(ana), 1e-8)
        worst = max(worst, abs(num - ana) / denom)
    return worst, len(pick)
