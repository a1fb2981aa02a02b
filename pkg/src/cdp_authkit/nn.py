"""Shallow U-Net in numpy with hand-written backprop and Adam.

Layout is NHWC throughout. Stages: ``depth`` encoder convs (each followed by
2x average pooling), one bottleneck conv, ``depth`` decoder convs fed by a
nearest-neighbour upsample concatenated with the matching encoder output,
and a 1x1 head with a sigmoid. All convs are 3x3, zero padded, ReLU.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .core import rng_for


def _pad1(x):
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))


def conv3x3_forward(x, w, b):
    n, h, wd, c = x.shape
    cols = kernels.im2col3x3(np.ascontiguousarray(_pad1(x)))
    out = cols.reshape(-1, 9 * c) @ w + b
    return out.reshape(n, h, wd, -1), cols


def conv3x3_backward(dout, cols, w, need_dx=True):
    n, h, wd, k = dout.shape
    c = w.shape[0] // 9
    d2 = dout.reshape(-1, k)
    dw = cols.reshape(-1, 9 * c).T @ d2
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.T).reshape(n, h, wd, 9 * c)
    dxp = kernels.col2im3x3(np.ascontiguousarray(dcols), c)
    return dxp[:, 1:-1, 1:-1, :], dw, db


def avgpool2(x):
    n, h, w, c = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def avgpool2_backward(dout):
    return np.repeat(np.repeat(dout, 2, axis=1), 2, axis=2) * 0.25


def upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def upsample2_backward(dout):
    n, h, w, c = dout.shape
    return dout.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class UNet:
    """Parameters live in ``self.params`` (name -> array)."""

    def __init__(self, depth: int = 2, base_channels: int = 16, seed: int = 0, dtype=np.float32, params=None):
        self.depth = depth
        self.base = base_channels
        self.dtype = np.dtype(dtype)
        self.params = params if params is not None else self._init(seed)

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        c, d = self.base, self.depth
        shapes = {}
        cin = 1
        for k in range(d):
            shapes[f"enc{k}"] = (cin, c * 2 ** k)
            cin = c * 2 ** k
        shapes["mid"] = (cin, c * 2 ** d)
        for k in reversed(range(d)):
            shapes[f"dec{k}"] = (c * 2 ** (k + 1) + c * 2 ** k, c * 2 ** k)
        return shapes

    def _init(self, seed):
        rng = rng_for("unet-init", seed)
        params = {}
        for name, (cin, cout) in self.layer_shapes().items():
            fan_in = 9 * cin
            params[f"{name}.w"] = (rng.standard_normal((fan_in, cout)) * np.sqrt(2.0 / fan_in)).astype(self.dtype)
            params[f"{name}.b"] = np.zeros(cout, dtype=self.dtype)
        # zero head: the first Adam steps cannot saturate the sigmoid
        params["head.w"] = np.zeros((self.base, 1), dtype=self.dtype)
        params["head.b"] = np.zeros(1, dtype=self.dtype)
        return params

    def set_output_prior(self, mean: float) -> None:
        """Start the sigmoid at the mean target intensity."""
        m = float(np.clip(mean, 1e-3, 1 - 1e-3))
        self.params["head.b"][:] = np.log(m / (1.0 - m))

    @property
    def multiple(self) -> int:
        return 2 ** self.depth

    @staticmethod
    def _act(z):
        return np.maximum(z, 0)

    @staticmethod
    def _dact(z):
        return z > 0

    # -------------------------------------------------------------- forward

    def forward(self, x):
        """x: (N, H, W, 1) network input. Returns (output in [0,1], cache)."""
        p = self.params
        cache = {}
        skips = []
        h = x
        for k in range(self.depth):
            z, cols = conv3x3_forward(h, p[f"enc{k}.w"], p[f"enc{k}.b"])
            a = self._act(z)
            cache[f"enc{k}"] = (cols, self._dact(z))
            skips.append(a)
            h = avgpool2(a)
        z, cols = conv3x3_forward(h, p["mid.w"], p["mid.b"])
        h = self._act(z)
        cache["mid"] = (cols, self._dact(z))
        for k in reversed(range(self.depth)):
            cat = np.concatenate([upsample2(h), skips[k]], axis=-1)
            z, cols = conv3x3_forward(cat, p[f"dec{k}.w"], p[f"dec{k}.b"])
            h = self._act(z)
            cache[f"dec{k}"] = (cols, self._dact(z))
        cache["head_in"] = h
        logits = h @ p["head.w"] + p["head.b"]
        out = sigmoid(logits)
        cache["out"] = out
        return out, cache

    def predict(self, x):
        return self.forward(x)[0]

    # ------------------------------------------------------------- backward

    def backward(self, cache, dout):
        """dout: dL/d(output). Returns grads keyed like ``params``."""
        p = self.params
        g = {}
        out = cache["out"]
        dlog = dout * out * (1.0 - out)
        h = cache["head_in"]
        c_last = h.shape[-1]
        g["head.w"] = h.reshape(-1, c_last).T @ dlog.reshape(-1, 1)
        g["head.b"] = dlog.reshape(-1, 1).sum(axis=0)
        dh = dlog @ p["head.w"].T

        dskips = [None] * self.depth
        for k in range(self.depth):
            cols, mask = cache[f"dec{k}"]
            dz = dh * mask
            dcat, g[f"dec{k}.w"], g[f"dec{k}.b"] = conv3x3_backward(dz, cols, p[f"dec{k}.w"])
            c_up = self.base * 2 ** (k + 1)
            dskips[k] = dcat[..., c_up:]
            dh = upsample2_backward(dcat[..., :c_up])
        cols, mask = cache["mid"]
        dz = dh * mask
        dh, g["mid.w"], g["mid.b"] = conv3x3_backward(dz, cols, p["mid.w"])
        for k in reversed(range(self.depth)):
            da = avgpool2_backward(dh) + dskips[k]
            cols, mask = cache[f"enc{k}"]
            dz = da * mask
            dh, g[f"enc{k}.w"], g[f"enc{k}.b"] = conv3x3_backward(dz, cols, p[f"enc{k}.w"], need_dx=k > 0)
        return g


def mse_loss(pred, target):
    diff = pred - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    return loss, (2.0 / diff.size) * diff


class Adam:
    def __init__(self, params: dict, lr: float = 1e-2, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for k, w in params.items():
            gk = grads[k].astype(w.dtype, copy=False)
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * gk
            v *= b2
            v += (1.0 - b2) * gk * gk
            w -= (self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)).astype(w.dtype, copy=False)
