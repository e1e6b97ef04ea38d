"""Layers with hand-written backward passes, on ``(n, c, H, W)`` float64 arrays.

Each layer caches what its backward needs during ``forward``; call ``backward``
once per forward, in reverse order.
"""
from __future__ import annotations

import numpy as np

from .norm import NormPolicy, normalize_with_cache, normalize_backward


class Layer:
    def params(self) -> dict:
        return {}

    def grads(self) -> dict:
        return {}


class Conv2d(Layer):
    """Stride-1 'same' convolution with an odd square kernel."""

    def __init__(self, cin, cout, k=3, rng=None, bias=True):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = cin * k * k
        self.w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
        # a bias directly followed by normalization is cancelled by the mean subtraction
        self.b = np.zeros(cout)
        self.has_bias = bias
        self.k = k
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._cols_cache = None

    def params(self):
        return {"w": self.w, "b": self.b} if self.has_bias else {"w": self.w}

    def grads(self):
        return {"w": self.dw, "b": self.db} if self.has_bias else {"w": self.dw}

    def _cols(self, x):
        """im2col as ``(cin * k * k, n * H * W)``, rows ordered like ``w.reshape(cout, -1)``."""
        n, c, h, w = x.shape
        k, p = self.k, self.k // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols = np.empty((c, k, k, n, h, w))
        for u in range(k):
            for v in range(k):
                cols[:, u, v] = xp[:, :, u:u + h, v:v + w].transpose(1, 0, 2, 3)
        return cols.reshape(c * k * k, -1)

    def forward(self, x, train=False):
        n, _, h, w = x.shape
        cols = self._cols(x)
        y = self.w.reshape(len(self.w), -1) @ cols
        if train:
            self._cols_cache, self._shape = cols, x.shape
        y = y.reshape(-1, n, h, w).transpose(1, 0, 2, 3)
        return y + self.b[None, :, None, None] if self.has_bias else np.ascontiguousarray(y)

    def backward(self, dy):
        cols, self._cols_cache = self._cols_cache, None
        n, c, h, w = self._shape
        k, p = self.k, self.k // 2
        dy2 = dy.transpose(1, 0, 2, 3).reshape(len(self.w), -1)
        self.dw[...] = (dy2 @ cols.T).reshape(self.w.shape)
        self.db[...] = dy2.sum(axis=1)
        dcols = (self.w.reshape(len(self.w), -1).T @ dy2).reshape(c, k, k, n, h, w)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
        for u in range(k):
            for v in range(k):
                dxp[:, :, u:u + h, v:v + w] += dcols[:, u, v].transpose(1, 0, 2, 3)
        return dxp[:, :, p:p + h, p:p + w] if p else dxp


class ReLU(Layer):
    def forward(self, x, train=False):
        if train:
            self._pos = x > 0
        return np.maximum(x, 0.0)

    def backward(self, dy):
        return dy * self._pos


class Identity(Layer):
    def forward(self, x, train=False):
        return x

    def backward(self, dy):
        return dy


class Sigmoid(Layer):
    def forward(self, x, train=False):
        y = 0.5 * (1.0 + np.tanh(0.5 * x))  # overflow-free logistic
        if train:
            self._y = y
        return y

    def backward(self, dy):
        return dy * self._y * (1.0 - self._y)


class MaxPool2(Layer):
    def forward(self, x, train=False):
        n, c, h, w = x.shape
        blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        idx = blocks.argmax(axis=-1)
        if train:
            self._idx, self._shape = idx, x.shape
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        n, c, h, w = self._shape
        g = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(g, self._idx[..., None], dy[..., None], axis=-1)
        return g.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


class Upsample2(Layer):
    """Nearest-neighbour 2x upsampling."""

    def forward(self, x, train=False):
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, dy):
        n, c, h, w = dy.shape
        return dy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


class Norm(Layer):
    """Feature normalization layer around a :class:`NormPolicy`."""

    def __init__(self, policy: NormPolicy):
        self.policy = policy
        self._cache = None
        self.last_xhat = None
        self.capture = False

    def params(self):
        return {"gamma": self.policy.gamma, "beta": self.policy.beta}

    def grads(self):
        return {"gamma": self.policy.dgamma, "beta": self.policy.dbeta}

    def forward(self, x, train=False, combos=None, update_stats=True):
        phase = "train" if train else "infer"
        y, cache = normalize_with_cache(x, self.policy, phase, combos, update_stats=update_stats and train)
        if train:
            self._cache = cache
        if self.capture:
            self.last_xhat = cache.xhat
        return y

    def backward(self, dy):
        cache, self._cache = self._cache, None
        return normalize_backward(dy, self.policy, cache)
