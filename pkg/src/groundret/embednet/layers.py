"""NHWC layers with explicit forward/backward passes.

Every layer keeps what it needs for the backward pass in ``self.cache``
during ``forward`` and accumulates parameter gradients into ``self.grads``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.cache = None

    def out_shape(self, in_shape):
        return in_shape

    def describe(self):
        return {"type": self.kind}

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


class Conv2D(Layer):
    """3x3 (or k x k) same-padding convolution, stride 1."""

    kind = "conv"

    def __init__(self, in_ch, out_ch, ksize=3, rng=None, dtype=np.float32):
        super().__init__()
        self.in_ch, self.out_ch, self.ksize = in_ch, out_ch, ksize
        fan_in = in_ch * ksize * ksize
        bound = np.sqrt(6.0 / fan_in)
        rng = rng or np.random.default_rng(0)
        self.params["W"] = rng.uniform(-bound, bound, (ksize, ksize, in_ch, out_ch)).astype(dtype)
        self.params["b"] = np.zeros(out_ch, dtype=dtype)
        self.zero_grad()

    def out_shape(self, in_shape):
        h, w, _ = in_shape
        return (h, w, self.out_ch)

    def describe(self):
        return {"type": self.kind, "in": self.in_ch, "out": self.out_ch, "ksize": self.ksize}

    def _im2col(self, x):
        p = self.ksize // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        win = sliding_window_view(xp, (self.ksize, self.ksize), axis=(1, 2))
        # win: (N, H, W, C, kh, kw) -> rows ordered (kh, kw, C) to match W
        n, h, w = x.shape[:3]
        return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, -1)

    def forward(self, x):
        n, h, w, _ = x.shape
        cols = self._im2col(x)
        wmat = self.params["W"].reshape(-1, self.out_ch)
        self.cache = (x.shape, cols)
        return (cols @ wmat + self.params["b"]).reshape(n, h, w, self.out_ch)

    def backward(self, dout):
        shape, cols = self.cache
        n, h, w, c = shape
        k, p = self.ksize, self.ksize // 2
        d2 = dout.reshape(-1, self.out_ch)
        self.grads["W"] += (cols.T @ d2).reshape(self.params["W"].shape)
        self.grads["b"] += d2.sum(axis=0)
        dcols = (d2 @ self.params["W"].reshape(-1, self.out_ch).T).reshape(n, h, w, k, k, c)
        dxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
        self.cache = None
        return dxp[:, p:p + h, p:p + w, :]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        self.cache = mask
        return x * mask

    def backward(self, dout):
        return dout * self.cache


class _Pool2(Layer):
    def out_shape(self, in_shape):
        h, w, c = in_shape
        return (h // 2, w // 2, c)

    @staticmethod
    def _blocks(x):
        n, h, w, c = x.shape
        x = x[:, : h // 2 * 2, : w // 2 * 2, :]
        return x.reshape(n, h // 2, 2, w // 2, 2, c)


class MaxPool2(_Pool2):
    kind = "maxpool"

    def forward(self, x):
        b = self._blocks(x)
        n, h2, _, w2, _, c = b.shape
        flat = b.transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
        arg = flat.argmax(axis=-1)
        self.cache = (x.shape, arg)
        return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        shape, arg = self.cache
        n, h, w, c = shape
        h2, w2 = h // 2, w // 2
        flat = np.zeros((n, h2, w2, c, 4), dtype=dout.dtype)
        np.put_along_axis(flat, arg[..., None], dout[..., None], axis=-1)
        blocks = flat.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        dx = np.zeros(shape, dtype=dout.dtype)
        dx[:, : h2 * 2, : w2 * 2, :] = blocks.reshape(n, h2 * 2, w2 * 2, c)
        return dx


class AvgPool2(_Pool2):
    kind = "avgpool"

    def forward(self, x):
        self.cache = x.shape
        return self._blocks(x).mean(axis=(2, 4))

    def backward(self, dout):
        n, h, w, c = self.cache
        h2, w2 = h // 2, w // 2
        up = np.repeat(np.repeat(dout, 2, axis=1), 2, axis=2) * 0.25
        dx = np.zeros(self.cache, dtype=dout.dtype)
        dx[:, : h2 * 2, : w2 * 2, :] = up
        return dx


class GlobalAvgPool(Layer):
    kind = "gap"

    def out_shape(self, in_shape):
        return (in_shape[2],)

    def forward(self, x):
        self.cache = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, dout):
        n, h, w, c = self.cache
        return np.broadcast_to(dout[:, None, None, :] / (h * w), self.cache).copy()


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_dim, out_dim, rng=None, dtype=np.float32, gain=1.0):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        bound = gain * np.sqrt(6.0 / in_dim)
        rng = rng or np.random.default_rng(0)
        self.params["W"] = rng.uniform(-bound, bound, (in_dim, out_dim)).astype(dtype)
        self.params["b"] = np.zeros(out_dim, dtype=dtype)
        self.zero_grad()

    def out_shape(self, in_shape):
        return (self.out_dim,)

    def describe(self):
        return {"type": self.kind, "in": self.in_dim, "out": self.out_dim}

    def forward(self, x):
        self.cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dout):
        x = self.cache
        self.grads["W"] += x.T @ dout
        self.grads["b"] += dout.sum(axis=0)
        self.cache = None
        return dout @ self.params["W"].T
