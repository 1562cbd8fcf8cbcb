"""Neural-net layers with explicit forward/backward passes, numpy only.

Tensors are channels-last: activations have shape (B, H, W, C). Every layer
caches what its backward needs during forward; one backward per forward.
Parameters and gradients are exposed as name -> array dicts so the optimizer
and the checkpoint writer can treat the whole network uniformly.

Backward derivations are the standard ones:
- conv as a sum of k*k shifted GEMMs: y = sum_{i,j} shift(x, i, j) @ w[i, j].
  The same shifted slices give dW (dW[i,j] = shift(x,i,j)^T @ dY) and dX is
  the correlation of the (zero-stuffed, for stride 2) output gradient with the
  spatially flipped kernel. Everything stays inside BLAS; slices are copied
  fresh in backward instead of cached to keep peak memory low.
- group norm: with xhat = (x - mu) * istd per group over (H, W, C_group),
  dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)).
- silu: d/dx [x * s(x)] = s(x) * (1 + x * (1 - s(x))).
"""

from __future__ import annotations

import numpy as np


def sigmoid(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


class Layer:
    """Base: parameterless layers override forward/backward only."""

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def grads(self) -> dict[str, np.ndarray]:
        return {}

    def zero_grads(self) -> None:
        for g in self.grads().values():
            g[...] = 0.0


class Conv2d(Layer):
    """k x k convolution, stride 1 or 2, 'same' padding for k=3 (pad 0 for k=1).

    Weight layout (k, k, c_in, c_out); init is fan-in-scaled uniform unless
    zero_init (used for the output head so the net starts predicting zero).
    """

    def __init__(self, c_in, c_out, k, *, stride=1, rng=None, dtype=np.float32,
                 zero_init=False):
        if k not in (1, 3):
            raise ValueError(f"unsupported kernel size {k}")
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, k, stride
        self.pad = (k - 1) // 2
        fan_in = k * k * c_in
        if zero_init:
            w = np.zeros((k, k, c_in, c_out))
        else:
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(k, k, c_in, c_out))
        self.w = np.ascontiguousarray(w, dtype=dtype)
        self.b = np.zeros(c_out, dtype=dtype)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._x = None

    def params(self):
        return {"w": self.w, "b": self.b}

    def grads(self):
        return {"w": self.dw, "b": self.db}

    @staticmethod
    def _shift_matmul(x: np.ndarray, w: np.ndarray, stride: int, pad: int,
                      bias=None) -> np.ndarray:
        """sum_{i,j} shift(x, i, j) @ w[i, j] with 'same'-style padding."""
        B, H, W, C = x.shape
        k = w.shape[0]
        c_out = w.shape[-1]
        if pad:
            x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        ho = (H + 2 * pad - k) // stride + 1
        wo = (W + 2 * pad - k) // stride + 1
        y = np.zeros((B * ho * wo, c_out), dtype=x.dtype)
        if bias is not None:
            y += bias
        for i in range(k):
            for j in range(k):
                sl = x[:, i:i + stride * (ho - 1) + 1:stride,
                       j:j + stride * (wo - 1) + 1:stride, :]
                sl = np.ascontiguousarray(sl).reshape(-1, C)
                y += sl @ w[i, j]
        return y.reshape(B, ho, wo, c_out)

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        if self.k == 1:
            return x @ self.w.reshape(self.c_in, self.c_out) + self.b
        return self._shift_matmul(x, self.w, self.stride, self.pad, bias=self.b)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._x
        B, H, W, C = x.shape
        k, s, p = self.k, self.stride, self.pad
        if k == 1:
            wmat = self.w.reshape(self.c_in, self.c_out)
            self.dw += (x.reshape(-1, C).T @ dy.reshape(-1, self.c_out)).reshape(self.w.shape)
            self.db += dy.sum(axis=(0, 1, 2))
            return dy @ wmat.T
        ho, wo = dy.shape[1], dy.shape[2]
        dym = dy.reshape(-1, self.c_out)
        self.db += dym.sum(axis=0)
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        for i in range(k):
            for j in range(k):
                sl = xp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :]
                sl = np.ascontiguousarray(sl).reshape(-1, C)
                self.dw[i, j] += sl.T @ dym
        # dX: stride-1 correlation of the (zero-stuffed) output gradient with
        # the spatially flipped, channel-transposed kernel.
        if s == 1:
            dy_full = dy
        else:
            dy_full = np.zeros((B, H + 2 * p - k + 1, W + 2 * p - k + 1, self.c_out),
                               dtype=dy.dtype)
            dy_full[:, ::s, ::s] = dy
        w_flip = np.ascontiguousarray(self.w[::-1, ::-1].transpose(0, 1, 3, 2))
        return self._shift_matmul(dy_full, w_flip, 1, k - 1 - p)


class GroupNorm(Layer):
    def __init__(self, c, groups, *, eps=1e-5, dtype=np.float32):
        if c % groups:
            raise ValueError(f"channels {c} not divisible by groups {groups}")
        self.c, self.groups, self.eps = c, groups, eps
        self.gamma = np.ones(c, dtype=dtype)
        self.beta = np.zeros(c, dtype=dtype)
        self.dgamma = np.zeros_like(self.gamma)
        self.dbeta = np.zeros_like(self.beta)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self.dgamma, "beta": self.dbeta}

    def forward(self, x: np.ndarray) -> np.ndarray:
        B, H, W, C = x.shape
        g = self.groups
        n = H * W * (C // g)
        xg = x.reshape(B, H * W, g, C // g)
        mu = np.einsum("bpgc->bg", xg) / n
        d = xg - mu[:, None, :, None]
        var = np.einsum("bpgc,bpgc->bg", d, d) / n
        istd = 1.0 / np.sqrt(var + self.eps)
        self._istd = istd
        self._xhat = d * istd[:, None, :, None]
        y = self._xhat.reshape(B, H, W, C) * self.gamma + self.beta
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        B, H, W, C = dy.shape
        g = self.groups
        n = H * W * (C // g)
        xhat = self._xhat  # (B, H*W, g, C//g)
        dyx = dy.reshape(B, H * W, g, C // g)
        self.dgamma += np.einsum("bpgc,bpgc->gc", dyx, xhat).reshape(C)
        self.dbeta += dy.sum(axis=(0, 1, 2))
        dxhat = dyx * self.gamma.reshape(g, C // g)
        m1 = np.einsum("bpgc->bg", dxhat) / n
        m2 = np.einsum("bpgc,bpgc->bg", dxhat, xhat) / n
        dx = self._istd[:, None, :, None] * (
            dxhat - m1[:, None, :, None] - xhat * m2[:, None, :, None])
        return dx.reshape(B, H, W, C)


class SiLU(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        self._s = sigmoid(x)
        return x * self._s

    def backward(self, dy: np.ndarray) -> np.ndarray:
        s = self._s
        return dy * (s * (1.0 + self._x * (1.0 - s)))


class Linear(Layer):
    def __init__(self, d_in, d_out, *, rng=None, dtype=np.float32, zero_init=False):
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            bound = 1.0 / np.sqrt(d_in)
            w = rng.uniform(-bound, bound, size=(d_in, d_out))
        self.w = np.ascontiguousarray(w, dtype=dtype)
        self.b = np.zeros(d_out, dtype=dtype)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)

    def params(self):
        return {"w": self.w, "b": self.b}

    def grads(self):
        return {"w": self.dw, "b": self.db}

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.w + self.b

    def backward(self, dy: np.ndarray) -> np.ndarray:
        self.dw += self._x.T @ dy
        self.db += dy.sum(axis=0)
        return dy @ self.w.T


class UpsampleNearest2x(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        B, H2, W2, C = dy.shape
        return dy.reshape(B, H2 // 2, 2, W2 // 2, 2, C).sum(axis=(2, 4))
