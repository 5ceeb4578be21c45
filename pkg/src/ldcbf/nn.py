"""Small rectified-linear multilayer perceptrons with hand-written backprop.

Parameters live in one flat float64 vector; the weight matrices are views
into it, so optimizers and soft target updates act on ``params`` directly.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np


class Mlp:
    """ReLU MLP ``sizes[0] -> ... -> sizes[-1]`` with a linear output layer.

    ``extra_in`` > 0 concatenates a second input (e.g. a control) to the
    activations entering layer ``inject_at`` (1 = the second layer).
    ``in_scale`` is a fixed multiplier on the first input (input normalization).
    """

    def __init__(
        self,
        sizes: Sequence[int],
        rng: Optional[np.random.Generator] = None,
        extra_in: int = 0,
        inject_at: int = 1,
        out_scale: float = 3e-3,
        in_scale=1.0,
    ):
        self.sizes = [int(s) for s in sizes]
        self.in_scale = np.asarray(in_scale, dtype=float)
        if len(self.sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.extra_in = int(extra_in)
        self.inject_at = int(inject_at)
        if self.extra_in and not 1 <= self.inject_at <= len(self.sizes) - 2:
            raise ValueError("inject_at out of range")
        shapes = []
        for i in range(len(self.sizes) - 1):
            fan_in = self.sizes[i] + (self.extra_in if (self.extra_in and i == self.inject_at) else 0)
            shapes.append((fan_in, self.sizes[i + 1]))
        self.shapes = shapes
        total = sum(a * b + b for a, b in shapes)
        self.params = np.zeros(total)
        self._bind()
        if rng is not None:
            self.init(rng, out_scale)

    def _bind(self):
        self.W, self.b = [], []
        off = 0
        for fan_in, fan_out in self.shapes:
            n = fan_in * fan_out
            self.W.append(self.params[off : off + n].reshape(fan_in, fan_out))
            off += n
            self.b.append(self.params[off : off + fan_out])
            off += fan_out

    def init(self, rng: np.random.Generator, out_scale: float = 3e-3):
        last = len(self.shapes) - 1
        for i, (fan_in, fan_out) in enumerate(self.shapes):
            lim = out_scale if i == last else 1.0 / np.sqrt(fan_in)
            self.W[i][...] = rng.uniform(-lim, lim, (fan_in, fan_out))
            self.b[i][...] = rng.uniform(-lim, lim, fan_out) if i == last else 0.0

    @property
    def n_params(self) -> int:
        return self.params.size

    def copy(self) -> "Mlp":
        other = Mlp.__new__(Mlp)
        other.sizes = list(self.sizes)
        other.extra_in = self.extra_in
        other.inject_at = self.inject_at
        other.in_scale = self.in_scale
        other.shapes = list(self.shapes)
        other.params = self.params.copy()
        other._bind()
        return other

    def set_params(self, flat):
        self.params[...] = flat

    # -- forward / backward ------------------------------------------------

    def forward(self, X, A=None, cache: bool = False):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        h = (X[None, :] if single else X) * self.in_scale
        if self.extra_in:
            A = np.asarray(A, dtype=float)
            A = A[None, :] if A.ndim == 1 else A
        acts = [h]
        pre = []
        last = len(self.shapes) - 1
        for i in range(len(self.shapes)):
            if self.extra_in and i == self.inject_at:
                h = np.concatenate([h, A], axis=1)
                acts[-1] = h
            z = h @ self.W[i] + self.b[i]
            pre.append(z)
            h = z if i == last else np.maximum(z, 0.0)
            acts.append(h)
        if cache:
            self._cache = (acts, pre)
        return h[0] if single else h

    def __call__(self, X, A=None):
        return self.forward(X, A)

    def backward(self, dout):
        """Backprop ``dout`` (N, out) through the last cached forward pass.

        Returns (param_grad, d_input, d_extra) summed over the batch.
        """
        acts, pre = self._cache
        dout = np.asarray(dout, dtype=float)
        if dout.ndim == 1:
            dout = dout.reshape(-1, self.sizes[-1])
        grads_W = [None] * len(self.shapes)
        grads_b = [None] * len(self.shapes)
        last = len(self.shapes) - 1
        delta = dout
        d_extra = None
        for i in range(last, -1, -1):
            if i != last:
                delta = delta * (pre[i] > 0)
            grads_W[i] = acts[i].T @ delta
            grads_b[i] = delta.sum(axis=0)
            dh = delta @ self.W[i].T
            if self.extra_in and i == self.inject_at:
                d_extra = dh[:, -self.extra_in :]
                dh = dh[:, : -self.extra_in]
            delta = dh
        delta = delta * self.in_scale
        flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in zip(grads_W, grads_b)])
        return flat, delta, d_extra

    def input_gradient(self, X, A=None):
        """d out / d X for a scalar-output network, shape like X."""
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        Xb = X[None, :] if single else X
        Ab = None
        if self.extra_in:
            A = np.asarray(A, dtype=float)
            Ab = A[None, :] if A.ndim == 1 else A
        self.forward(Xb, Ab, cache=True)
        _, dX, _ = self.backward(np.ones((Xb.shape[0], 1)))
        return dX[0] if single else dX


class Momentum:
    """Heavy-ball gradient descent on a flat parameter vector."""

    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.v = None

    def step(self, params: np.ndarray, grad: np.ndarray):
        if self.v is None:
            self.v = np.zeros_like(params)
        self.v *= self.momentum
        self.v -= self.lr * grad
        params += self.v


class Adam:
    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray):
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mh = self.m / (1 - self.b1**self.t)
        vh = self.v / (1 - self.b2**self.t)
        params -= self.lr * mh / (np.sqrt(vh) + self.eps)


def soft_update(target: np.ndarray, source: np.ndarray, mu: float):
    """target <- mu * source + (1 - mu) * target, in place."""
    target *= 1.0 - mu
    target += mu * source
