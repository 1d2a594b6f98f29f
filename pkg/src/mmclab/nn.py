"""Dense float64 MLP feature extractor with hand-written backprop.

Arrays are plain ``numpy.ndarray`` in float64; a batch is ``(n, features)``.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

CHECKPOINT_FORMAT = "mmclab.mlp"
CHECKPOINT_VERSION = 1


def relu(x):
    return np.maximum(x, 0.0)


class MLP:
    """Affine layers with ReLU between them; the last layer is linear.

    ``sizes = [p, h1, ..., d]`` maps inputs in ``R^p`` to features in ``R^d``.
    Weights are stored ``(fan_in, fan_out)`` and initialised uniformly in
    ``+-1/sqrt(fan_in)`` from a seeded generator.
    """

    def __init__(self, sizes: Sequence[int], seed: int = 0):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"bad layer sizes {sizes}")
        self.sizes = sizes
        rng = np.random.default_rng(seed)
        self.params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))
        self.grads = [np.zeros_like(w) for w in self.params]
        self._cache = None

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def feature_dim(self) -> int:
        return self.sizes[-1]

    @property
    def num_layers(self) -> int:
        return len(self.sizes) - 1

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"expected input of shape (n, {self.input_dim}), got {x.shape}")
        return x

    def _forward(self, x):
        acts = [x]
        pre = []
        h = x
        for k in range(self.num_layers):
            W, b = self.params[2 * k], self.params[2 * k + 1]
            a = h @ W + b
            pre.append(a)
            h = relu(a) if k < self.num_layers - 1 else a
            acts.append(h)
        return h, (acts, pre)

    def _backward(self, cache, upstream, want_params=True):
        acts, pre = cache
        g = np.asarray(upstream, dtype=np.float64)
        if g.shape != acts[-1].shape:
            raise ValueError(f"upstream shape {g.shape} != feature shape {acts[-1].shape}")
        grads = [None] * len(self.params) if want_params else None
        for k in reversed(range(self.num_layers)):
            if k < self.num_layers - 1:
                g = g * (pre[k] > 0)
            W = self.params[2 * k]
            if want_params:
                grads[2 * k] = acts[k].T @ g
                grads[2 * k + 1] = g.sum(axis=0)
            g = g @ W.T
        return g, grads

    def forward(self, x):
        """Features for a batch; keeps activations for :meth:`backward`."""
        z, self._cache = self._forward(self._check_input(x))
        return z

    def backward(self, upstream):
        """Backprop ``upstream = dLoss/dz`` through the last forward pass.

        Overwrites ``self.grads`` and returns ``dLoss/dx``.
        """
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        dx, grads = self._backward(self._cache, upstream)
        for dst, src in zip(self.grads, grads):
            dst[...] = src
        return dx

    # Stateless variants: safe on a frozen model from several threads.
    def features(self, x):
        return self._forward(self._check_input(x))[0]

    def input_vjp(self, x, upstream_fn: Callable):
        """Return ``(z, aux, dx)`` where ``upstream_fn(z) -> (aux, dL/dz)``."""
        z, cache = self._forward(self._check_input(x))
        aux, up = upstream_fn(z)
        dx, _ = self._backward(cache, up, want_params=False)
        return z, aux, dx

    def zero_grad(self):
        for g in self.grads:
            g[...] = 0.0

    def copy(self) -> "MLP":
        other = MLP.__new__(MLP)
        other.sizes = list(self.sizes)
        other.params = [w.copy() for w in self.params]
        other.grads = [np.zeros_like(w) for w in self.params]
        other._cache = None
        return other

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "p": self.input_dim,
            "d": self.feature_dim,
            "sizes": self.sizes,
            "params": [w.ravel().tolist() for w in self.params],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MLP":
        if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} checkpoint")
        m = cls(doc["sizes"])
        if (m.input_dim, m.feature_dim) != (doc["p"], doc["d"]):
            raise ValueError("header p/d disagree with layer sizes")
        if len(doc["params"]) != len(m.params):
            raise ValueError("wrong number of parameter arrays")
        for w, flat in zip(m.params, doc["params"]):
            arr = np.asarray(flat, dtype=np.float64)
            if arr.size != w.size:
                raise ValueError(f"parameter of size {arr.size}, expected {w.size}")
            w[...] = arr.reshape(w.shape)
        return m

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "MLP":
        return cls.from_dict(json.loads(Path(path).read_text()))


class Adam:
    """Adaptive-moment optimizer over a list of arrays, updated in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def gradient_check(f: Callable, x, h: float = 1e-5, probes: Optional[int] = None,
                   rng=None) -> float:
    """Compare the analytic gradient of ``f`` with central differences.

    ``f(x)`` returns ``(value, grad)``. Checks every coordinate, or ``probes``
    random ones. Returns ``max |analytic - numeric| / max(1, |analytic|)``.
    """
    x = np.array(x, dtype=np.float64)
    value, grad = f(x)
    if not np.isfinite(value):
        raise ValueError(f"f(x) is not finite: {value}")
    grad = np.asarray(grad, dtype=np.float64).reshape(x.shape)
    flat_idx = np.arange(x.size)
    if probes is not None and probes < x.size:
        rng = np.random.default_rng(rng)
        flat_idx = rng.choice(x.size, size=probes, replace=False)
    worst = 0.0
    for k in flat_idx:
        idx = np.unravel_index(k, x.shape)
        old = x[idx]
        x[idx] = old + h
        fp = f(x)[0]
        x[idx] = old - h
        fm = f(x)[0]
        x[idx] = old
        numeric = (fp - fm) / (2 * h)
        a = grad[idx]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return float(worst)
