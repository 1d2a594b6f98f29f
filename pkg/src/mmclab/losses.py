"""Training losses on top of a feature vector ``z``.

Every loss works on a single example (``z`` of shape ``(d,)``, scalar ``y``)
or a batch (``(n, d)`` and ``(n,)``) and returns per-example values together
with the gradient of each example's loss with respect to its own inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .geometry import CenterSet, generate_mm_centers

KINDS = ("SCE", "GSCE", "LGM", "MMLDA", "CENTER", "MMC", "EMC")
CENTER_KINDS = ("MMLDA", "MMC", "EMC")

# keys a LossSpec may carry, per kind
_SPEC_KEYS = {
    "SCE": set(),
    "GSCE": {"sigma"},
    "LGM": {"sigma", "margin"},
    "MMLDA": {"c_mm"},
    "CENTER": {"lam"},
    "MMC": {"c_mm"},
    "EMC": {"c_mm", "alpha"},
}


def _batch(z, y, L=None):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    y = np.atleast_1d(np.asarray(y))
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError(f"labels must be integers, got {y.dtype}")
    if y.shape != (z.shape[0],):
        raise ValueError(f"{z.shape[0]} inputs but labels of shape {y.shape}")
    if L is not None and (y.min(initial=0) < 0 or y.max(initial=0) >= L):
        raise ValueError(f"label out of range [0, {L})")
    return z, y.astype(np.int64), single


def _out(single, *arrays):
    if not single:
        return arrays if len(arrays) > 1 else arrays[0]
    res = tuple(a[0] if getattr(a, "ndim", 0) and a.shape[0] == 1 else a for a in arrays)
    res = tuple(float(r) if np.ndim(r) == 0 else r for r in res)
    return res if len(res) > 1 else res[0]


def softmax_log_prob(h):
    """Log-softmax along the last axis with max subtraction."""
    h = np.asarray(h, dtype=np.float64)
    if not np.all(np.isfinite(h)):
        raise ValueError("logits must be finite")
    shifted = h - h.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def sce_loss(logits, y):
    """Softmax cross-entropy. Returns ``(loss, dloss/dlogits)``."""
    h, y, single = _batch(logits, y, np.shape(logits)[-1])
    logp = softmax_log_prob(h)
    rows = np.arange(len(y))
    loss = -logp[rows, y]
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    return _out(single, loss, grad)


@dataclass
class QuadraticLogitParams:
    """``h_i = -sigma_i * ||z - mu_i||^2 + B_i``."""

    mus: np.ndarray
    sigmas: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        self.mus = np.atleast_2d(np.asarray(self.mus, dtype=np.float64))
        L = self.mus.shape[0]
        self.sigmas = np.broadcast_to(np.asarray(self.sigmas, dtype=np.float64), (L,)).copy()
        self.biases = np.broadcast_to(np.asarray(self.biases, dtype=np.float64), (L,)).copy()
        if np.any(self.sigmas <= 0):
            raise ValueError("sigmas must be strictly positive")

    @property
    def num_classes(self) -> int:
        return self.mus.shape[0]

    @classmethod
    def from_linear(cls, W, b) -> "QuadraticLogitParams":
        """Quadratic parameters whose softmax equals ``softmax(W z + b)``."""
        W = np.asarray(W, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        return cls(W / 2.0, np.ones(len(b)), b + 0.25 * (W * W).sum(axis=1))


def _sq_dists(z, mus):
    diff = z[:, None, :] - mus[None, :, :]
    return (diff * diff).sum(axis=-1)


def quadratic_logits(z, q: QuadraticLogitParams):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    if z.shape[1] != q.mus.shape[1]:
        raise ValueError(f"feature dim {z.shape[1]} != center dim {q.mus.shape[1]}")
    h = -q.sigmas * _sq_dists(z, q.mus) + q.biases
    return h[0] if single else h


def _quadratic_vjp(z, q, dh):
    """Pull ``dh`` back through the quadratic logits to ``z`` and ``mus``."""
    s = dh * q.sigmas
    dz = -2.0 * (s.sum(axis=1, keepdims=True) * z - s @ q.mus)
    dmus = 2.0 * (s.T @ z - s.sum(axis=0)[:, None] * q.mus)
    return dz, dmus


def _quadratic_sce(z, y, q, margin=0.0):
    h = quadratic_logits(z, q)
    if margin:
        h = h.copy()
        h[np.arange(len(y)), y] -= margin
    loss, dh = sce_loss(h, y)
    dz, dmus = _quadratic_vjp(z, q, dh)
    return loss, dz, dmus


def gsce_loss(z, y, q: QuadraticLogitParams):
    """Cross-entropy over quadratic logits. Returns ``(loss, dloss/dz)``."""
    z, y, single = _batch(z, y, q.num_classes)
    loss, dz, _ = _quadratic_sce(z, y, q)
    return _out(single, loss, dz)


def lgm_loss(z, y, q: QuadraticLogitParams, m: float):
    """Large-margin Gaussian-mixture loss: quadratic logits, ``m`` off the true logit."""
    if m < 0:
        raise ValueError(f"margin must be non-negative, got {m}")
    z, y, single = _batch(z, y, q.num_classes)
    loss, dz, _ = _quadratic_sce(z, y, q, margin=m)
    return _out(single, loss, dz)


def mmlda_loss(z, y, cs: CenterSet, form: str = "distance"):
    """Softmax over ``-||z - mu_l||^2 / 2`` (or over ``z . mu_l`` with ``form="inner"``).

    The two forms agree whenever all centers share one norm.
    """
    mu = cs.centers
    z, y, single = _batch(z, y, mu.shape[0])
    if form == "distance":
        h = -0.5 * _sq_dists(z, mu)
        loss, dh = sce_loss(h, y)
        dz = dh @ mu - dh.sum(axis=1, keepdims=True) * z
    elif form == "inner":
        loss, dh = sce_loss(z @ mu.T, y)
        dz = dh @ mu
    else:
        raise ValueError(f"unknown form {form!r}")
    return _out(single, loss, dz)


def mmc_loss(z, y, cs: CenterSet):
    """Half squared distance to the preset center of the true class."""
    mu = cs.centers
    z, y, single = _batch(z, y, mu.shape[0])
    diff = z - mu[y]
    return _out(single, 0.5 * (diff * diff).sum(axis=1), diff)


def center_loss_joint(logits, z, y, centers, lam: float):
    """``SCE(logits, y) + lam * ||z - c_y||^2 / 2`` with trainable centers.

    Returns ``(loss, dlogits, dz, dcenters)``; ``dcenters`` sums over the batch.
    """
    if not lam > 0:
        raise ValueError(f"lam must be positive, got {lam}")
    centers = np.asarray(centers, dtype=np.float64)
    z, y, single = _batch(z, y, centers.shape[0])
    h = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    ce, dlogits = sce_loss(h, y)
    diff = z - centers[y]
    loss = ce + lam * 0.5 * (diff * diff).sum(axis=1)
    dcenters = np.zeros_like(centers)
    np.add.at(dcenters, y, -lam * diff)
    out = _out(single, loss, dlogits, lam * diff)
    return (*out, dcenters)


def emc_loss(z, y, mu, cs: CenterSet, alpha: float):
    """Elastic center loss: ``||z - mu_y||^2/2 + ||mu_y - mu*_y||^2/(2 alpha)``.

    Returns ``(loss, dz, dmu)``; ``dmu`` sums over the batch.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    mu = np.asarray(mu, dtype=np.float64)
    z, y, single = _batch(z, y, mu.shape[0])
    diff = z - mu[y]
    tether = mu[y] - cs.centers[y]
    loss = 0.5 * (diff * diff).sum(axis=1) + 0.5 / alpha * (tether * tether).sum(axis=1)
    dmu = np.zeros_like(mu)
    np.add.at(dmu, y, -diff + tether / alpha)
    out = _out(single, loss, diff)
    return (*out, dmu)


@dataclass
class LossSpec:
    """Which objective to train with, and its hyperparameters."""

    kind: str
    c_mm: float = 10.0
    lam: float = 0.1
    alpha: float = 1.0
    margin: float = 0.0
    sigma: Union[float, Sequence[float]] = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")
        if self.c_mm <= 0 or self.lam <= 0 or self.alpha <= 0:
            raise ValueError("c_mm, lam and alpha must be positive")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if np.any(np.asarray(self.sigma) <= 0):
            raise ValueError("sigma must be positive")

    @property
    def name(self) -> str:
        return f"MMC-{self.c_mm:g}" if self.kind == "MMC" else self.kind

    def to_dict(self) -> dict:
        doc = {"kind": self.kind}
        for key in sorted(_SPEC_KEYS[self.kind]):
            val = getattr(self, key)
            doc[key] = list(val) if isinstance(val, (list, tuple, np.ndarray)) else val
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "LossSpec":
        doc = dict(doc)
        kind = doc.pop("kind", None)
        if kind not in KINDS:
            raise ValueError(f"unknown loss kind {kind!r}; expected one of {KINDS}")
        extra = set(doc) - _SPEC_KEYS[kind]
        if extra:
            raise ValueError(f"keys {sorted(extra)} do not apply to loss kind {kind}")
        return cls(kind=kind, **doc)


class Head:
    """Loss-specific parameters sitting on top of the feature extractor.

    ``loss(z, y)`` returns per-example losses, ``dloss_i/dz_i`` and gradients
    of the summed loss for every array in ``params``. ``scores(z)`` gives
    the pre-softmax values used for prediction.
    """

    def __init__(self, spec: LossSpec, num_classes: int, feature_dim: int, seed: int = 0):
        self.spec = spec
        self.num_classes = L = int(num_classes)
        self.feature_dim = d = int(feature_dim)
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(d)
        self.centers: Optional[CenterSet] = None
        self.state = {}
        kind = spec.kind
        if kind in ("SCE", "CENTER"):
            self.state["W"] = rng.uniform(-bound, bound, size=(L, d))
            self.state["b"] = np.zeros(L)
            if kind == "CENTER":
                self.state["centers"] = np.zeros((L, d))
        elif kind in ("GSCE", "LGM"):
            self.state["mus"] = rng.uniform(-1.0, 1.0, size=(L, d))
        if kind in CENTER_KINDS:
            self.centers = generate_mm_centers(spec.c_mm, d, L)
            if kind == "EMC":
                self.state["mu"] = self.centers.centers.copy()

    @property
    def params(self):
        return list(self.state.values())

    def quadratic_params(self) -> QuadraticLogitParams:
        return QuadraticLogitParams(self.state["mus"], self.spec.sigma, 0.0)

    def scores(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        kind = self.spec.kind
        if kind in ("SCE", "CENTER"):
            return z @ self.state["W"].T + self.state["b"]
        if kind in ("GSCE", "LGM"):
            return quadratic_logits(z, self.quadratic_params())
        mu = self.centers.centers
        if self.centers.kind == "mm":
            # -||z - mu||^2/2 expanded; keeps exact ties exact
            sq = 0.5 * ((z * z).sum(axis=1, keepdims=True) + self.centers.c_mm ** 2)
            return z @ mu.T - sq
        return -0.5 * _sq_dists(z, mu)

    def scores_vjp(self, z, dscores):
        """Gradient w.r.t. ``z`` of ``sum(dscores * scores(z))``."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        kind = self.spec.kind
        if kind in ("SCE", "CENTER"):
            return dscores @ self.state["W"]
        if kind in ("GSCE", "LGM"):
            return _quadratic_vjp(z, self.quadratic_params(), dscores)[0]
        mu = self.centers.centers
        return dscores @ mu - dscores.sum(axis=1, keepdims=True) * z

    def loss(self, z, y):
        z, y, _ = _batch(z, y, self.num_classes)
        kind = self.spec.kind
        if kind == "SCE":
            W = self.state["W"]
            loss, dh = sce_loss(z @ W.T + self.state["b"], y)
            return loss, dh @ W, [dh.T @ z, dh.sum(axis=0)]
        if kind in ("GSCE", "LGM"):
            margin = self.spec.margin if kind == "LGM" else 0.0
            loss, dz, dmus = _quadratic_sce(z, y, self.quadratic_params(), margin)
            return loss, dz, [dmus]
        if kind == "CENTER":
            W = self.state["W"]
            loss, dh, dz_c, dc = center_loss_joint(z @ W.T + self.state["b"], z, y,
                                                   self.state["centers"], self.spec.lam)
            return loss, dh @ W + dz_c, [dh.T @ z, dh.sum(axis=0), dc]
        if kind == "MMLDA":
            loss, dz = mmlda_loss(z, y, self.centers)
            return loss, dz, []
        if kind == "MMC":
            loss, dz = mmc_loss(z, y, self.centers)
            return loss, dz, []
        loss, dz, dmu = emc_loss(z, y, self.state["mu"], self.centers, self.spec.alpha)
        return loss, dz, [dmu]

    def to_dict(self) -> dict:
        doc = {"spec": self.spec.to_dict(), "L": self.num_classes, "d": self.feature_dim,
               "state": {k: v.tolist() for k, v in self.state.items()}}
        if self.centers is not None:
            doc["centers"] = self.centers.to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "Head":
        head = cls(LossSpec.from_dict(doc["spec"]), doc["L"], doc["d"])
        for k, v in doc["state"].items():
            if k not in head.state:
                raise ValueError(f"unexpected head parameter {k!r}")
            head.state[k][...] = np.asarray(v, dtype=np.float64)
        if "centers" in doc:
            head.centers = CenterSet.from_dict(doc["centers"])
        return head


def predict(head: Head, z):
    """Labels (lowest index wins ties) and softmax-normalised scores."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    s = head.scores(np.atleast_2d(z))
    probs = np.exp(softmax_log_prob(s))
    labels = np.argmax(s, axis=1)
    if single:
        return int(labels[0]), probs[0]
    return labels, probs


def alp_upper_bound_holds(a, b, m) -> np.ndarray:
    """Row-wise ``||a-m||^2 + ||b-m||^2 >= ||a-b||^2 / 2``."""
    a, b, m = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (a, b, m))
    lhs = ((a - m) ** 2).sum(axis=1) + ((b - m) ** 2).sum(axis=1)
    rhs = 0.5 * ((a - b) ** 2).sum(axis=1)
    # the gap equals ||a + b - 2m||^2 / 2 >= 0; allow rounding slack
    return lhs >= rhs - 1e-12 * np.maximum(1.0, lhs)
