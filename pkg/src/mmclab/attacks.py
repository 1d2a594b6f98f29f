"""Evaluation attacks against a frozen ``MLP`` + ``Head`` pair.

All attacks are batched over examples. Inputs live in ``[0, 1]^p``; l-inf
attacks stay inside ``||x_adv - x||_inf <= epsilon``. Objectives are
*minimised*: the untargeted standard objective is the negated cross-entropy
of the true label.

Randomness (target labels, SPSA probes, random starts, corruptions) is drawn
from a generator seeded by ``(seed, example index)``, so results do not
depend on batching or on the number of worker threads.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .losses import Head, sce_loss
from .nn import MLP, Adam

FAMILIES = ("PGD", "MIM", "CW", "SPSA", "NOISE", "ROTATE")
MODES = ("untargeted", "targeted")
OBJECTIVES = ("standard", "ada_un1", "ada_un2", "ada_tar1", "ada_tar2")
# "auto" picks the adaptive objective for center heads and "standard" otherwise
CONFIG_OBJECTIVES = OBJECTIVES + ("auto",)
CSV_COLUMNS = ("index", "clean_label", "pred_clean", "pred_adv", "success", "l2", "linf")


@dataclass
class CWParams:
    binary_steps: int = 9
    c_init: float = 0.01
    lr: float = 0.005
    iters: int = 1000
    confidence: float = 0.0
    abort_early: bool = True


@dataclass
class SPSAParams:
    batch: int = 128
    lr: float = 0.01
    delta: float = 0.01


def _strict(cls, doc, where):
    allowed = {f.name for f in fields(cls)}
    extra = set(doc) - allowed
    if extra:
        raise ValueError(f"unknown {where} keys: {sorted(extra)}")
    return cls(**doc)


@dataclass
class AttackConfig:
    family: str = "PGD"
    mode: str = "untargeted"
    objective: str = "standard"
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    steps: int = 10
    cw: CWParams = field(default_factory=CWParams)
    spsa: SPSAParams = field(default_factory=SPSAParams)
    noise_sigma: float = 0.05
    rotate_degrees: float = 30.0
    mim_decay: float = 1.0
    random_start: bool = False
    seed: int = 0
    name: Optional[str] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.objective not in CONFIG_OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.objective.startswith("ada_un") and self.mode != "untargeted":
            raise ValueError(f"{self.objective} is an untargeted objective")
        if self.objective.startswith("ada_tar") and self.mode != "targeted":
            raise ValueError(f"{self.objective} is a targeted objective")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.family == "NOISE":
            return f"NOISE_{self.noise_sigma:g}"
        if self.family == "ROTATE":
            return f"ROTATE_{self.rotate_degrees:g}"
        tag = "tar" if self.mode == "targeted" else "un"
        return f"{self.family}{self.steps}_{tag}_{self.objective}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "AttackConfig":
        doc = dict(doc)
        if "cw" in doc:
            doc["cw"] = _strict(CWParams, doc["cw"], "cw")
        if "spsa" in doc:
            doc["spsa"] = _strict(SPSAParams, doc["spsa"], "spsa")
        return _strict(cls, doc, "attack")


@dataclass
class AdvResult:
    """Batched attack output; every array has one entry per example."""

    x_adv: np.ndarray
    success: np.ndarray
    l2_distortion: np.ndarray
    linf_distortion: np.ndarray
    iterations_used: np.ndarray
    objective_trace: np.ndarray
    pred_adv: np.ndarray
    target: Optional[np.ndarray] = None
    aborted: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)


def pick_targets(y, num_classes: int, seed: int, indices=None) -> np.ndarray:
    """One uniformly random label ``!= y`` per example."""
    y = np.asarray(y, dtype=np.int64)
    indices = np.arange(len(y)) if indices is None else np.asarray(indices)
    out = np.empty_like(y)
    for k, (label, idx) in enumerate(zip(y, indices)):
        t = np.random.default_rng([seed, int(idx), 1]).integers(num_classes - 1)
        out[k] = t + (t >= label)
    return out


def runner_up(scores, y) -> np.ndarray:
    """Highest-scoring label other than ``y``."""
    s = np.array(scores, dtype=np.float64)
    s[np.arange(len(y)), y] = -np.inf
    return np.argmax(s, axis=1)


def default_objective(head: Head, family: str, mode: str) -> str:
    """The adaptive objective for center-based heads, ``standard`` otherwise."""
    if head.centers is None:
        return "standard"
    if family == "CW":
        return "ada_un2" if mode == "untargeted" else "ada_tar2"
    return "ada_un1" if mode == "untargeted" else "ada_tar1"


def _objective_on_z(kind, head, z, y, y_t):
    rows = np.arange(len(y))
    if kind == "standard":
        s = head.scores(z)
        if y_t is None:
            loss, ds = sce_loss(s, y)
            return -loss, -head.scores_vjp(z, ds)
        loss, ds = sce_loss(s, y_t)
        return loss, head.scores_vjp(z, ds)
    if kind not in OBJECTIVES:
        raise ValueError(f"unknown objective {kind!r}")
    if head.centers is None:
        raise ValueError(f"{kind} needs a head with preset centers (MMC/MMLDA/EMC)")
    mu = head.centers.centers
    if kind.startswith("ada_tar") and y_t is None:
        raise ValueError(f"{kind} needs target labels")

    def half_sq(labels):
        diff = z - mu[labels]
        return 0.5 * (diff * diff).sum(axis=1), diff

    own, d_own = half_sq(y)
    if kind == "ada_un1":
        return -own, -d_own
    if kind == "ada_un2":
        if mu.shape[0] < 2:
            raise ValueError("runner-up label needs at least 2 classes")
        other, d_other = half_sq(runner_up(head.scores(z), y))
        return other - own, d_other - d_own
    tgt, d_tgt = half_sq(y_t)
    if kind == "ada_tar1":
        return tgt, d_tgt
    return tgt - own, d_tgt - d_own


def adaptive_objective(kind: str, model: MLP, head: Head, x, y, y_t=None):
    """Objective values to minimise and their input gradients.

    ``kind`` is one of ``standard``, ``ada_un1``, ``ada_un2``, ``ada_tar1``,
    ``ada_tar2``. ``standard`` is targeted exactly when ``y_t`` is given.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    y_t = None if y_t is None else np.atleast_1d(np.asarray(y_t, dtype=np.int64))
    _, vals, dx = model.input_vjp(x, lambda z: _objective_on_z(kind, head, z, y, y_t))
    return vals, dx


def objective_values(kind: str, model: MLP, head: Head, x, y, y_t=None) -> np.ndarray:
    """Objective values only; uses nothing but forward evaluations."""
    z = model.features(np.atleast_2d(x))
    return _objective_on_z(kind, head, z, np.asarray(y), y_t)[0]


def _project(x, x0, eps):
    return np.clip(np.clip(x, x0 - eps, x0 + eps), 0.0, 1.0)


def _predict(model, head, x):
    return np.argmax(head.scores(model.features(x)), axis=1)


def _success(pred, y, y_t):
    return pred != y if y_t is None else pred == y_t


def _setup(head, x, y, cfg, y_t, indices):
    x0 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    indices = np.arange(len(y)) if indices is None else np.asarray(indices)
    if cfg.mode == "targeted":
        if y_t is None:
            y_t = pick_targets(y, head.num_classes, cfg.seed, indices)
        y_t = np.atleast_1d(np.asarray(y_t, dtype=np.int64))
        if np.any(y_t == y):
            raise ValueError("target labels must differ from true labels")
    else:
        y_t = None
    return x0, y, y_t, indices


def _finish(model, head, x0, x_adv, y, y_t, trace, iters, aborted=None, extras=None):
    pred = _predict(model, head, x_adv)
    delta = x_adv - x0
    return AdvResult(
        x_adv=x_adv,
        success=_success(pred, y, y_t),
        l2_distortion=np.linalg.norm(delta, axis=1),
        linf_distortion=np.abs(delta).max(axis=1),
        iterations_used=iters,
        objective_trace=np.stack(trace, axis=1),
        pred_adv=pred,
        target=y_t,
        aborted=aborted,
        extras=extras or {},
    )


def _random_start(x0, eps, seed, indices):
    noise = np.stack([np.random.default_rng([seed, int(i), 2]).uniform(-eps, eps, x0.shape[1])
                      for i in indices])
    return _project(x0 + noise, x0, eps)


def _iterative_linf(model, head, x, y, cfg, y_t, indices, decay):
    cfg = resolve_objective(cfg, head)
    x0, y, y_t, indices = _setup(head, x, y, cfg, y_t, indices)
    kind = cfg.objective
    x_adv = _random_start(x0, cfg.epsilon, cfg.seed, indices) if cfg.random_start else x0.copy()
    active = np.ones(len(y), dtype=bool)
    iters = np.full(len(y), cfg.steps)
    velocity = np.zeros_like(x0)
    trace = []
    for t in range(cfg.steps):
        vals, g = adaptive_objective(kind, model, head, x_adv, y, y_t)
        trace.append(vals)
        bad = active & ~(np.isfinite(g).all(axis=1) & np.isfinite(vals))
        iters[bad] = t
        active &= ~bad
        if decay is not None:
            l1 = np.abs(g).sum(axis=1, keepdims=True)
            g = velocity = decay * velocity + g / np.where(l1 > 0, l1, 1.0)
        stepped = _project(x_adv - cfg.step_size * np.sign(g), x0, cfg.epsilon)
        x_adv[active] = stepped[active]
    trace.append(objective_values(kind, model, head, x_adv, y, y_t))
    return _finish(model, head, x0, x_adv, y, y_t, trace, iters, aborted=~active)


def pgd(model: MLP, head: Head, x, y, cfg: AttackConfig, y_t=None, indices=None) -> AdvResult:
    """Sign-gradient descent on the objective, projected to the eps-ball and [0, 1]."""
    return _iterative_linf(model, head, x, y, cfg, y_t, indices, decay=None)


def mim(model: MLP, head: Head, x, y, cfg: AttackConfig, indices=None) -> AdvResult:
    """Momentum iterative method: sign steps along an L1-normalised gradient average."""
    if cfg.mode != "untargeted":
        raise ValueError("MIM is run in untargeted mode only")
    return _iterative_linf(model, head, x, y, cfg, None, indices, decay=cfg.mim_decay)


def _cw_margin(kind, head, z, y, y_t):
    """Margin ``f`` that is <= 0 once the attack goal is met, and ``df/dz``."""
    if kind in ("ada_un2", "ada_tar2"):
        return _objective_on_z(kind, head, z, y, y_t)
    s = head.scores(z)
    rows = np.arange(len(y))
    ds = np.zeros_like(s)
    if y_t is None:
        other = runner_up(s, y)
        f = s[rows, y] - s[rows, other]
        ds[rows, y] = 1.0
        ds[rows, other] = -1.0
    else:
        other = runner_up(s, y_t)
        f = s[rows, other] - s[rows, y_t]
        ds[rows, other] = 1.0
        ds[rows, y_t] = -1.0
    return f, head.scores_vjp(z, ds)


def cw(model: MLP, head: Head, x, y, cfg: AttackConfig, y_t=None, indices=None) -> AdvResult:
    """Carlini-Wagner l2 attack with a binary search over the trade-off constant.

    Optimises ``||x' - x||^2 + c * max(f(x'), -kappa)`` over ``w`` with
    ``x' = (tanh(w) + 1) / 2``. Failed examples keep ``x_adv = x`` and report
    an infinite l2 distortion.
    """
    cfg = resolve_objective(cfg, head)
    p = cfg.cw
    x0, y, y_t, indices = _setup(head, x, y, cfg, y_t, indices)
    kind = cfg.objective if cfg.objective in ("ada_un2", "ada_tar2") else "standard"
    n = len(y)
    big = 1e10
    lower = np.zeros(n)
    upper = np.full(n, big)
    const = np.full(n, p.c_init)
    best_d2 = np.full(n, np.inf)
    best_x = x0.copy()

    pred0 = _predict(model, head, x0)
    done = _success(pred0, y, y_t)
    best_d2[done] = 0.0

    w0 = np.arctanh((2.0 * x0 - 1.0) * (1.0 - 1e-6))
    consts = np.zeros((n, p.binary_steps))
    step_success = np.zeros((n, p.binary_steps), dtype=bool)
    step_best = np.full((n, p.binary_steps), np.inf)
    trace = [np.zeros(n)]
    for bs in range(p.binary_steps):
        consts[:, bs] = const
        w = w0.copy()
        opt = Adam([w], lr=p.lr)
        prev = np.inf
        check_every = max(p.iters // 10, 1)
        for it in range(p.iters):
            t = np.tanh(w)
            xp = (t + 1.0) / 2.0

            def upstream(z):
                f, dfdz = _cw_margin(kind, head, z, y, y_t)
                live = (f > -p.confidence)[:, None]
                return (f, head.scores(z)), const[:, None] * live * dfdz

            _, (f, scores), dx_f = model.input_vjp(xp, upstream)
            d2 = ((xp - x0) ** 2).sum(axis=1)
            ok = _success(np.argmax(scores, axis=1), y, y_t) & ~done
            step_success[:, bs] |= ok
            step_best[:, bs] = np.where(ok, np.minimum(step_best[:, bs], d2), step_best[:, bs])
            better = ok & (d2 < best_d2)
            best_d2[better] = d2[better]
            best_x[better] = xp[better]
            total = d2 + const * np.maximum(f, -p.confidence)
            if p.abort_early and it % check_every == 0:
                if total.sum() > prev * 0.9999:
                    break
                prev = total.sum()
            opt.step([(2.0 * (xp - x0) + dx_f) * (1.0 - t * t) / 2.0])
        trace.append(np.where(np.isfinite(best_d2), np.sqrt(best_d2), np.inf))
        hit = step_success[:, bs]
        upper = np.where(hit, np.minimum(upper, const), upper)
        lower = np.where(hit, lower, np.maximum(lower, const))
        const = np.where(upper < big, (lower + upper) / 2.0, const * 10.0)

    found = np.isfinite(best_d2)
    res = _finish(model, head, x0, best_x, y, y_t, trace,
                  np.full(n, p.binary_steps * p.iters),
                  extras={"consts": consts, "step_success": step_success,
                          "step_best_l2": np.sqrt(step_best)})
    res.l2_distortion = np.where(found, res.l2_distortion, np.inf)
    res.success = found
    return res


def spsa_gradient(f, x, delta: float, batch: int, rng) -> np.ndarray:
    """Simultaneous-perturbation gradient estimate with Rademacher probes.

    ``f`` maps a ``(k, p)`` array of points to ``k`` values.
    """
    x = np.asarray(x, dtype=np.float64)
    v = rng.choice([-1.0, 1.0], size=(batch, x.size))
    vals = f(np.concatenate([x + delta * v, x - delta * v]))
    diff = (vals[:batch] - vals[batch:]) / (2.0 * delta)
    return (diff[:, None] * v).mean(axis=0)


def spsa(model: MLP, head: Head, x, y, cfg: AttackConfig, y_t=None, indices=None) -> AdvResult:
    """Gradient-free l-inf attack: SPSA estimates in place of true gradients."""
    cfg = resolve_objective(cfg, head)
    sp = cfg.spsa
    x0, y, y_t, indices = _setup(head, x, y, cfg, y_t, indices)
    kind = cfg.objective
    x_adv = x0.copy()
    trace = [objective_values(kind, model, head, x_adv, y, y_t)]
    for k in range(len(y)):
        rng = np.random.default_rng([cfg.seed, int(indices[k]), 3])
        yk = np.full(2 * sp.batch, y[k])
        tk = None if y_t is None else np.full(2 * sp.batch, y_t[k])
        f = lambda pts: objective_values(kind, model, head, pts, yk, tk)
        for _ in range(cfg.steps):
            g = spsa_gradient(f, x_adv[k], sp.delta, sp.batch, rng)
            x_adv[k] = _project(x_adv[k] - sp.lr * np.sign(g), x0[k], cfg.epsilon)
    trace.append(objective_values(kind, model, head, x_adv, y, y_t))
    return _finish(model, head, x0, x_adv, y, y_t, trace, np.full(len(y), cfg.steps))


def rotate_image(img, degrees: float) -> np.ndarray:
    """Bilinear rotation about the image center, counter-clockwise as displayed,
    with zero padding."""
    if degrees == 0:
        return np.array(img, dtype=np.float64)
    return ndimage.rotate(np.asarray(img, dtype=np.float64), degrees, reshape=False,
                          order=1, mode="constant", cval=0.0)


def corrupt(x, kind: str, param: float, seed: int = 0, image_shape=None, indices=None):
    """Gaussian noise (``param`` = std) or random rotation (``param`` = max degrees)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    indices = np.arange(len(x)) if indices is None else np.asarray(indices)
    out = np.empty_like(x)
    for k, idx in enumerate(indices):
        rng = np.random.default_rng([seed, int(idx), 4])
        if kind == "noise":
            out[k] = np.clip(x[k] + rng.normal(0.0, param, x.shape[1]) if param > 0 else x[k],
                             0.0, 1.0)
        elif kind == "rotate":
            if image_shape is None or len(image_shape) != 2:
                raise ValueError("rotation needs 2-D images (pass image_shape)")
            angle = rng.uniform(-param, param)
            out[k] = np.clip(rotate_image(x[k].reshape(image_shape), angle), 0.0, 1.0).ravel()
        else:
            raise ValueError(f"unknown corruption {kind!r}")
    return out


def resolve_objective(cfg: AttackConfig, head: Head) -> AttackConfig:
    """Replace ``objective="auto"`` with the default objective for ``head``."""
    if cfg.objective != "auto":
        return cfg
    return replace(cfg, objective=default_objective(head, cfg.family, cfg.mode))


def run_attack(model, head, x, y, cfg: AttackConfig, indices=None, image_shape=None) -> AdvResult:
    """Dispatch on ``cfg.family``."""
    cfg = resolve_objective(cfg, head)
    if cfg.family == "PGD":
        return pgd(model, head, x, y, cfg, indices=indices)
    if cfg.family == "MIM":
        return mim(model, head, x, y, cfg, indices=indices)
    if cfg.family == "CW":
        return cw(model, head, x, y, cfg, indices=indices)
    if cfg.family == "SPSA":
        return spsa(model, head, x, y, cfg, indices=indices)
    x0, y, _, indices = _setup(head, x, y, cfg, None, indices)
    if cfg.family == "NOISE":
        x_adv = corrupt(x0, "noise", cfg.noise_sigma, cfg.seed, indices=indices)
    else:
        x_adv = corrupt(x0, "rotate", cfg.rotate_degrees, cfg.seed, image_shape, indices)
    zeros = np.zeros(len(y))
    return _finish(model, head, x0, x_adv, y, None, [zeros], np.zeros(len(y), dtype=int))


@dataclass
class RobustnessReport:
    attack: str
    clean_accuracy: float
    adversarial_accuracy: float
    success_rate: float
    mean_l2: float
    mean_linf: float
    rows: list

    def summary(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "rows"}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow([r[c] if not isinstance(r[c], float) else repr(r[c])
                            for c in CSV_COLUMNS])


def evaluate_robustness(model: MLP, head: Head, dataset, cfg: AttackConfig,
                        source=None, batch_size: int = 256, workers: int = 1) -> RobustnessReport:
    """Attack every example of ``dataset`` and tabulate accuracy and distortion.

    ``source=(model, head)`` crafts the examples on a substitute model and
    scores them on ``model`` (transfer setting).
    """
    craft_model, craft_head = source if source is not None else (model, head)
    cfg = resolve_objective(cfg, craft_head)
    x, y = dataset.inputs, dataset.labels
    chunks = [np.arange(s, min(s + batch_size, len(y))) for s in range(0, len(y), batch_size)]

    def work(idx):
        res = run_attack(craft_model, craft_head, x[idx], y[idx], cfg, indices=idx,
                         image_shape=dataset.image_shape)
        return idx, res

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, chunks))
    else:
        results = [work(idx) for idx in chunks]

    rows = []
    for idx, res in results:
        pred_clean = _predict(model, head, x[idx])
        pred_adv = _predict(model, head, res.x_adv) if source is not None else res.pred_adv
        success = res.success if source is None else _success(pred_adv, y[idx], res.target)
        for k, i in enumerate(idx):
            rows.append({
                "index": int(i), "clean_label": int(y[i]), "pred_clean": int(pred_clean[k]),
                "pred_adv": int(pred_adv[k]), "success": int(bool(success[k])),
                "l2": float(res.l2_distortion[k]), "linf": float(res.linf_distortion[k]),
            })
    n = max(len(rows), 1)
    ok = [r for r in rows if r["success"] and math.isfinite(r["l2"])]
    return RobustnessReport(
        attack=cfg.label,
        clean_accuracy=sum(r["pred_clean"] == r["clean_label"] for r in rows) / n,
        adversarial_accuracy=sum(r["pred_adv"] == r["clean_label"] for r in rows) / n,
        success_rate=sum(r["success"] for r in rows) / n,
        mean_l2=float(np.mean([r["l2"] for r in ok])) if ok else float("nan"),
        mean_linf=float(np.mean([r["linf"] for r in ok])) if ok else float("nan"),
        rows=rows,
    )
