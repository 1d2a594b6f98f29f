"""Loss contours and sample density in feature space.

Density is the number of training features whose loss falls in a thin band
``[C, C + dC)`` divided by the feature-space volume of that band. For the MMC
loss the band is a spherical shell around the class center; for quadratic
logits with unequal scales it is (locally) a shell around the point
``M_{k,k'}``. Analytic densities are unnormalised.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from .losses import QuadraticLogitParams, sce_loss


def normal_pdf(u):
    return np.exp(-0.5 * np.square(u)) / math.sqrt(2.0 * math.pi)


def sphere_area_constant(d: int) -> float:
    """Surface area of the unit sphere in ``R^d``: ``2 pi^(d/2) / Gamma(d/2)``."""
    return 2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0)


def ball_volume(radius, d: int):
    return math.pi ** (d / 2.0) / math.gamma(d / 2.0 + 1.0) * np.power(radius, d)


@dataclass
class ContourSolution:
    """Level set ``h_i(z) - h_j(z) = c``.

    ``variant`` is ``"sphere"`` (``||z - center||^2 = radius_sq``),
    ``"hyperplane"`` (``normal . z = offset``) or ``"empty"``.
    """

    variant: str
    center: Optional[np.ndarray] = None
    radius_sq: Optional[float] = None
    normal: Optional[np.ndarray] = None
    offset: Optional[float] = None


def pair_constants(i: int, j: int, q: QuadraticLogitParams) -> Tuple[np.ndarray, float]:
    """Sphere center ``M_ij`` and constant ``B_ij`` for ``sigma_i != sigma_j``."""
    si, sj = q.sigmas[i], q.sigmas[j]
    ds = si - sj
    if ds == 0:
        raise ValueError("pair constants need sigma_i != sigma_j")
    mi, mj = q.mus[i], q.mus[j]
    M = (si * mi - sj * mj) / ds
    B = si * sj * float(np.sum((mi - mj) ** 2)) / ds ** 2 + (q.biases[i] - q.biases[j]) / ds
    return M, B


def contour_sphere(i: int, j: int, q: QuadraticLogitParams, c: float) -> ContourSolution:
    """Solve ``h_i - h_j = c`` for quadratic logits."""
    if i == j:
        raise ValueError("contour needs two distinct classes")
    si, sj = q.sigmas[i], q.sigmas[j]
    if si == sj:
        mi, mj = q.mus[i], q.mus[j]
        offset = 0.5 * (mi @ mi - mj @ mj + (q.biases[j] - q.biases[i] + c) / si)
        return ContourSolution("hyperplane", normal=mi - mj, offset=float(offset))
    M, B = pair_constants(i, j, q)
    r2 = B - c / (si - sj)
    if r2 < 0:
        return ContourSolution("empty", center=M, radius_sq=float(r2))
    return ContourSolution("sphere", center=M, radius_sq=float(r2))


def _log_expm1(C):
    # log(e^C - 1), accurate for small and large C
    C = np.asarray(C, dtype=np.float64)
    big = C > 30.0
    out = np.empty_like(C)
    out[big] = C[big] + np.log1p(-np.exp(-C[big]))
    out[~big] = np.log(np.expm1(C[~big]))
    return out if out.ndim else float(out)


def gsce_radius_sq(C, k: int, khat: int, q: QuadraticLogitParams):
    """Squared radius of the locally approximated loss contour at loss ``C``."""
    _, B = pair_constants(k, khat, q)
    return B + _log_expm1(C) / (q.sigmas[k] - q.sigmas[khat])


def gsce_lower_bound(q: QuadraticLogitParams, k: int, khat: int) -> float:
    """Smallest reachable loss ``C*`` when ``sigma_k > sigma_khat``."""
    ds = q.sigmas[k] - q.sigmas[khat]
    if ds <= 0:
        raise ValueError("a loss lower bound exists only for sigma_k > sigma_khat")
    _, B = pair_constants(k, khat, q)
    return float(np.logaddexp(0.0, B * (q.sigmas[khat] - q.sigmas[k])))


@dataclass
class ClassLossStats:
    k: int
    N: int
    C: float
    S: float
    degenerate: bool = False


@dataclass
class PairLossStats:
    k: int
    khat: int
    N: int
    C: float
    S: float
    degenerate: bool = False


def density_gsce(C, stats: PairLossStats, q: QuadraticLogitParams, d: int,
                 with_area: bool = False):
    """Unnormalised sample density induced by quadratic-logit cross-entropy."""
    if d < 2:
        raise ValueError("d must be at least 2")
    if not stats.S > 0:
        raise ValueError("loss standard deviation must be positive")
    k, khat = stats.k, stats.khat
    if q.sigmas[k] == q.sigmas[khat]:
        raise ValueError("equal sigmas give flat contours and no density formula")
    C = np.asarray(C, dtype=np.float64)
    if q.sigmas[k] > q.sigmas[khat] and np.any(C <= gsce_lower_bound(q, k, khat)):
        raise ValueError("loss below the lower bound C* has an empty contour")
    r2 = gsce_radius_sq(C, k, khat, q)
    val = stats.N * normal_pdf((C - stats.C) / stats.S) / (stats.S * r2 ** ((d - 1) / 2.0))
    return val / sphere_area_constant(d) if with_area else val


def density_mmc(C, stats: ClassLossStats, d: int, with_area: bool = False):
    """Unnormalised sample density induced by the MMC loss."""
    C = np.asarray(C, dtype=np.float64)
    if np.any(C <= 0):
        raise ValueError("loss value must be positive")
    if not stats.S > 0:
        raise ValueError("loss standard deviation must be positive")
    if d < 2:
        raise ValueError("d must be at least 2")
    val = stats.N * normal_pdf((C - stats.C) / stats.S) / (stats.S * C ** ((d - 1) / 2.0))
    if with_area:
        val = val / (2.0 ** ((d + 1) / 2.0) * math.pi ** (d / 2.0) / math.gamma(d / 2.0))
    return val


def mmc_shell_volume(C: float, dC: float, d: int, exact: bool = False) -> float:
    """Volume of ``{z : MMC loss in [C, C + dC)}``.

    The default is the contour area times ``dC``,
    ``2^((d+1)/2) pi^(d/2) C^((d-1)/2) / Gamma(d/2) * dC``, which is the
    volume the density formula assumes. ``exact=True`` returns the true
    difference of ball volumes; the two differ by a factor ``sqrt(2C)``
    because the shell's radial width is ``dC / sqrt(2C)``, not ``dC``.
    """
    if exact:
        return float(ball_volume(math.sqrt(2 * (C + dC)), d) - ball_volume(math.sqrt(2 * C), d))
    return 2.0 ** ((d + 1) / 2.0) * math.pi ** (d / 2.0) * C ** ((d - 1) / 2.0) \
        / math.gamma(d / 2.0) * dC


def gsce_shell_volume(C: float, dC: float, k: int, khat: int, q: QuadraticLogitParams,
                      d: int) -> float:
    """Contour area of the approximated g-SCE contour at ``C`` times ``dC``."""
    r2 = float(gsce_radius_sq(C, k, khat, q))
    if r2 <= 0:
        return 0.0
    return sphere_area_constant(d) * r2 ** ((d - 1) / 2.0) * dC


@dataclass
class ShellCount:
    delta_n: int
    volume: float
    density: float


def empirical_density(features, labels, loss_fn: Callable, C: float, dC: float,
                      volume_fn: Callable) -> ShellCount:
    """Count features whose loss lies in ``[C, C + dC)`` and divide by the band volume.

    ``loss_fn(features, labels)`` returns per-example losses;
    ``volume_fn(C, dC)`` returns the band volume.
    """
    if not dC > 0:
        raise ValueError("dC must be positive")
    volume = float(volume_fn(C, dC))
    if not volume > 0:
        raise ValueError(f"degenerate band volume {volume}")
    features = np.asarray(features, dtype=np.float64)
    if len(features) == 0:
        return ShellCount(0, volume, 0.0)
    losses = np.asarray(loss_fn(features, labels), dtype=np.float64)
    n = int(np.count_nonzero((losses >= C) & (losses < C + dC)))
    return ShellCount(n, volume, n / volume)


def runner_up_labels(logits, y) -> np.ndarray:
    s = np.array(logits, dtype=np.float64)
    s[np.arange(len(y)), y] = -np.inf
    return np.argmax(s, axis=1)


def fit_loss_stats(losses, labels, runner_up=None) -> dict:
    """Mean and unbiased standard deviation of the loss per class or class pair.

    Keys are ``k`` (or ``(k, khat)`` when ``runner_up`` is given). Groups
    with fewer than two members get ``S = nan``; groups with zero spread are
    flagged ``degenerate``.
    """
    losses = np.asarray(losses, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if runner_up is None:
        keys = [(int(k),) for k in labels]
    else:
        keys = list(zip(labels.tolist(), np.asarray(runner_up, dtype=np.int64).tolist()))
    groups: Dict[tuple, list] = {}
    for key, v in zip(keys, losses):
        groups.setdefault(key, []).append(v)
    out = {}
    for key in sorted(groups):
        vals = np.asarray(groups[key])
        n = len(vals)
        mean = float(vals.mean())
        std = float(vals.std(ddof=1)) if n >= 2 else float("nan")
        degenerate = not (std > 0)
        if runner_up is None:
            out[key[0]] = ClassLossStats(key[0], n, mean, std, degenerate)
        else:
            out[key] = PairLossStats(key[0], key[1], n, mean, std, degenerate)
    return out


def lse_gap(logits, y) -> np.ndarray:
    """Exact cross-entropy minus its two-class approximation ``log(1 + e^(h_khat - h_y))``.

    Always non-negative; reported as a diagnostic only.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    exact, _ = sce_loss(logits, y)
    rows = np.arange(len(y))
    khat = runner_up_labels(logits, y)
    approx = np.logaddexp(0.0, logits[rows, khat] - logits[rows, y])
    return exact - approx


@dataclass
class DensityReport:
    loss_kind: str
    feature_dim: int
    grid: list
    groups: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=True)


def _clean(x):
    x = float(x)
    return x if math.isfinite(x) else None


def mmc_density_report(features, labels, centers, grid: Sequence[float],
                       dC: Optional[float] = None, loss_kind: str = "MMC") -> DensityReport:
    """Per-class MMC loss statistics with analytic and empirical densities.

    ``dC`` defaults to ``0.05 * S_k`` per class.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    mu = np.asarray(centers, dtype=np.float64)
    d = features.shape[1]
    diff = features - mu[labels]
    losses = 0.5 * (diff * diff).sum(axis=1)
    report = DensityReport(loss_kind, d, [float(c) for c in grid])
    for k, st in fit_loss_stats(losses, labels).items():
        entry = {"k": k, "N": st.N, "C": st.C, "S": _clean(st.S), "degenerate": st.degenerate,
                 "analytic": [], "empirical": []}
        if not st.degenerate:
            band = dC if dC is not None else 0.05 * st.S
            sel = labels == k
            for C in grid:
                entry["analytic"].append(_clean(density_mmc(C, st, d)))
                sc = empirical_density(losses[sel], None, lambda l, _: l, C, band,
                                       lambda c, w: mmc_shell_volume(c, w, d))
                entry["empirical"].append(sc.density)
        report.groups.append(entry)
    return report


def gsce_density_report(features, labels, q: QuadraticLogitParams, grid: Sequence[float],
                        dC: Optional[float] = None, loss_kind: str = "GSCE") -> DensityReport:
    """Per-(class, runner-up) statistics for quadratic-logit cross-entropy.

    Pairs with equal sigmas have no density formula; their density lists
    stay empty. Grid points outside a pair's valid range report ``None``.
    """
    from .losses import quadratic_logits

    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    d = features.shape[1]
    h = quadratic_logits(features, q)
    losses, _ = sce_loss(h, labels)
    khat = runner_up_labels(h, labels)
    report = DensityReport(loss_kind, d, [float(c) for c in grid])
    for (k, kh), st in fit_loss_stats(losses, labels, khat).items():
        entry = {"k": k, "khat": kh, "N": st.N, "C": st.C, "S": _clean(st.S),
                 "degenerate": st.degenerate, "analytic": [], "empirical": []}
        if not st.degenerate and q.sigmas[k] != q.sigmas[kh]:
            band = dC if dC is not None else 0.05 * st.S
            sel = (labels == k) & (khat == kh)
            for C in grid:
                try:
                    entry["analytic"].append(_clean(density_gsce(C, st, q, d)))
                    sc = empirical_density(losses[sel], None, lambda l, _: l, C, band,
                                           lambda c, w: gsce_shell_volume(c, w, k, kh, q, d))
                    entry["empirical"].append(sc.density)
                except ValueError:
                    entry["analytic"].append(None)
                    entry["empirical"].append(None)
        report.groups.append(entry)
    return report
