import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mmclab.density import (ClassLossStats, PairLossStats, ball_volume, contour_sphere,
                            density_gsce, density_mmc, empirical_density, fit_loss_stats,
                            gsce_density_report, gsce_lower_bound, gsce_radius_sq, lse_gap,
                            mmc_density_report, mmc_shell_volume, pair_constants)
from mmclab.geometry import generate_mm_centers
from mmclab.losses import QuadraticLogitParams, quadratic_logits

PHI0 = 1 / math.sqrt(2 * math.pi)


def two_class(a, sigma_k=2.0, sigma_j=1.0, d=2):
    mus = np.zeros((2, d))
    mus[0, 0] = a
    return QuadraticLogitParams(mus, [sigma_k, sigma_j], 0.0)


def test_contour_sphere_example():
    sol = contour_sphere(0, 1, two_class(2.0), 0.0)
    assert sol.variant == "sphere"
    np.testing.assert_allclose(sol.center, [4.0, 0.0])
    assert sol.radius_sq == pytest.approx(8.0)


def test_contour_sphere_empty():
    sol = contour_sphere(0, 1, two_class(2.0), 16.0)
    assert sol.variant == "empty"
    assert sol.radius_sq == pytest.approx(-8.0)


def test_contour_same_class_rejected():
    with pytest.raises(ValueError):
        contour_sphere(1, 1, two_class(2.0), 0.0)


def test_contour_hyperplane_for_linear_logits():
    rng = np.random.default_rng(0)
    W, b = rng.normal(size=(3, 4)), rng.normal(size=3)
    q = QuadraticLogitParams.from_linear(W, b)
    c = 0.7
    sol = contour_sphere(0, 2, q, c)
    assert sol.variant == "hyperplane"
    # scale so the normal is W_i - W_j: z.(W_i - W_j) = b_j - b_i + c
    scale = (W[0] - W[2]) @ sol.normal / (sol.normal @ sol.normal)
    np.testing.assert_allclose(sol.normal * scale, W[0] - W[2])
    assert sol.offset * scale == pytest.approx(b[2] - b[0] + c)


@given(seed=st.integers(0, 10_000), c=st.floats(-5, 5))
def test_sphere_points_on_level_set(seed, c):
    rng = np.random.default_rng(seed)
    d = 4
    q = QuadraticLogitParams(rng.normal(size=(3, d)), rng.uniform(0.3, 3.0, 3), rng.normal(size=3))
    sol = contour_sphere(0, 1, q, c)
    if sol.variant != "sphere":
        return
    u = rng.normal(size=(20, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    z = sol.center + math.sqrt(sol.radius_sq) * u
    h = quadratic_logits(z, q)
    scale = max(1.0, np.abs(h).max())
    assert np.all(np.abs(h[:, 0] - h[:, 1] - c) < 1e-9 * scale)


def test_hyperplane_points_on_level_set():
    rng = np.random.default_rng(1)
    q = QuadraticLogitParams(rng.normal(size=(3, 3)), 1.5, rng.normal(size=3))
    sol = contour_sphere(2, 0, q, -0.4)
    n = sol.normal
    base = sol.offset * n / (n @ n)
    tangent = rng.normal(size=(10, 3))
    tangent -= np.outer(tangent @ n, n) / (n @ n)
    h = quadratic_logits(base + tangent, q)
    assert np.all(np.abs(h[:, 2] - h[:, 0] + 0.4) < 1e-9)


def test_lower_bound_examples():
    q = two_class(2.0)
    _, B = pair_constants(0, 1, q)
    assert B == pytest.approx(8.0)
    c_star = gsce_lower_bound(q, 0, 1)
    assert c_star == pytest.approx(math.log1p(math.exp(-8)), rel=1e-12)
    # the quoted decimal is a 4-figure rounding of the closed form
    assert c_star == pytest.approx(3.3535e-4, rel=1e-3)
    same = QuadraticLogitParams(np.zeros((2, 2)), [2.0, 1.0], 0.0)
    assert gsce_lower_bound(same, 0, 1) == pytest.approx(math.log(2))


def test_lower_bound_needs_larger_sigma():
    with pytest.raises(ValueError):
        gsce_lower_bound(two_class(2.0, 1.0, 2.0), 0, 1)


def test_contour_empty_below_lower_bound():
    q = two_class(2.0)
    c_star = gsce_lower_bound(q, 0, 1)
    # a loss C on the (k, khat) pair corresponds to h_k - h_khat = -log(e^C - 1)
    below = contour_sphere(0, 1, q, -math.log(math.expm1(c_star * (1 - 1e-6))))
    above = contour_sphere(0, 1, q, -math.log(math.expm1(c_star * (1 + 1e-6))))
    assert below.variant == "empty"
    assert above.variant == "sphere"


def test_density_gsce_example():
    # B_kk = 2 a^2 = 1 and C = log 2 make the bracket exactly 1
    q = two_class(1 / math.sqrt(2))
    C = math.log(2)
    assert gsce_radius_sq(C, 0, 1, q) == pytest.approx(1.0)
    stats = PairLossStats(0, 1, 100, C, 1.0)
    assert density_gsce(C, stats, q, 3) == pytest.approx(100 * PHI0, rel=1e-12)
    double = PairLossStats(0, 1, 200, C, 1.0)
    assert density_gsce(C, double, q, 3) == pytest.approx(2 * density_gsce(C, stats, q, 3))


def test_density_gsce_vanishes_near_zero_loss():
    q = two_class(0.5, sigma_k=1.0, sigma_j=2.0)
    stats = PairLossStats(0, 1, 100, 0.01, 1.0)
    vals = [density_gsce(C, stats, q, 4) for C in (1e-2, 1e-8, 1e-32, 1e-200)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_density_gsce_errors():
    q = two_class(2.0)
    stats = PairLossStats(0, 1, 10, 1.0, 1.0)
    with pytest.raises(ValueError):
        density_gsce(1e-5, stats, q, 3)
    with pytest.raises(ValueError):
        density_gsce(1.0, stats, QuadraticLogitParams(np.eye(2), 1.0, 0.0), 3)
    with pytest.raises(ValueError):
        density_gsce(1.0, stats, q, 1)


def test_radius_growth_rate():
    q = two_class(0.5, sigma_k=1.0, sigma_j=2.0)
    C = 1e-6
    ratio = gsce_radius_sq(C, 0, 1, q) / abs(math.log(C))
    assert abs(ratio - 1.0) < 0.05


def test_density_mmc_examples():
    st_ = ClassLossStats(0, 100, 1.0, 1.0)
    assert density_mmc(1.0, st_, 2) == pytest.approx(100 * PHI0, rel=1e-12)
    sym = ClassLossStats(0, 100, 2.5, 1.0)
    assert density_mmc(1.0, sym, 3) / density_mmc(4.0, sym, 3) == pytest.approx(4.0)


def test_density_mmc_errors():
    st_ = ClassLossStats(0, 10, 1.0, 1.0)
    with pytest.raises(ValueError):
        density_mmc(0.0, st_, 3)
    with pytest.raises(ValueError):
        density_mmc(1.0, ClassLossStats(0, 10, 1.0, 0.0), 3)


@given(Ck=st.floats(0.1, 50), S=st.floats(0.05, 10), d=st.integers(2, 64),
       a=st.floats(1e-3, 10), b=st.floats(1e-3, 10))
def test_density_mmc_decreasing_past_mean(Ck, S, d, a, b):
    st_ = ClassLossStats(0, 100, Ck, S)
    lo, hi = Ck + min(a, b), Ck + max(a, b) + 1e-3
    assert density_mmc(hi, st_, d) < density_mmc(lo, st_, d) or density_mmc(lo, st_, d) == 0.0


def test_area_constants():
    # area of the unit circle and sphere
    st_ = ClassLossStats(0, 1, 1.0, 1.0)
    raw, scaled = density_mmc(0.5, st_, 3), density_mmc(0.5, st_, 3, with_area=True)
    assert raw / scaled == pytest.approx(2 ** 2 * math.pi ** 1.5 / math.gamma(1.5))
    assert ball_volume(1.0, 3) == pytest.approx(4 / 3 * math.pi)


def test_shell_volumes():
    d, C, dC = 3, 2.0, 1e-4
    # for small bands the exact shell is the sphere area times the radial width dC/sqrt(2C)
    exact = mmc_shell_volume(C, dC, d, exact=True)
    area = 4 * math.pi * (2 * C)
    assert exact == pytest.approx(area * dC / math.sqrt(2 * C), rel=1e-3)
    assert mmc_shell_volume(C, dC, d) == pytest.approx(area * dC)


def test_empirical_empty_and_point_mass():
    vol = lambda C, dC: mmc_shell_volume(C, dC, 3)
    loss = lambda f, _: 0.5 * (f ** 2).sum(axis=1)
    empty = empirical_density(np.zeros((0, 3)), None, loss, 1.0, 0.1, vol)
    assert (empty.delta_n, empty.density) == (0, 0.0)
    z = np.zeros((7, 3))
    z[:, 0] = math.sqrt(2.0)
    res = empirical_density(z, None, loss, 1.0, 1e-9, vol)
    assert res.delta_n == 7
    # the band is half-open
    assert empirical_density(z, None, loss, 1.0 - 1e-3, 1e-3, vol).delta_n == 0


def test_empirical_rejects_degenerate_band():
    with pytest.raises(ValueError):
        empirical_density(np.zeros((2, 3)), None, lambda f, _: f[:, 0], 1.0, 0.1, lambda C, dC: 0.0)
    with pytest.raises(ValueError):
        empirical_density(np.zeros((2, 3)), None, lambda f, _: f[:, 0], 1.0, 0.0, lambda C, dC: 1.0)


def gaussian_loss_features(n, mu, Ck, Sk, rng):
    """Features whose MMC loss is N(Ck, Sk^2) (truncated at 0) with uniform directions."""
    d = len(mu)
    losses = rng.normal(Ck, Sk, size=4 * n)
    losses = losses[losses > 0][:n]
    u = rng.normal(size=(n, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return mu + np.sqrt(2 * losses)[:, None] * u


def test_empirical_matches_analytic_for_gaussian_losses():
    rng = np.random.default_rng(0)
    d = 3
    cs = generate_mm_centers(10.0, d, 2)
    Ck, Sk, n = 3.0, 1.0, 100_000
    z = gaussian_loss_features(n, cs.centers[0], Ck, Sk, rng)
    y = np.zeros(n, dtype=int)
    loss = lambda f, lab: 0.5 * ((f - cs.centers[lab]) ** 2).sum(axis=1)
    stats = fit_loss_stats(loss(z, y), y)[0]
    ratios = []
    for C in (2.0, 3.0, 4.0):
        emp = empirical_density(z, y, loss, C, 0.05 * stats.S,
                                lambda c, w: mmc_shell_volume(c, w, d)).density
        ratios.append(emp / density_mmc(C, stats, d))
    assert max(ratios) / min(ratios) < 1.10


def test_exact_volume_recovers_gaussian_density():
    # z ~ N(mu, I): the true density at loss C is (2 pi)^(-d/2) e^(-C) per sample
    rng = np.random.default_rng(1)
    d, n = 3, 100_000
    mu = generate_mm_centers(10.0, d, 2).centers[0]
    z = mu + rng.normal(size=(n, d))
    y = np.zeros(n, dtype=int)
    loss = lambda f, lab: 0.5 * ((f - mu) ** 2).sum(axis=1)
    for C in (0.5, 1.0, 2.0):
        emp = empirical_density(z, y, loss, C, 0.05, lambda c, w: mmc_shell_volume(c, w, d, exact=True))
        true = n * (2 * math.pi) ** (-d / 2) * math.exp(-(C + 0.025))
        assert emp.density == pytest.approx(true, rel=0.10)


def test_fit_loss_stats_examples():
    st_ = fit_loss_stats([0.0, 2.0], [1, 1])[1]
    assert (st_.N, st_.C, st_.S) == (2, 1.0, pytest.approx(math.sqrt(2)))
    same = fit_loss_stats([3.0, 3.0, 3.0], [0, 0, 0])[0]
    assert same.S == 0 and same.degenerate
    single = fit_loss_stats([1.0], [4])[4]
    assert math.isnan(single.S) and single.degenerate


def test_fit_loss_stats_matches_streaming():
    rng = np.random.default_rng(2)
    losses = rng.gamma(2.0, size=500)
    labels = rng.integers(0, 3, 500)
    runner = (labels + 1 + rng.integers(0, 2, 500)) % 3
    out = fit_loss_stats(losses, labels, runner)
    for (k, kh), st_ in out.items():
        n, mean, m2 = 0, 0.0, 0.0
        for v, a, b in zip(losses, labels, runner):
            if (a, b) == (k, kh):
                n += 1
                delta = v - mean
                mean += delta / n
                m2 += delta * (v - mean)
        assert st_.N == n
        assert st_.C == pytest.approx(mean, rel=1e-12)
        assert st_.S == pytest.approx(math.sqrt(m2 / (n - 1)), rel=1e-10)


@given(seed=st.integers(0, 1000))
def test_lse_gap_nonnegative(seed):
    rng = np.random.default_rng(seed)
    h = rng.normal(scale=5, size=(10, 6))
    y = rng.integers(0, 6, 10)
    assert np.all(lse_gap(h, y) >= -1e-12)


def test_reports_serialise():
    rng = np.random.default_rng(3)
    cs = generate_mm_centers(5.0, 4, 3)
    y = np.repeat(np.arange(3), 50)
    z = cs.centers[y] + rng.normal(size=(150, 4))
    rep = mmc_density_report(z, y, cs.centers, [1.0, 2.0])
    doc = json.loads(rep.to_json())
    assert len(doc["groups"]) == 3
    assert len(doc["groups"][0]["analytic"]) == 2
    q = QuadraticLogitParams(cs.centers, [1.0, 2.0, 0.5], 0.0)
    grep = json.loads(gsce_density_report(z, y, q, [0.5, 1.0]).to_json())
    assert all("khat" in g for g in grep["groups"])
