"""
Loss contours and sample density
================================

For quadratic logits the set of features with a fixed loss is a sphere,
and its radius grows like |log C| as the loss C goes to zero. Under the
MMC loss the contours are spheres around the class center.
"""
import math

import numpy as np

from mmclab.density import (contour_sphere, density_mmc, empirical_density, fit_loss_stats,
                            gsce_lower_bound, gsce_radius_sq, mmc_shell_volume)
from mmclab.geometry import generate_mm_centers
from mmclab.losses import QuadraticLogitParams, quadratic_logits

# two classes, unequal widths
q = QuadraticLogitParams(np.array([[2.0, 0.0], [0.0, 0.0]]), [2.0, 1.0], 0.0)
sol = contour_sphere(0, 1, q, 0.0)
print("h_0 - h_1 = 0 on a %s, center %s, radius^2 %.3f" % (sol.variant, sol.center, sol.radius_sq))

# check a few points on it
t = np.linspace(0, 2 * np.pi, 7)
pts = sol.center + math.sqrt(sol.radius_sq) * np.c_[np.cos(t), np.sin(t)]
h = quadratic_logits(pts, q)
print("h_0 - h_1 on the contour:", np.round(h[:, 0] - h[:, 1], 12))

# no feature can push the loss below C*
c_star = gsce_lower_bound(q, 0, 1)
print("C* = %.6e = log(1 + e^-8) = %.6e" % (c_star, math.log1p(math.exp(-8))))

# radius^2 / |log C| tends to 1 / |sigma_0 - sigma_1| as C -> 0
q2 = QuadraticLogitParams(np.array([[0.5, 0.0], [0.0, 0.0]]), [1.0, 2.0], 0.0)
for C in (1e-2, 1e-4, 1e-6, 1e-9):
    print("C = %g  radius^2/|log C| = %.4f" % (C, gsce_radius_sq(C, 0, 1, q2) / abs(math.log(C))))

# Monte Carlo: count MMC losses in thin bands and compare with the
# closed form, which models the loss as Gaussian
rng = np.random.default_rng(0)
cs = generate_mm_centers(10.0, 3, 4)
y = np.arange(100_000) % 4
z = cs.centers[y] + rng.standard_normal((len(y), 3))
losses = 0.5 * ((z - cs.centers[y]) ** 2).sum(axis=1)
st = fit_loss_stats(losses, y)[0]
print("class 0 loss mean %.3f sd %.3f" % (st.C, st.S))
grid = (0.5, 1.0, 2.0)
emp = [empirical_density(losses[y == 0], None, lambda l, _: l, C, 0.05 * st.S,
                         lambda c, w: mmc_shell_volume(c, w, 3)).density for C in grid]
ana = [density_mmc(C, st, 3) for C in grid]
# compare shapes, relative to C = 1
for C, e, a in zip(grid, emp, ana):
    print("C = %.1f  empirical %.3f  closed form %.3f" % (C, e / emp[1], a / ana[1]))
# the loss here is chi-square, not Gaussian, so the two disagree in shape
