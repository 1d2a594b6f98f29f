"""
Losses on the feature layer
===========================

Softmax cross-entropy with linear logits is a special case of the
quadratic-logit family, and the MMC loss drops the softmax entirely and
just pulls features to their preassigned center.
"""
import numpy as np

from mmclab.geometry import generate_mm_centers
from mmclab.losses import (QuadraticLogitParams, gsce_loss, mmc_loss, mmlda_loss,
                           quadratic_logits, sce_loss)

rng = np.random.default_rng(0)
L, d = 5, 8
W = rng.normal(size=(L, d))
b = rng.normal(size=L)
z = rng.normal(size=(4, d))
y = np.array([0, 1, 2, 3])

# SCE as a quadratic-logit loss: mu = W/2, sigma = 1, bias b + |W|^2/4
q = QuadraticLogitParams.from_linear(W, b)
print("linear logits:   ", np.round(z @ W.T + b, 6)[0])
print("quadratic logits:", np.round(quadratic_logits(z, q), 6)[0])
print("max loss gap:", np.abs(sce_loss(z @ W.T + b, y)[0] - gsce_loss(z, y, q)[0]).max())

# MMC: half squared distance to the fixed center of the true class
cs = generate_mm_centers(10.0, d, L)
loss, dz = mmc_loss(z, y, cs)
print("MMC loss:", np.round(loss, 3))
print("gradient is z - mu_y:", np.allclose(dz, z - cs.centers[y]))

# features sitting on their center cost nothing
print("MMC at the centers:", mmc_loss(cs.centers, np.arange(L), cs)[0])

# MMLDA: softmax over -|z - mu|^2 / 2; the distance and the expanded
# inner-product forms agree
a = mmlda_loss(z, y, cs, form="distance")[0]
bb = mmlda_loss(z, y, cs, form="inner")[0]
print("MMLDA forms differ by", np.abs(a - bb).max())
