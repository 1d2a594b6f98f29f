"""
Training with SCE and MMC, then attacking
=========================================

A small MLP on 10-class Gaussian blobs. Both heads start from the same
weights and see the same minibatches; only the loss differs. PGD is run
with the standard cross-entropy objective and with the adaptive one
that targets the center geometry.
"""
import numpy as np

from mmclab.attacks import AttackConfig, evaluate_robustness
from mmclab.datasets import make_blobs
from mmclab.losses import Head, LossSpec
from mmclab.nn import MLP
from mmclab.trainer import ATConfig, TrainConfig, accuracy, train

L, P, D = 10, 32, 10
tr = make_blobs(L, P, 200, 0.1, seed=0)
te = make_blobs(L, P, 100, 0.1, seed=1000, split="test")

models = {}
for kind in ("SCE", "MMC"):
    model = MLP([P, 64, 64, D], seed=0)
    head = Head(LossSpec(kind, c_mm=10.0), L, D, seed=0)
    hist = train(model, head, tr, TrainConfig(epochs=60, seed=0), eval_set=te)
    models[kind] = (model, head)
    print("%s: final train loss %.4f, test accuracy %.1f%%"
          % (kind, hist[-1]["train_loss"], 100 * hist[-1]["clean_acc"]))

eps = 0.04
for kind, (model, head) in models.items():
    for obj in ("standard", "auto"):
        cfg = AttackConfig(objective=obj, epsilon=eps, step_size=eps / 4, steps=10)
        rep = evaluate_robustness(model, head, te, cfg)
        print("%s  PGD10 eps=%.2f objective=%-8s robust accuracy %.1f%%"
              % (kind, eps, obj, 100 * rep.adversarial_accuracy))
# "auto" picks the adaptive objective for MMC heads and cross-entropy for SCE

# noise is not an adversary, but still worth a look
for kind, (model, head) in models.items():
    rep = evaluate_robustness(model, head, te, AttackConfig(family="NOISE", noise_sigma=0.05))
    print("%s  Gaussian noise 0.05: accuracy %.1f%%" % (kind, 100 * rep.adversarial_accuracy))

# adversarial training: every minibatch replaced by its PGD version
model = MLP([P, 64, 64, D], seed=0)
head = Head(LossSpec("MMC", c_mm=10.0), L, D, seed=0)
at = ATConfig(enabled=True, pgd_steps=5, epsilon=0.08, step_size=0.02)
hist = train(model, head, tr, TrainConfig(epochs=20, seed=0, at=at), eval_set=te)
cfg = AttackConfig(objective="auto", epsilon=0.08, step_size=0.02, steps=10)
print("MMC + AT: clean %.1f%%, PGD10 eps=0.08 %.1f%%"
      % (100 * accuracy(model, head, te), 100 * evaluate_robustness(model, head, te, cfg).adversarial_accuracy))
