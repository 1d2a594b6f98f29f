"""Minibatch Adam training, optionally on PGD adversarial batches."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .attacks import AttackConfig, default_objective, pgd
from .datasets import Dataset
from .losses import Head, alp_upper_bound_holds
from .nn import MLP, Adam

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "wall_ms", "train_loss", "clean_acc")


@dataclass
class ATConfig:
    enabled: bool = False
    mode: str = "untargeted"
    pgd_steps: int = 10
    epsilon: float = 8 / 255
    step_size: float = 2 / 255


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay: float = 1.0
    seed: int = 0
    record_wall_time: bool = False
    at: ATConfig = field(default_factory=ATConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("epochs and batch_size must be positive, lr non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        allowed = {f.name for f in fields(cls)}
        extra = set(doc) - allowed
        if extra:
            raise ValueError(f"unknown train keys: {sorted(extra)}")
        if "at" in doc:
            at = dict(doc["at"])
            extra = set(at) - {f.name for f in fields(ATConfig)}
            if extra:
                raise ValueError(f"unknown train.at keys: {sorted(extra)}")
            doc["at"] = ATConfig(**at)
        return cls(**doc)


def accuracy(model: MLP, head: Head, ds: Dataset) -> float:
    if len(ds) == 0:
        return float("nan")
    pred = np.argmax(head.scores(model.features(ds.inputs)), axis=1)
    return float(np.mean(pred == ds.labels))


def _attack_batch(model, head, xb, yb, at: ATConfig, seed, epoch, idx):
    cfg = AttackConfig(family="PGD", mode=at.mode,
                       objective=default_objective(head, "PGD", at.mode),
                       epsilon=at.epsilon, step_size=at.step_size, steps=at.pgd_steps,
                       seed=seed * 1_000_003 + epoch)
    return pgd(model, head, xb, yb, cfg, indices=idx).x_adv


def train(model: MLP, head: Head, dataset: Dataset, cfg: TrainConfig,
          eval_set: Optional[Dataset] = None) -> list:
    """Train ``model`` and ``head`` in place; returns one record per epoch.

    ``clean_acc`` is measured on ``eval_set`` (the training set by default)
    after each epoch. With ``cfg.at.enabled`` every minibatch is replaced by
    its PGD counterpart before the gradient step.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params + head.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
               eps=cfg.eps)
    eval_set = dataset if eval_set is None else eval_set
    history = []
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(dataset))
        total, count, alp_checks = 0.0, 0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = dataset.inputs[idx], dataset.labels[idx]
            if cfg.at.enabled:
                x_adv = _attack_batch(model, head, xb, yb, cfg.at, cfg.seed, epoch, idx)
                if head.centers is not None:
                    z_clean = model.features(xb)
                    z_adv = model.features(x_adv)
                    anchor = head.centers.centers[yb]
                    if not alp_upper_bound_holds(z_clean, z_adv, anchor).all():
                        raise AssertionError(f"ALP upper bound violated in epoch {epoch}")
                    alp_checks += 1
                xb = x_adv
            z = model.forward(xb)
            loss, dz, head_grads = head.loss(z, yb)
            n = len(yb)
            mean_loss = float(loss.mean())
            if not np.isfinite(mean_loss):
                raise FloatingPointError(
                    f"non-finite loss {mean_loss} at epoch {epoch}, batch offset {start}; "
                    f"max |z| = {np.abs(z).max():.3e}")
            model.backward(dz / n)
            opt.step(model.grads + [g / n for g in head_grads])
            total += float(loss.sum())
            count += n
        opt.lr *= cfg.lr_decay
        rec = {
            "epoch": epoch,
            "wall_ms": round((time.perf_counter() - t0) * 1e3, 3) if cfg.record_wall_time else None,
            "train_loss": total / max(count, 1),
            "clean_acc": accuracy(model, head, eval_set),
        }
        if cfg.at.enabled:
            rec["alp_bound_batches"] = alp_checks
        log.info("epoch %d loss %.5f acc %.4f", epoch, rec["train_loss"], rec["clean_acc"])
        history.append(rec)
    return history


def adversarial_train(model: MLP, head: Head, dataset: Dataset, cfg: TrainConfig,
                      eval_set: Optional[Dataset] = None) -> list:
    if not cfg.at.enabled:
        raise ValueError("adversarial_train needs cfg.at.enabled")
    return train(model, head, dataset, cfg, eval_set)


def write_history_csv(history: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for rec in history:
            w.writerow([rec["epoch"], "" if rec["wall_ms"] is None else rec["wall_ms"],
                        repr(rec["train_loss"]), repr(rec["clean_acc"])])
