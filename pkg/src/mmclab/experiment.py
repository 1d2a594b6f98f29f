"""Config-driven experiments: train each loss, attack it, measure density.

A config is a JSON object::

    {
      "seed": 0,
      "out": "runs/toy",
      "dataset": {"kind": "blobs", "classes": 10, "dim": 32,
                  "train_per_class": 200, "test_per_class": 100, "spread": 0.1},
      "model": {"hidden": [64, 64], "feature_dim": 10},
      "losses": [{"kind": "SCE"}, {"kind": "MMC", "c_mm": 10}],
      "train": {"epochs": 20, "batch_size": 64},
      "attacks": [{"family": "PGD", "objective": "ada_un1", "epsilon": 0.05}],
      "attack_examples": null,
      "density": {"grid": [0.5, 1.0, 2.0]},
      "workers": 1
    }

Unknown keys anywhere are errors. ``seed`` drives data generation, weight
initialisation and minibatch order; each attack keeps its own ``seed``.
"""
from __future__ import annotations

import hashlib
import json
import math
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy

from . import __version__
from .attacks import AttackConfig, evaluate_robustness
from .datasets import Dataset, load_idx, make_blobs
from .density import gsce_density_report, mmc_density_report
from .losses import CENTER_KINDS, Head, LossSpec, QuadraticLogitParams
from .nn import MLP
from .trainer import TrainConfig, train, write_history_csv

TOP_KEYS = {"seed", "out", "dataset", "model", "losses", "train", "attacks",
            "attack_examples", "density", "workers"}
BLOB_KEYS = {"kind", "classes", "dim", "train_per_class", "test_per_class", "spread", "radius"}
IDX_KEYS = {"kind", "classes", "train_images", "train_labels", "test_images", "test_labels",
            "max_train", "max_test"}
MODEL_KEYS = {"hidden", "feature_dim"}
DENSITY_KEYS = {"grid", "dC"}
TEST_SEED_OFFSET = 1000


class ConfigError(ValueError):
    pass


def _check_keys(doc, allowed, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a JSON object")
    extra = set(doc) - set(allowed)
    if extra:
        raise ConfigError(f"unknown {where} keys: {sorted(extra)}")


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: Optional[str] = None
    dataset: dict = field(default_factory=lambda: {"kind": "blobs"})
    model: dict = field(default_factory=lambda: {"hidden": [64, 64], "feature_dim": 10})
    losses: list = field(default_factory=list)
    train: TrainConfig = field(default_factory=TrainConfig)
    attacks: list = field(default_factory=list)
    attack_examples: Optional[int] = None
    density: Optional[dict] = None
    workers: int = 1

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        train.pop("seed")
        return {
            "seed": self.seed, "out": self.out, "dataset": self.dataset, "model": self.model,
            "losses": [dict(spec.to_dict(), name=name) for name, spec in self.losses],
            "train": train, "attacks": [a.to_dict() for a in self.attacks],
            "attack_examples": self.attack_examples, "density": self.density,
            "workers": self.workers,
        }

    def digest(self) -> str:
        """SHA-256 of the canonical config, ignoring the output directory."""
        doc = self.to_dict()
        doc.pop("out")
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def parse_dataset(doc: dict, base: Path) -> dict:
    kind = doc.get("kind") if isinstance(doc, dict) else None
    if kind == "blobs":
        _check_keys(doc, BLOB_KEYS, "dataset")
        out = {"kind": "blobs", "classes": 10, "dim": 32, "train_per_class": 200,
               "test_per_class": 100, "spread": 0.1, "radius": 0.4}
        out.update(doc)
        if out["classes"] < 2 or out["spread"] <= 0 or out["train_per_class"] < 1:
            raise ConfigError("blobs need classes >= 2, spread > 0, train_per_class >= 1")
        if out["classes"] > out["dim"] + 1:
            raise ConfigError("blobs need classes <= dim + 1")
        return out
    if kind == "idx":
        _check_keys(doc, IDX_KEYS, "dataset")
        out = {"kind": "idx", "classes": 10, "max_train": None, "max_test": None}
        out.update(doc)
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if key not in out:
                raise ConfigError(f"idx dataset needs {key!r}")
            path = Path(out[key])
            path = path if path.is_absolute() else base / path
            if not path.is_file():
                raise ConfigError(f"dataset file not found: {path}")
            out[key] = str(path)
        return out
    raise ConfigError(f"dataset kind must be 'blobs' or 'idx', got {kind!r}")


def parse_config(doc: dict, base=".") -> ExperimentConfig:
    """Validate a raw config object. Relative idx paths resolve against ``base``."""
    base = Path(base)
    _check_keys(doc, TOP_KEYS, "top-level")
    try:
        seed = int(doc.get("seed", 0))
        dataset = parse_dataset(doc.get("dataset", {"kind": "blobs"}), base)
        model = dict({"hidden": [64, 64], "feature_dim": 10}, **doc.get("model", {}))
        _check_keys(model, MODEL_KEYS, "model")
        if int(model["feature_dim"]) < 1 or any(int(h) < 1 for h in model["hidden"]):
            raise ConfigError("layer sizes must be positive")
        losses, names = [], set()
        for entry in doc.get("losses", []):
            entry = dict(entry)
            spec = LossSpec.from_dict({k: v for k, v in entry.items() if k != "name"})
            name = entry.get("name", spec.name)
            if name in names:
                raise ConfigError(f"duplicate loss name {name!r}; give each loss a 'name'")
            names.add(name)
            if spec.kind in CENTER_KINDS and dataset["classes"] > model["feature_dim"] + 1:
                raise ConfigError(f"{name}: {dataset['classes']} classes need "
                                  f"feature_dim >= {dataset['classes'] - 1}")
            losses.append((name, spec))
        if not losses:
            raise ConfigError("config lists no losses")
        train_doc = dict(doc.get("train", {}))
        if "seed" in train_doc:
            raise ConfigError("set the seed at the top level, not in 'train'")
        train = TrainConfig.from_dict(dict(train_doc, seed=seed))
        attacks = [AttackConfig.from_dict(a) for a in doc.get("attacks", [])]
        for a in attacks:
            if a.objective.startswith("ada_"):
                plain = [n for n, sp in losses if sp.kind not in CENTER_KINDS]
                if plain:
                    raise ConfigError(f"{a.label}: {a.objective} needs preset centers, but "
                                      f"{plain} have none; use objective 'auto'")
        if any(a.family == "ROTATE" for a in attacks) and dataset["kind"] != "idx":
            raise ConfigError("ROTATE attacks need an image dataset (kind 'idx')")
        labels = [a.label for a in attacks]
        if len(set(labels)) != len(labels):
            raise ConfigError("attack labels collide; give attacks distinct 'name's")
        density = doc.get("density")
        if density is not None:
            _check_keys(density, DENSITY_KEYS, "density")
            density = {"grid": [float(c) for c in density.get("grid", [])],
                       "dC": density.get("dC")}
            if not density["grid"] or min(density["grid"]) <= 0:
                raise ConfigError("density grid must be non-empty and positive")
        n_att = doc.get("attack_examples")
        workers = int(doc.get("workers", 1))
        if workers < 1 or (n_att is not None and int(n_att) < 0):
            raise ConfigError("workers must be >= 1 and attack_examples >= 0")
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(seed, doc.get("out"), dataset, model, losses, train, attacks,
                            None if n_att is None else int(n_att), density, workers)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(doc, path.parent)


def build_datasets(spec: dict, seed: int):
    """Return ``(train, test)`` for a validated dataset spec."""
    if spec["kind"] == "blobs":
        args = (spec["classes"], spec["dim"])
        tr = make_blobs(*args, spec["train_per_class"], spec["spread"], seed, spec["radius"])
        te = make_blobs(*args, spec["test_per_class"], spec["spread"], seed + TEST_SEED_OFFSET,
                        spec["radius"], split="test")
        return tr, te
    tr = load_idx(spec["train_images"], spec["train_labels"], spec["max_train"],
                  spec["classes"])
    te = load_idx(spec["test_images"], spec["test_labels"], spec["max_test"], spec["classes"],
                  split="test")
    return tr, te


def build_model(cfg: ExperimentConfig, input_dim: int, spec: LossSpec, num_classes: int):
    sizes = [input_dim] + [int(h) for h in cfg.model["hidden"]] + [int(cfg.model["feature_dim"])]
    model = MLP(sizes, seed=cfg.seed)
    head = Head(spec, num_classes, sizes[-1], seed=cfg.seed)
    return model, head


def density_report(model: MLP, head: Head, ds: Dataset, grid, dC=None):
    """Density report on ``ds`` features, or ``None`` for losses without a formula."""
    z = model.features(ds.inputs)
    kind = head.spec.kind
    if kind in CENTER_KINDS:
        return mmc_density_report(z, ds.labels, head.centers.centers, grid, dC, head.spec.name)
    if kind in ("GSCE", "LGM"):
        return gsce_density_report(z, ds.labels, head.quadratic_params(), grid, dC, kind)
    if kind == "SCE":
        q = QuadraticLogitParams.from_linear(head.state["W"], head.state["b"])
        return gsce_density_report(z, ds.labels, q, grid, dC, kind)
    return None


def versions() -> dict:
    return {"mmclab": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


class Manifest:
    """``manifest.json`` rewritten after every stage so failures leave a record."""

    def __init__(self, out: Path, cfg: ExperimentConfig):
        self.path = out / "manifest.json"
        self.doc = {"config_sha256": cfg.digest(), "seed": cfg.seed, "versions": versions(),
                    "argv": sys.argv[1:], "config": cfg.to_dict(), "status": "running",
                    "stages": []}
        self.flush()

    def stage(self, name, status, seconds, **extra):
        self.doc["stages"].append(dict({"stage": name, "status": status,
                                        "seconds": round(seconds, 3)}, **extra))
        self.flush()

    def finish(self, status, error=None):
        self.doc["status"] = status
        if error:
            self.doc["error"] = error
        self.flush()

    def flush(self):
        self.path.write_text(json.dumps(self.doc, indent=2) + "\n")


def _fmt_pct(x):
    return "nan" if not math.isfinite(x) else f"{100 * x:.2f}"


def write_summary(out: Path, table: dict, columns: list) -> None:
    """Accuracy (%) per loss and attack as CSV and aligned text."""
    header = ["loss", "clean"] + columns
    lines = [",".join(header)]
    for name, row in table.items():
        lines.append(",".join([name] + [_fmt_pct(row.get(c, float("nan")))
                                        for c in ["clean"] + columns]))
    (out / "summary.csv").write_text("\n".join(lines) + "\n")
    cells = [header] + [[name] + [_fmt_pct(row.get(c, float("nan")))
                                  for c in ["clean"] + columns] for name, row in table.items()]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    text = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
            for r in cells]
    (out / "summary.txt").write_text("\n".join(text) + "\n")


def run_experiment(cfg: ExperimentConfig, out, stages=("train", "attack", "density")) -> dict:
    """Execute the configured stages and write every report under ``out``.

    Per loss the directory ``out/<loss name>/`` receives ``history.csv``,
    ``model.json``, ``head.json``, ``robustness_<attack>.csv`` and
    ``density.json``. ``summary.csv``/``summary.txt`` and ``manifest.json``
    sit in ``out``. Returns the summary table. Exceptions propagate after the
    manifest records the failed stage.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out, cfg)
    table = {}
    try:
        t = time.perf_counter()
        train_set, test_set = build_datasets(cfg.dataset, cfg.seed)
        manifest.stage("data", "ok", time.perf_counter() - t,
                       train_size=len(train_set), test_size=len(test_set))
        attack_set = test_set
        if cfg.attack_examples is not None:
            attack_set = test_set.subset(np.arange(min(cfg.attack_examples, len(test_set))))
        for name, spec in cfg.losses:
            sub = out / name
            sub.mkdir(exist_ok=True)
            model, head = build_model(cfg, train_set.input_dim, spec, train_set.num_classes)
            row = table.setdefault(name, {})
            if "train" in stages:
                t = time.perf_counter()
                history = train(model, head, train_set, cfg.train, eval_set=test_set)
                write_history_csv(history, sub / "history.csv")
                model.save(sub / "model.json")
                (sub / "head.json").write_text(json.dumps(head.to_dict()) + "\n")
                row["clean"] = history[-1]["clean_acc"]
                manifest.stage(f"train:{name}", "ok", time.perf_counter() - t)
            if "attack" in stages:
                for acfg in cfg.attacks:
                    t = time.perf_counter()
                    rep = evaluate_robustness(model, head, attack_set, acfg, workers=cfg.workers)
                    rep.write_csv(sub / f"robustness_{acfg.label}.csv")
                    row[acfg.label] = rep.adversarial_accuracy
                    manifest.stage(f"attack:{name}:{acfg.label}", "ok", time.perf_counter() - t,
                                   summary=rep.summary())
            if "density" in stages and cfg.density is not None:
                t = time.perf_counter()
                rep = density_report(model, head, train_set, cfg.density["grid"],
                                     cfg.density["dC"])
                if rep is None:
                    manifest.stage(f"density:{name}", "skipped", time.perf_counter() - t,
                                   reason="no closed-form density for this loss")
                else:
                    (sub / "density.json").write_text(rep.to_json() + "\n")
                    manifest.stage(f"density:{name}", "ok", time.perf_counter() - t)
        write_summary(out, table, [a.label for a in cfg.attacks])
    except BaseException as exc:
        if table:
            write_summary(out, table, [a.label for a in cfg.attacks])
        manifest.finish("failed", f"{type(exc).__name__}: {exc}")
        raise
    manifest.finish("ok")
    return table
