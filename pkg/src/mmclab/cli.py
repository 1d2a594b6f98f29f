"""Command line entry point.

    mmclab centers --cmm 10 --dim 256 --classes 10 --out centers.json
    mmclab train   --config exp.json --out runs/a
    mmclab attack  --model m.json --loss head.json --dataset exp.json --attacks atk.json --out dir
    mmclab density --model m.json --loss head.json --dataset exp.json --grid 0.5,1,2
    mmclab run     --config exp.json --out runs/a --seed 3

Exit codes: 0 success, 2 invalid configuration or arguments, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .attacks import AttackConfig, evaluate_robustness
from .experiment import (ConfigError, build_datasets, density_report, load_config,
                         parse_dataset, run_experiment)
from .geometry import generate_mm_centers
from .losses import Head
from .nn import MLP

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("mmclab")


class UsageError(Exception):
    pass


def _read_json(path, what):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"{what} not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})")


def _load_pair(args):
    try:
        model = MLP.load(args.model)
        head = Head.from_dict(_read_json(args.loss, "loss checkpoint"))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad checkpoint: {exc}")
    if model.feature_dim != head.feature_dim:
        raise ConfigError(f"model emits d={model.feature_dim} but the loss expects "
                          f"d={head.feature_dim}")
    return model, head


def _dataset_from(path, seed):
    """Datasets from either a full experiment config or a bare dataset spec."""
    doc = _read_json(path, "dataset spec")
    if isinstance(doc, dict) and "dataset" in doc:
        seed = int(doc.get("seed", seed))
        doc = doc["dataset"]
    spec = parse_dataset(doc, Path(path).parent)
    return build_datasets(spec, seed)


def cmd_centers(args) -> int:
    try:
        cs = generate_mm_centers(args.cmm, args.dim, args.classes)
    except ValueError as exc:
        raise ConfigError(str(exc))
    text = json.dumps(cs.to_dict(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        log.info("wrote %d centers to %s", cs.num_classes, args.out)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _experiment(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    out = args.out or cfg.out
    if not out:
        raise ConfigError("no output directory: pass --out or set 'out' in the config")
    cfg.out = out
    return cfg, out


def cmd_run(args) -> int:
    cfg, out = _experiment(args)
    table = run_experiment(cfg, out)
    sys.stdout.write((Path(out) / "summary.txt").read_text())
    log.info("%d losses done, reports in %s", len(table), out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, out = _experiment(args)
    run_experiment(cfg, out, stages=("train",))
    sys.stdout.write((Path(out) / "summary.txt").read_text())
    return EXIT_OK


def cmd_attack(args) -> int:
    model, head = _load_pair(args)
    _, test = _dataset_from(args.dataset, args.seed)
    if test.input_dim != model.input_dim:
        raise ConfigError(f"dataset has p={test.input_dim}, model expects p={model.input_dim}")
    doc = _read_json(args.attacks, "attack list")
    docs = doc if isinstance(doc, list) else [doc]
    try:
        attacks = [AttackConfig.from_dict(d) for d in docs]
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc))
    if args.limit is not None:
        test = test.subset(slice(0, args.limit))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for acfg in attacks:
        rep = evaluate_robustness(model, head, test, acfg, workers=args.workers)
        rep.write_csv(out / f"robustness_{acfg.label}.csv")
        s = rep.summary()
        print(f"{acfg.label}: clean {100 * s['clean_accuracy']:.2f}%  "
              f"adversarial {100 * s['adversarial_accuracy']:.2f}%  "
              f"success {100 * s['success_rate']:.2f}%")
    return EXIT_OK


def cmd_density(args) -> int:
    model, head = _load_pair(args)
    train_set, _ = _dataset_from(args.dataset, args.seed)
    try:
        grid = [float(c) for c in args.grid.split(",") if c.strip()]
    except ValueError:
        raise ConfigError(f"bad --grid {args.grid!r}; expected comma-separated numbers")
    if not grid or min(grid) <= 0:
        raise ConfigError("--grid needs positive loss values")
    rep = density_report(model, head, train_set, grid, args.dC)
    if rep is None:
        raise ConfigError(f"no closed-form density for loss kind {head.spec.kind}")
    text = rep.to_json() + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmclab", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("centers", help="write Max-Mahalanobis centers as JSON")
    c.add_argument("--cmm", type=float, required=True, help="center norm")
    c.add_argument("--dim", type=int, required=True, help="feature dimension d")
    c.add_argument("--classes", type=int, required=True, help="number of classes L")
    c.add_argument("--out", help="output file (stdout if omitted)")
    c.set_defaults(func=cmd_centers)

    for name, func, text in (("run", cmd_run, "train, attack and measure density"),
                             ("train", cmd_train, "train every configured loss")):
        r = sub.add_parser(name, help=text)
        r.add_argument("--config", required=True)
        r.add_argument("--out")
        r.add_argument("--seed", type=int)
        r.set_defaults(func=func)

    for name, func in (("attack", cmd_attack), ("density", cmd_density)):
        a = sub.add_parser(name)
        a.add_argument("--model", required=True, help="model.json checkpoint")
        a.add_argument("--loss", required=True, help="head.json written by train/run")
        a.add_argument("--dataset", required=True,
                       help="experiment config or bare dataset spec (JSON)")
        a.add_argument("--seed", type=int, default=0, help="data seed for blob datasets")
        a.set_defaults(func=func)
        if name == "attack":
            a.add_argument("--attacks", required=True, help="attack config or list (JSON)")
            a.add_argument("--out", required=True)
            a.add_argument("--limit", type=int, help="attack only the first N test examples")
            a.add_argument("--workers", type=int, default=1)
        else:
            a.add_argument("--grid", required=True, help="comma-separated loss values")
            a.add_argument("--dC", type=float, help="band width (default 0.05 * S per group)")
            a.add_argument("--out", help="output file (stdout if omitted)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
