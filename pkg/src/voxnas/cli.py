"""Command-line entry point: ``voxnas {gen,search,eval,sweep}``.

Exit codes: 0 success, 2 usage/config/input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import tempfile
import time
from dataclasses import dataclass

from . import dataset as dsmod
from . import net
from .errors import CheckpointError, DatasetFormatError, DivergedError, VoxnasError
from .search import BeamConfig, BeamSearch, TrainingEvaluator
from .trainer import TrainConfig, derive_seed, evaluate_accuracy

log = logging.getLogger("voxnas")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class ConfigError(VoxnasError, ValueError):
    pass


# config key -> (type, default)
CONFIG_KEYS = {
    "lr": (float, 0.01),
    "batch": (int, 32),
    "epochs": (int, 20),
    "momentum": (float, 0.9),
    "finetune_epochs": (int, 10),
    "K": (int, 1),
    "D": (int, 1),
    "epsilon": (float, 1e-4),
    "max_conv_layers": (int, 8),
    "max_filters": (int, 512),
    "max_expansions": (int, 50),
    "seed": (int, 0),
    "post_promotion_epochs": (int, 0),
    "activation": (str, "relu"),
}


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig
    beam: BeamConfig
    activation: str
    values: dict

    def to_text(self):
        return "".join(f"{k}={self.values[k]}\n" for k in CONFIG_KEYS)


def parse_config_text(text, source="<config>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = val
    return values


def build_config(file_values, overrides):
    """Merge defaults, file values and flag overrides, then validate everything."""
    merged = {k: default for k, (_, default) in CONFIG_KEYS.items()}
    for source in (file_values, overrides):
        for key, val in source.items():
            if key not in CONFIG_KEYS:
                raise ConfigError(f"unknown key {key!r}")
            if val is None:
                continue
            typ = CONFIG_KEYS[key][0]
            try:
                merged[key] = typ(val)
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {val!r} as {typ.__name__}") from None
    if merged["activation"] not in ("relu", "sigmoid"):
        raise ConfigError("activation must be relu or sigmoid")
    try:
        train = TrainConfig(merged["lr"], merged["batch"], merged["epochs"], merged["momentum"],
                            merged["seed"])
        beam = BeamConfig(
            beam_width=merged["K"], depth_limit=merged["D"],
            finetune_epochs=merged["finetune_epochs"], improvement_epsilon=merged["epsilon"],
            max_conv_layers=merged["max_conv_layers"], max_filters=merged["max_filters"],
            max_expansions=merged["max_expansions"], root_seed=merged["seed"],
            post_promotion_epochs=merged["post_promotion_epochs"],
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return RunConfig(train, beam, merged["activation"], merged)


def load_run_config(path, overrides):
    file_values = {}
    if path is not None:
        try:
            with open(path) as fh:
                file_values = parse_config_text(fh.read(), path)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return build_config(file_values, overrides)


class Staging:
    """Collects output files in a temp dir and moves them into place on commit."""

    def __init__(self, out_dir):
        self.out_dir = os.path.abspath(out_dir)
        parent = os.path.dirname(self.out_dir)
        os.makedirs(parent, exist_ok=True)
        self.tmp = tempfile.mkdtemp(prefix=".voxnas-", dir=parent)

    def path(self, name):
        return os.path.join(self.tmp, name)

    def write_text(self, name, text):
        with open(self.path(name), "w") as fh:
            fh.write(text)

    def commit(self):
        os.makedirs(self.out_dir, exist_ok=True)
        for name in sorted(os.listdir(self.tmp)):
            src = self.path(name)
            dst = os.path.join(self.out_dir, name)
            if os.path.isdir(dst) and not os.path.isdir(src):
                raise ConfigError(f"{dst} is a directory")
            if os.path.isdir(src):
                if os.path.exists(dst):
                    shutil.rmtree(dst)
            os.replace(src, dst)
        os.rmdir(self.tmp)

    def abort(self):
        shutil.rmtree(self.tmp, ignore_errors=True)


def _load_dataset(path):
    if not os.path.isdir(path):
        raise ConfigError(f"dataset directory not found: {path}")
    return dsmod.load_dataset(path)


def search_into(staging, prefix, ds, cfg):
    """Run one search and stage its artifacts; returns the summary dict."""
    t0 = time.perf_counter()
    x, y = ds.arrays("train")
    if len(y) < 2 * cfg.beam.beam_width:
        raise ConfigError(f"need at least {2 * cfg.beam.beam_width} training samples")
    evaluator = TrainingEvaluator((x, y), cfg.train, cfg.beam.finetune_epochs,
                                  cfg.beam.post_promotion_epochs)
    arch = net.initial_architecture(ds.input_dims, ds.num_classes, cfg.activation)
    result = BeamSearch(evaluator, cfg.beam).run(arch)
    seconds = time.perf_counter() - t0

    best, root = result.best, result.initial
    test = ds.arrays("test")
    summary = {
        "best_train_accuracy": best.train_accuracy,
        "test_accuracy": evaluate_accuracy(best.arch, best.params, test),
        "initial_train_accuracy": root.train_accuracy,
        "initial_test_accuracy": evaluate_accuracy(root.arch, root.params, test),
        "param_count": best.param_count,
        "rounds": result.rounds,
        "expansions": result.expansions,
        "stop_reason": result.stop_reason,
        "best_path": "/".join(best.path) or "root",
        "seconds": seconds,
    }
    if prefix:
        os.makedirs(staging.path(prefix), exist_ok=True)
    p = lambda name: os.path.join(prefix, name) if prefix else name
    staging.write_text(p("config.txt"), cfg.to_text())
    staging.write_text(p("search_log.csv"), result.log_csv())
    staging.write_text(p("best_arch.txt"), net.serialize_architecture(best.arch))
    staging.write_text(p("initial_history.csv"), evaluator.histories["root"].to_csv())
    net.save_checkpoint(best.arch, best.params, staging.path(p("best.ckpt")))
    net.save_checkpoint(root.arch, root.params, staging.path(p("initial.ckpt")))
    staging.write_text(p("summary.txt"), "".join(f"{k}={v}\n" for k, v in summary.items()))
    return summary


def cmd_gen(args):
    if args.grid < dsmod.MIN_GRID:
        raise ConfigError(f"--grid must be at least {dsmod.MIN_GRID}")
    if not 2 <= args.classes <= len(dsmod.SHAPE_FAMILIES):
        raise ConfigError(f"--classes must be in [2, {len(dsmod.SHAPE_FAMILIES)}]")
    if args.per_class < 2:
        raise ConfigError("--per-class must be at least 2")
    if os.path.exists(args.out) and (not os.path.isdir(args.out) or os.listdir(args.out)):
        raise ConfigError(f"{args.out} exists and is not an empty directory")
    ds = dsmod.generate_synthetic(args.classes, args.per_class, args.grid, args.seed)
    ds = dsmod.split(ds, args.train_fraction, derive_seed(args.seed, "split", 0))
    dsmod.save_dataset(ds, args.out)
    print(f"samples={len(ds)} train={int(ds.is_train.sum())} test={int((~ds.is_train).sum())}")
    return EXIT_OK


def _overrides(args):
    return {k: getattr(args, "cfg_" + k) for k in CONFIG_KEYS}


def cmd_search(args):
    cfg = load_run_config(args.config, _overrides(args))
    ds = _load_dataset(args.data)
    staging = Staging(args.out)
    try:
        summary = search_into(staging, "", ds, cfg)
        staging.commit()
    except BaseException:
        staging.abort()
        raise
    for k, v in summary.items():
        print(f"{k}={v}")
    return EXIT_OK


def cmd_eval(args):
    try:
        arch, params = net.load_checkpoint(args.checkpoint)
    except OSError as e:
        raise ConfigError(f"cannot read checkpoint: {e.strerror}") from None
    ds = _load_dataset(args.data)
    if arch.input_dims != ds.input_dims or arch.num_classes != ds.num_classes:
        raise ConfigError("checkpoint does not match the dataset's grid or class count")
    acc = evaluate_accuracy(arch, params, ds.arrays(args.split))
    print(f"accuracy={acc:.4f}")
    return EXIT_OK


def parse_int_list(text):
    """``"1,2,3"`` or ``"1..5"`` (inclusive), or a mix: ``"1,3..5"``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        lo, sep, hi = part.partition("..")
        try:
            out.extend(range(int(lo), int(hi) + 1) if sep else [int(part)])
        except ValueError:
            raise ConfigError(f"bad integer list {text!r}") from None
    if not out or min(out) < 1:
        raise ConfigError(f"integer list {text!r} must be non-empty and positive")
    return out


def cmd_sweep(args):
    base = load_run_config(args.config, _overrides(args))
    ks, ds_ = parse_int_list(args.K_list), parse_int_list(args.D_list)
    ds = _load_dataset(args.data)
    rows = ["K,D,train_acc,test_acc,param_count,seconds"]
    staging = Staging(args.out)
    try:
        for k in ks:
            for d in ds_:
                values = dict(base.values, K=k, D=d,
                              seed=derive_seed(base.values["seed"], f"sweep-K{k}-D{d}", 0))
                cfg = build_config({}, values)
                log.info("sweep K=%d D=%d", k, d)
                s = search_into(staging, f"K{k}_D{d}", ds, cfg)
                rows.append(f"{k},{d},{s['best_train_accuracy']!r},{s['test_accuracy']!r},"
                            f"{s['param_count']},{s['seconds']:.6f}")
        staging.write_text("sweep.csv", "\n".join(rows) + "\n")
        staging.commit()
    except BaseException:
        staging.abort()
        raise
    print("\n".join(rows))
    return EXIT_OK


def _add_config_flags(p):
    p.add_argument("--config", help="key=value config file")
    for key, (typ, _) in CONFIG_KEYS.items():
        p.add_argument(f"--{key.replace('_', '-')}", dest="cfg_" + key, type=typ,
                       help=f"override config key {key}")


def build_parser():
    parser = argparse.ArgumentParser(prog="voxnas", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic voxel dataset")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--grid", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("search", help="beam search from the initial network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run the search over a grid of K and D")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--K-list", dest="K_list", default="1,2,3")
    p.add_argument("--D-list", dest="D_list", default="1..5")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, DatasetFormatError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
