"""Command-line entry point: ``lpkd <subcommand> [flags]``.

Exit status is 0 on success, 1 for configuration or usage errors and 2 for
runtime failures (divergence, unreadable files, shape mismatches).
"""

import os

# BLAS pools are sized when numpy loads, so this has to run first
_THREADS = os.environ.get("LPKD_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _THREADS)

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import archs, bench, plots  # noqa: E402
from .checks import gradcheck_suite  # noqa: E402
from .config import ConfigError, dump_config, parse_config, train_config  # noqa: E402
from .data import gen_blobs, load_mnist, split_validation  # noqa: E402
from .nn import init_network, load_checkpoint, save_checkpoint  # noqa: E402
from .trainer import (evaluate, export_embeddings, one_nn_accuracy,  # noqa: E402
                      sweep, train_student, train_teacher)

log = logging.getLogger("lpkd")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- data and models ------------------------------------------------------------

def load_data(cfg):
    """``(train, val, test)`` for the configured dataset."""
    if cfg["dataset"] == "blobs":
        ds = gen_blobs(cfg["blobs_classes"], cfg["blobs_per_class"], cfg["blobs_dim"],
                       cfg["blobs_spread"], seed=0)
        n = len(ds)
        a, b = int(0.6 * n), int(0.8 * n)
        return ds.take(slice(0, a), "train"), ds.take(slice(a, b), "val"), \
            ds.take(slice(b, n), "test")
    full = load_mnist(cfg["mnist_dir"], "train")
    test = load_mnist(cfg["mnist_dir"], "test")
    train, val = split_validation(full, cfg["val_size"]) if cfg["val_size"] else \
        (full, full.take(slice(0, 0), "val"))
    if cfg["train_size"]:
        train = train.take(slice(0, min(cfg["train_size"], len(train))))
    return train, val, test


def build_net(cfg, which, ds, seed):
    name = cfg[f"{which}_arch"]
    try:
        specs, shape, tap = archs.build(name, ds.input_shape[0] if len(ds.input_shape) == 1
                                        else None, ds.class_count)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{which}_arch", str(exc)) from None
    if tuple(shape) != tuple(ds.input_shape):
        raise ConfigError(f"{which}_arch",
                          f"{name} takes inputs {shape}, dataset has {ds.input_shape}")
    return init_network(specs, shape, seed, scheme=cfg["init"], tap_index=tap)


def load_teacher(cfg):
    path = cfg["teacher_ckpt"]
    if not path:
        raise ConfigError("teacher_ckpt", "a teacher checkpoint is required")
    return load_checkpoint(path)


# -- subcommands ----------------------------------------------------------------

def _prepare(args, out):
    cfg = parse_config(args.config, _overrides(args))
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(dump_config(cfg))
    return cfg


def _test_summary(net, test, record):
    result = evaluate(net, test)
    record.summary["test_acc"] = result.accuracy
    record.summary["test_per_class"] = result.to_dict()["per_class"]
    return result


def cmd_train_teacher(args, out):
    cfg = _prepare(args, out)
    train, val, test = load_data(cfg)
    net = build_net(cfg, "teacher", train, cfg["seed"])
    best, record = train_teacher(net, train, val, train_config(cfg))
    result = _test_summary(best, test, record)
    save_checkpoint(best, out / "teacher.ckpt")
    record.write_jsonl(out / "run.jsonl")
    plots.training_curves({"teacher": record}, out / "curves.png")
    print(f"teacher test accuracy {result.accuracy:.4f}")
    return 0


def cmd_train_student(args, out):
    cfg = _prepare(args, out)
    train, val, test = load_data(cfg)
    teacher = load_teacher(cfg)
    student = build_net(cfg, "student", train, cfg["seed"])
    best, record, adapter = train_student(student, teacher, train, val, train_config(cfg))
    result = _test_summary(best, test, record)
    save_checkpoint(best, out / "student.ckpt")
    if adapter is not None:
        np.savez(out / "adapter.npz", weight=adapter.weight, bias=adapter.bias)
    record.write_jsonl(out / "run.jsonl")
    plots.training_curves({cfg["strategy"]: record}, out / "curves.png")
    print(f"{cfg['strategy']} student test accuracy {result.accuracy:.4f}")
    return 0


def _split(cfg, name):
    train, val, test = load_data(cfg)
    return {"train": train, "val": val, "test": test}[name]


def cmd_eval(args, out):
    cfg = _prepare(args, out)
    net = load_checkpoint(args.ckpt)
    ds = _split(cfg, args.split)
    result = evaluate(net, ds)
    (out / "eval.json").write_text(json.dumps(
        {"checkpoint": str(args.ckpt), "split": args.split, **result.to_dict()}, indent=2))
    print(f"accuracy {result.accuracy:.4f} on {len(ds)} {args.split} samples")
    return 0


def cmd_export_embeddings(args, out):
    cfg = _prepare(args, out)
    net = load_checkpoint(args.ckpt)
    train, val, test = load_data(cfg)
    ds = {"train": train, "val": val, "test": test}[args.split]
    _, labels, feats = export_embeddings(net, ds, args.layer, out / "embeddings.csv")
    plots.embedding_scatter(feats, labels, out / "embeddings.png",
                            title=f"{Path(args.ckpt).stem} layer {args.layer}")
    ref_ids, ref_labels, ref_feats = export_embeddings(net, train, args.layer)
    acc = one_nn_accuracy(ref_feats, ref_labels, feats, labels)
    (out / "embeddings.json").write_text(json.dumps(
        {"layer": args.layer, "split": args.split, "dims": int(feats.shape[1]),
         "one_nn_accuracy": acc}, indent=2))
    print(f"wrote {len(labels)} x {feats.shape[1]} features; 1-NN accuracy {acc:.4f}")
    return 0


def _floats(text, key):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(key, f"expected a comma-separated list, got {text!r}") from None


def cmd_sweep(args, out):
    cfg = _prepare(args, out)
    train, val, _ = load_data(cfg)
    teacher = load_teacher(cfg)
    ks = [int(k) for k in _floats(args.ks, "ks")]
    gammas = _floats(args.gammas, "gammas")
    bad = [k for k in ks if k < 1 or (k + 1 > cfg["m"])]
    if bad:
        raise ConfigError("ks", f"k values {bad} need 1 <= k < m={cfg['m']}")
    if any(g < 0 for g in gammas):
        raise ConfigError("gammas", "gamma values must be nonnegative")
    rows = sweep(lambda: build_net(cfg, "student", train, cfg["seed"]), teacher, train, val,
                 train_config(cfg), ks, gammas, out / "sweep.csv")
    plots.sweep_heatmap(rows, out / "sweep.png")
    for r in rows:
        print(f"k={r['k']:<3d} gamma={r['gamma']:<6g} val_acc={r['val_acc']:.4f}")
    return 0


def cmd_bench(args, out):
    out.mkdir(parents=True, exist_ok=True)
    k = args.k if args.k is not None else 5
    report = bench.bridge_report(args.m, args.dS, args.dT, k, args.reps,
                                 measure=not args.no_measure)
    (out / "bench.json").write_text(report.to_json())
    table = report.table()
    if args.scaling:
        points = []
        for mult_m, mult_d in ((1, 1), (1, 2), (2, 1), (1, 4), (4, 1)):
            m, ds_, dt = args.m * mult_m, args.dS * mult_d, args.dT * mult_d
            model = bench.bridge_cost_model(m, ds_, dt, k)
            for strategy, ops in (("lp", model.lp), ("fitnet", model.fitnet)):
                t = bench.measure_bridge(m, ds_, dt, k, strategy, args.reps)
                points.append({"strategy": strategy, "m": m, "d_s": ds_, "d_t": dt,
                               "ops": ops, "median": t.median, "spread": t.spread})
        (out / "bench_scaling.json").write_text(json.dumps(points, indent=2))
        plots.bench_scaling(points, out / "bench_scaling.png")
    (out / "bench.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_gradcheck(args, out):
    out.mkdir(parents=True, exist_ok=True)
    report = gradcheck_suite(args.instances, args.seed or 0, args.step, args.tolerance)
    (out / "gradcheck.json").write_text(json.dumps(
        {"tolerance": report.tolerance, "max_error": report.max_error,
         "failures": report.failures, "checks": len(report.errors)}, indent=2))
    print(f"{len(report.errors)} gradient checks, max relative error "
          f"{report.max_error:.3e} (tolerance {report.tolerance:g})")
    for name, err in sorted(report.failures.items()):
        print(f"FAIL {name}: {err:.3e}")
    return 0 if report.ok else 2


# -- argument parsing -------------------------------------------------------------

OVERRIDE_FLAGS = {
    "seed": "seed", "strategy": "strategy", "k": "k", "gamma": "gamma", "lam": "lambda",
    "tau": "tau", "m": "m", "epochs": "epochs", "mnist_dir": "mnist_dir",
    "teacher_ckpt": "teacher_ckpt",
}


def _overrides(args):
    out = {}
    for pair in args.set or []:
        if "=" not in pair:
            raise ConfigError(pair, "expected --set key=value")
        key, value = pair.split("=", 1)
        out[key.strip()] = value
    for attr, key in OVERRIDE_FLAGS.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = str(value)
    return out


def build_parser():
    p = _Parser(prog="lpkd", description="Teacher-student distillation with a locality "
                                         "preserving loss.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, run=True):
        sp.add_argument("--out", type=Path, default=Path("runs"),
                        help="output directory (default: runs)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("-v", "--verbose", action="store_true")
        if not run:
            return
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
        sp.add_argument("--strategy", choices=("bp", "kd", "fitnet", "lp"))
        sp.add_argument("--k", type=int)
        sp.add_argument("--gamma", type=float)
        sp.add_argument("--lambda", dest="lam", type=float)
        sp.add_argument("--tau", type=float)
        sp.add_argument("--m", type=int, help="mini-batch size")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--mnist-dir")
        sp.add_argument("--teacher-ckpt")

    sp = sub.add_parser("train-teacher", help="train a teacher with cross-entropy")
    common(sp)
    sp.set_defaults(func=cmd_train_teacher)

    sp = sub.add_parser("train-student", help="train a student from a frozen teacher")
    common(sp)
    sp.set_defaults(func=cmd_train_student)

    sp = sub.add_parser("eval", help="accuracy of a checkpoint")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("export-embeddings", help="write one layer's features as CSV")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--layer", default="penultimate",
                    help="penultimate, tap, or a layer index")
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.set_defaults(func=cmd_export_embeddings)

    sp = sub.add_parser("sweep", help="train LP students over a k x gamma grid")
    common(sp)
    sp.add_argument("--ks", default="1,3,5,10")
    sp.add_argument("--gammas", default="0,0.1,1,10")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("bench", help="analytic and measured bridge cost")
    common(sp, run=False)
    sp.add_argument("--m", type=int, default=128)
    sp.add_argument("--dS", type=int, default=5120)
    sp.add_argument("--dT", type=int, default=6912)
    sp.add_argument("--k", type=int)
    sp.add_argument("--reps", type=int, default=5)
    sp.add_argument("--no-measure", action="store_true", help="analytic model only")
    sp.add_argument("--scaling", action="store_true",
                    help="also time doubled and quadrupled sizes and plot them")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    common(sp, run=False)
    sp.add_argument("--instances", type=int, default=20)
    sp.add_argument("--step", type=float, default=1e-3)
    sp.add_argument("--tolerance", type=float, default=1e-3)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"lpkd: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "bench" and (args.reps < 5 or min(args.m, args.dS, args.dT) < 1):
        print("lpkd: error: bench needs --reps >= 5 and positive sizes", file=sys.stderr)
        return 1
    try:
        return args.func(args, args.out)
    except ConfigError as exc:
        print(f"lpkd: config error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"lpkd: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
