"""Command-line entry point: ``gen``, ``train``, ``eval`` and ``reproduce``.

Exit codes are a stable contract: 0 success, 2 usage, 3 IO/format, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import datagen as dg
from .evaluate import (RunReport, bias_leakage_probe, confusion, emit_report, features, grid_mi,
                       label_color_mi, predict)
from .layers import load_params, save_params
from .objectives import METHODS, TrainConfig, train

log = logging.getLogger("unlearn")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
DATA_ENV = "UNLEARN_DATA_DIR"
SWEEP_SIGMA2 = (0.02, 0.03, 0.04, 0.05)
SWEEP_METHODS = ("baseline", "confusion", "ours", "grayscale")
# desk scale: 2,000 train and 2,000 test images; batch 8 so lr 0.001 gets enough updates
DESK = dict(n_per_class=200, epochs=10, batch_size=8)
FULL = dict(epochs=20, batch_size=128)
MNIST_NAMES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# small helpers


def _data_root() -> Path:
    return Path(os.environ.get(DATA_ENV, "data"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def build_id() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(out_dir: Path, command: str, config: dict, inputs, outputs, started: float) -> Path:
    manifest = {
        "command": command,
        "build": build_id(),
        "config": config,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
        "wall_clock_s": round(time.time() - started, 3),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _load_dataset(path: Path) -> dg.BiasedDataset:
    try:
        return dg.load_dataset(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc


def _load_params(path: Path):
    try:
        return load_params(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read parameters {path}: {exc}") from exc


def parse_source(spec: str):
    """``synthetic:<n per class>`` or ``idx:<dir>`` or ``idx:<4 comma-separated paths>``."""
    kind, _, rest = spec.partition(":")
    if kind == "synthetic":
        try:
            n = int(rest)
        except ValueError:
            raise UsageError(f"synthetic source needs a count, got {rest!r}") from None
        if n < 1:
            raise UsageError("synthetic count must be positive")
        return "synthetic", n
    if kind == "idx":
        parts = rest.split(",") if "," in rest else [str(Path(rest) / name) for name in MNIST_NAMES]
        if len(parts) != 4 or not all(parts):
            raise UsageError("idx source needs a directory or train-img,train-lbl,test-img,test-lbl")
        return "idx", [Path(p) for p in parts]
    raise UsageError(f"unknown source {spec!r}; use synthetic:<n> or idx:<paths>")


def load_raw(source: str, seed: int, limit: int | None = None):
    kind, arg = parse_source(source)
    if kind == "synthetic":
        # disjoint glyph streams for the two splits
        train_raw, test_raw = dg.synth_digits(arg, 2 * seed), dg.synth_digits(arg, 2 * seed + 1)
    else:
        try:
            train_raw, test_raw = dg.load_idx(arg[0], arg[1]), dg.load_idx(arg[2], arg[3])
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read IDX files: {exc}") from exc
    if limit is not None:
        train_raw = train_raw.subset(np.arange(min(limit, len(train_raw))))
        test_raw = test_raw.subset(np.arange(min(limit, len(test_raw))))
    return train_raw, test_raw, (arg if kind == "idx" else [])


def _config_from(args, method=None) -> TrainConfig:
    defaults = TrainConfig()
    return TrainConfig(
        method=method or args.method,
        lam=defaults.lam if args.lam is None else args.lam,
        mu=defaults.mu if args.mu is None else args.mu,
        grl_scale=args.grl_scale, lr=args.lr, momentum=args.momentum, weight_decay=args.weight_decay,
        batch_size=args.batch_size, epochs=args.epochs, seed=args.seed, adversarial=args.adversarial,
        dtype=args.dtype,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    started = time.time()
    if not 0 < args.sigma2 < 1:
        raise UsageError(f"sigma2 must lie in (0, 1), got {args.sigma2}")
    out = Path(args.out) if args.out else _data_root()
    train_raw, test_raw, inputs = load_raw(args.source, args.seed, args.limit)
    train_set = dg.build_train_set(train_raw, args.sigma2, args.seed)
    test_set = dg.build_test_set(test_raw, args.sigma2, args.seed)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "train.bin", out / "test.bin"]
        dg.save_dataset(train_set, paths[0])
        dg.save_dataset(test_set, paths[1])
        if args.preview:
            paths.append(out / "train_preview.ppm")
            dg.write_ppm(paths[-1], dg.sample_sheet(train_set))
        write_manifest(out, "gen", {"sigma2": args.sigma2, "seed": args.seed, "source": args.source,
                                    "limit": args.limit}, inputs, paths, started)
    except OSError as exc:
        raise DataError(f"cannot write datasets to {out}: {exc}") from exc
    print(f"wrote {len(train_set)} train and {len(test_set)} test images to {out}")
    return EXIT_OK


def _warn_ignored(args) -> None:
    lam_unused = args.method in ("baseline", "grayscale", "grl_only", "grl-only")
    mu_unused = args.method in ("baseline", "grayscale")
    if args.lam is not None and lam_unused:
        log.warning("--lambda is ignored for method %s", args.method)
    if args.mu is not None and mu_unused:
        log.warning("--mu is ignored for method %s", args.method)


def cmd_train(args) -> int:
    started = time.time()
    _warn_ignored(args)
    try:
        cfg = _config_from(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    data = Path(args.data) if args.data else _data_root()
    train_path, test_path = data / "train.bin", data / "test.bin"
    train_set = _load_dataset(train_path)
    test_set = _load_dataset(test_path) if test_path.exists() else None
    cfg.sigma2 = train_set.sigma2
    print("config: " + " ".join(f"{k}={v}" for k, v in sorted(cfg.to_dict().items())))
    ps, report = train(train_set, test_set, cfg)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        save_params(ps, out / "params.bin")
        written = emit_report(report, out)
        outputs = [out / "params.bin", out / "params.bin.manifest", *written]
        inputs = [train_path] + ([test_path] if test_set is not None else [])
        write_manifest(out, "train", cfg.to_dict(), inputs, outputs, started)
    except OSError as exc:
        raise DataError(f"cannot write results to {out}: {exc}") from exc
    last = report.history[-1]
    print(f"final: epoch={last.epoch} train_acc={last.train_acc:.4f} "
          f"test_acc={'n/a' if last.test_acc is None else f'{last.test_acc:.4f}'}")
    return EXIT_OK


def _recolor_targets(spec: str | None) -> list[int]:
    if spec is None:
        return []
    if spec == "all":
        return list(range(len(dg.MEAN_COLORS)))
    try:
        k = int(spec)
    except ValueError:
        raise UsageError(f"--recolor takes a colour index or 'all', got {spec!r}") from None
    if not 0 <= k < len(dg.MEAN_COLORS):
        raise UsageError("--recolor index must be in [0, 9]")
    return [k]


def cmd_eval(args) -> int:
    started = time.time()
    recolor = _recolor_targets(args.recolor)
    params_path = Path(args.params)
    data = Path(args.data) if args.data else _data_root()
    split_path = data / f"{args.split}.bin"
    ps = _load_params(params_path)
    ds = _load_dataset(split_path)
    inputs = [params_path, split_path]
    report = RunReport(method="eval", config={"params": str(params_path), "split": args.split})

    out = predict(ps, ds.images)
    cm = confusion(out.digits, ds.labels, ps.arch.n_classes)
    report.confusions[args.split] = cm
    report.final_test_acc = cm.accuracy
    report.mi = {"label_center_cell": label_color_mi(ds.labels, ds.bias_labels),
                 "label_grid_mean": grid_mi(ds.labels, ds.bias_labels),
                 "h_bias_acc": float(np.mean(out.bias_levels == ds.bias_labels))}
    print(f"{args.split}_acc: {cm.accuracy:.4f}")

    if recolor:
        raw = dg.raw_of(ds)
        for k in recolor:
            shifted = dg.recolor_fixed(raw, k, ds.sigma2, ds.seed)
            rcm = confusion(predict(ps, shifted.images).digits, shifted.labels, ps.arch.n_classes)
            report.confusions[f"recolored-{k}"] = rcm
            print(f"recolored-{k}_acc: {rcm.accuracy:.4f}")

    if args.probe:
        train_path = data / "train.bin"
        train_set = _load_dataset(train_path)
        inputs.append(train_path)
        report.probe_acc = bias_leakage_probe(
            features(ps, train_set.images), train_set.bias_labels, features(ps, ds.images), ds.bias_labels,
            ps.arch, epochs=args.probe_epochs, batch_size=args.probe_batch_size, seed=args.seed)
        print(f"probe_acc: {report.probe_acc:.4f}")

    out_dir = Path(args.out)
    try:
        written = emit_report(report, out_dir)
        write_manifest(out_dir, "eval", report.config, inputs, written, started)
    except OSError as exc:
        raise DataError(f"cannot write report to {out_dir}: {exc}") from exc
    return EXIT_OK


def _sweep_cell(job) -> dict:
    sigma2, method, seed, source, limit, epochs, batch_size, out = job
    train_raw, test_raw, _ = load_raw(source, seed, limit)
    train_set = dg.build_train_set(train_raw, sigma2, seed)
    test_set = dg.build_test_set(test_raw, sigma2, seed)
    cfg = TrainConfig(method=method, epochs=epochs, batch_size=batch_size, seed=seed, sigma2=sigma2)
    _, report = train(train_set, test_set, cfg)
    emit_report(report, Path(out) / f"s{sigma2:g}_{method}_seed{seed}")
    return {"sigma2": sigma2, "method": method, "seed": seed, "test_acc": report.final_test_acc}


def cmd_reproduce(args) -> int:
    started = time.time()
    scale = DESK if args.scale == "desk" else FULL
    source = args.source or (f"synthetic:{DESK['n_per_class']}" if args.scale == "desk" else None)
    if source is None:
        raise UsageError("--scale full needs --source idx:<MNIST directory>")
    parse_source(source)
    epochs = args.epochs or scale["epochs"]
    batch_size = args.batch_size or scale["batch_size"]
    sigmas = [float(s) for s in args.sigma2.split(",")] if args.sigma2 else list(SWEEP_SIGMA2)
    methods = args.methods.split(",") if args.methods else list(SWEEP_METHODS)
    unknown = [m for m in methods if m.replace("-", "_") not in METHODS]
    if unknown or args.seeds < 1:
        raise UsageError(f"bad sweep: methods {unknown or methods}, seeds {args.seeds}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(s, m, seed, source, args.limit, epochs, batch_size, str(out))
            for s in sigmas for m in methods for seed in range(args.seeds)]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            rows = list(pool.map(_sweep_cell, jobs))
    else:
        rows = [_sweep_cell(j) for j in jobs]

    runs_path, fig_path = out / "runs.csv", out / "sweep.csv"
    with open(runs_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sigma2", "method", "seed", "test_acc"])
        for r in rows:
            w.writerow([f"{r['sigma2']:g}", r["method"], r["seed"], repr(r["test_acc"])])
    with open(fig_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sigma2", "method", "mean_acc", "std_acc", "n_seeds"])
        for s in sigmas:
            for m in methods:
                accs = np.array([r["test_acc"] for r in rows if r["sigma2"] == s and r["method"] == m])
                w.writerow([f"{s:g}", m, f"{accs.mean():.6f}", f"{accs.std(ddof=1) if len(accs) > 1 else 0.0:.6f}",
                            len(accs)])
    write_manifest(out, "reproduce", {"scale": args.scale, "source": source, "epochs": epochs,
                                      "batch_size": batch_size, "seeds": args.seeds, "sigma2": sigmas,
                                      "methods": methods}, [], [runs_path, fig_path], started)
    print(fig_path.read_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--method", default=d.method, choices=sorted(set(METHODS) | {"grl-only"}))
    p.add_argument("--lambda", dest="lam", type=float, default=None, help=f"entropy weight (default {d.lam})")
    p.add_argument("--mu", type=float, default=None, help=f"bias-loss weight (default {d.mu})")
    p.add_argument("--grl-scale", type=float, default=d.grl_scale)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--momentum", type=float, default=d.momentum)
    p.add_argument("--weight-decay", type=float, default=d.weight_decay)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--epochs", type=int, default=DESK["epochs"])
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--adversarial", default=d.adversarial, choices=["grl", "alternating"])
    p.add_argument("--dtype", default=d.dtype, choices=["float32", "float64"])


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="unlearn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="key=value file; command-line flags win")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="synthesise colour-biased train/test containers")
    gen.add_argument("--sigma2", type=float, default=0.02)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--source", default=f"synthetic:{DESK['n_per_class']}")
    gen.add_argument("--limit", type=int, default=None, help="keep the first N digits of each split")
    gen.add_argument("--preview", action="store_true", help="also write a PPM sample sheet")
    gen.add_argument("--out", default=None, help=f"output directory (default ${DATA_ENV} or ./data)")

    tr = sub.add_parser("train", help="train one method on a generated dataset")
    _add_train_flags(tr)
    tr.add_argument("--data", default=None, help=f"dataset directory (default ${DATA_ENV} or ./data)")
    tr.add_argument("--out", default="runs/latest")

    ev = sub.add_parser("eval", help="accuracy, confusion matrices, recoloring and leakage probe")
    ev.add_argument("--params", required=True)
    ev.add_argument("--data", default=None)
    ev.add_argument("--split", default="test", choices=["train", "test"])
    ev.add_argument("--recolor", default=None, help="colour index 0-9 or 'all'")
    ev.add_argument("--probe", action="store_true")
    ev.add_argument("--probe-epochs", type=int, default=10)
    ev.add_argument("--probe-batch-size", type=int, default=DESK["batch_size"])
    ev.add_argument("--seed", type=int, default=1000)
    ev.add_argument("--out", default="runs/eval")

    rp = sub.add_parser("reproduce", help="sigma2 x method x seed sweep")
    rp.add_argument("--scale", default="desk", choices=["desk", "full"])
    rp.add_argument("--source", default=None)
    rp.add_argument("--limit", type=int, default=None)
    rp.add_argument("--seeds", type=int, default=3)
    rp.add_argument("--epochs", type=int, default=None)
    rp.add_argument("--batch-size", type=int, default=None)
    rp.add_argument("--sigma2", default=None, help="comma-separated override")
    rp.add_argument("--methods", default=None, help="comma-separated override")
    rp.add_argument("--jobs", type=int, default=1)
    rp.add_argument("--out", default="runs/reproduce")
    return parser, {"gen": gen, "train": tr, "eval": ev, "reproduce": rp}


def read_config_file(path) -> dict[str, str]:
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key = key.strip().lstrip("-").replace("-", "_")
        values["lam" if key == "lambda" else key] = value.strip()
    return values


def _parse(argv):
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        values = read_config_file(args.config)
        sub = subs[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(values) - known)
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        for action in sub._actions:
            # string defaults go through each flag's type; switches need their own reading
            if action.dest in values and isinstance(action, argparse._StoreTrueAction):
                values[action.dest] = values[action.dest].lower() in ("1", "true", "yes", "on")
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "reproduce": cmd_reproduce}


def main(argv=None) -> int:
    try:
        args = _parse(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: bad config value: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
