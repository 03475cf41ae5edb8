"""Command-line entry point: ``dybm {markov7,video,sweep}``.

Settings are resolved as preset defaults, then command-line flags, then the
``key = value`` config file (highest precedence).  Every run writes into
``<out>/<command>-<hash of effective settings>`` so identical inputs land in
the same place with identical bytes.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields

from . import experiments
from .core import ConfigError, DivergenceError
from .datagen import FrameFormatError
from .evaluation import accuracy_csv, correlation_csv, sweep_csv, sweep_report, write_text

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_PARTIAL = 5

OUT_ENV = "DYBM_OUT"
DEFAULT_OUT = "runs"

_FIELDS = {f.name: f for f in fields(experiments.Settings)}
_DEFAULTS = experiments.Settings()


def coerce(key, raw):
    """Parse the string ``raw`` into the type of setting ``key``."""
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = getattr(_DEFAULTS, key)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            elem = type(default[0]) if default else str
            return tuple(elem(x) for x in items)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def read_config_file(path):
    """Flat ``key = value`` file; ``#`` starts a comment.  Returns typed overrides."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key == "scale":
            raise ConfigError(f"{path}:{lineno}: scale is chosen with --scale")
        out[key] = coerce(key, raw)
    return out


def build_parser():
    parser = argparse.ArgumentParser(prog="dybm", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value settings file (overrides flags)")
    common.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    common.add_argument("--seed", type=int, help="experiment seed")
    common.add_argument("--scale", choices=("desk", "paper"), default="desk")
    common.add_argument("--method", choices=("none", "delay-prune", "dropout", "dropconnect"))
    common.add_argument("--p", type=float, help="drop or prune probability")
    common.add_argument("--frames", type=int, help="input frames per video")
    common.add_argument("--predict", type=int, help="frames generated after the input")
    common.add_argument("--source", choices=("synthetic", "file"))
    common.add_argument("--data-path", help="raw-frames file for --source file")
    common.add_argument("--randomize-weights", action="store_true", default=None,
                        help="also score the checkpoint with its weights re-randomized")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("markov7", parents=[common], help="Markov-chain NLL correlation experiment")
    sub.add_parser("video", parents=[common], help="sprite video reconstruction and prediction")
    sweep = sub.add_parser("sweep", parents=[common], help="accuracy grid over methods and p")
    sweep.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    return parser


def resolve_settings(args):
    experiment = "markov7" if args.command == "markov7" else "video"
    flags = {}
    for key in ("seed", "method", "p", "frames", "predict", "source", "data_path",
                "randomize_weights"):
        value = getattr(args, key, None)
        if value is not None:
            flags[key] = value
    if args.command == "sweep":
        # --method / --p narrow the grid instead of picking one cell
        for key, grid in (("method", "methods"), ("p", "p_values")):
            if key in flags:
                flags[grid] = (flags[key],)
    file_values = read_config_file(args.config) if args.config else {}
    settings = experiments.preset(experiment, args.scale, **{**flags, **file_values})
    _validate(settings)
    return settings


def _validate(s):
    if s.frames < 1 or s.predict < 0:
        raise ConfigError("need frames >= 1 and predict >= 0")
    if not 0.0 <= s.p <= 1.0 or any(not 0.0 <= p <= 1.0 for p in s.p_values):
        raise ConfigError("probabilities must lie in [0, 1]")
    if s.n_seeds < 1:
        raise ConfigError("n_seeds must be >= 1")
    # building the component configs runs their own validation
    s.model_config(2, 0)
    s.train_config(0)
    for m in s.methods + (s.method,):
        s.reg_config(m, s.p, 0)


def prepare_output(args, settings):
    root = args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT
    path = os.path.join(root, f"{args.command}-{settings.digest()}")
    try:
        os.makedirs(path, exist_ok=True)
        write_text(os.path.join(path, "effective.cfg"), settings.listing())
    except OSError as exc:
        raise ConfigError(f"output directory {path} is not writable: {exc.strerror}") from None
    return path


def _save_run(path, result):
    os.makedirs(path, exist_ok=True)
    result["checkpoint"].save(os.path.join(path, "checkpoint.npz"))


def _train_arm(runner, settings, seed, method, p, path, **kw):
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "metrics.csv"), "w", newline="") as metrics, \
            open(os.path.join(path, "masks.log"), "w") as masks:
        result = runner(settings, seed, method, p, metrics_file=metrics, mask_log=masks, **kw)
    _save_run(path, result)
    return result


def cmd_markov7(settings, out):
    lines = []
    arms = (("baseline", "none", 0.0), ("pruned", settings.method, settings.p))
    for name, method, p in arms:
        path = os.path.join(out, name)
        res = _train_arm(experiments.run_markov7_cell, settings, settings.seed, method, p, path)
        write_text(os.path.join(path, "correlation.csv"), correlation_csv(res["correlation"]))
        lines.append(f"{name}_pearson_r = {res['pearson_r']!r}")
        print(f"{name} ({method}, p={p}): pearson_r = {res['pearson_r']:.4f}")
    write_text(os.path.join(out, "summary.txt"), "\n".join(lines) + "\n")
    return EXIT_OK


def _accuracy_rows(acc, n_input, prefix=""):
    return [(t, a, prefix + ("reconstruction" if t < n_input else "prediction"))
            for t, a in enumerate(acc["per_frame"])]


def _rollouts_csv(rollouts, n_input):
    rows = []
    for v, seq in enumerate(rollouts):
        for t in range(seq.length):
            bits = "".join(str(int(b)) for b in seq.values[:, t])
            rows.append((v, t, "reconstruction" if t < n_input else "prediction", bits))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("video", "frame", "phase", "bits"))
    w.writerows(rows)
    return buf.getvalue()


def cmd_video(settings, out):
    res = _train_arm(experiments.run_video_cell, settings, settings.seed, settings.method,
                     settings.p, out)
    acc = res["accuracy"]
    rows = _accuracy_rows(acc, settings.frames)
    summary = {f"accuracy_{k}": acc[k] for k in ("overall", "reconstruction", "prediction")}
    if "randomized_accuracy" in res:
        rnd = res["randomized_accuracy"]
        rows += _accuracy_rows(rnd, settings.frames, "randomized-")
        summary.update({f"randomized_{k}": rnd[k] for k in ("overall", "reconstruction",
                                                             "prediction")})
    write_text(os.path.join(out, "accuracy.csv"), accuracy_csv(rows))
    write_text(os.path.join(out, "rollouts.csv"), _rollouts_csv(acc["rollouts"], settings.frames))
    write_text(os.path.join(out, "summary.txt"),
               "".join(f"{k} = {v!r}\n" for k, v in summary.items()))
    for k, v in summary.items():
        if v is not None:
            print(f"{k}: {v:.2f}%")
    return EXIT_OK


def _sweep_cell(settings, seed, method, p, path):
    """Worker: one (method, p, seed) cell; returns (accuracy or None, error text)."""
    try:
        res = _train_arm(experiments.run_video_cell, settings, seed, method, p, path,
                         with_randomized=False)
        return res["accuracy"]["overall"], ""
    except Exception as exc:  # a failed cell is recorded, not fatal
        return None, f"{type(exc).__name__}: {exc}"


def cmd_sweep(settings, out, jobs=1):
    seeds = [settings.seed + k for k in range(settings.n_seeds)]
    cells = [(m, float(p), s) for m in settings.methods for p in settings.p_values
             for s in seeds]
    args = [(settings, s, m, p, os.path.join(out, "cells", f"{m}-p{p:g}-seed{s}"))
            for m, p, s in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_sweep_cell, *zip(*args)))
    else:
        outcomes = [_sweep_cell(*a) for a in args]
    results, failed = [], []
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("method", "p", "seed", "accuracy", "error"))
    for (m, p, s), (acc, err) in zip(cells, outcomes):
        writer.writerow((m, repr(p), s, "" if acc is None else repr(acc), err))
        if acc is None:
            failed.append((m, p, s))
        else:
            results.append((m, p, acc))
    rows = sweep_report(results)
    present = {(r["method"], r["p"]) for r in rows}
    for m in settings.methods:
        for p in settings.p_values:
            if (m, float(p)) not in present:
                rows.append({"method": m, "p": float(p), "median": "", "iqr": "", "n": 0})
    order = {m: i for i, m in enumerate(settings.methods)}
    rows.sort(key=lambda r: (order[r["method"]], r["p"]))
    write_text(os.path.join(out, "sweep.csv"), sweep_csv(rows))
    write_text(os.path.join(out, "cells.csv"), buf.getvalue())
    for r in rows:
        med = "missing" if r["median"] == "" else f"{r['median']:.2f}%"
        print(f"{r['method']:>12} p={r['p']:.1f}: {med}")
    if failed:
        print(f"{len(failed)} of {len(cells)} cells failed; see cells.csv", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = resolve_settings(args)
        out = prepare_output(args, settings)
        if args.command == "markov7":
            code = cmd_markov7(settings, out)
        elif args.command == "video":
            code = cmd_video(settings, out)
        else:
            code = cmd_sweep(settings, out, jobs=max(1, args.jobs))
    except ConfigError as exc:
        print(f"dybm: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"dybm: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except FileNotFoundError as exc:
        hint = " (try --source synthetic)" if args.command != "markov7" else ""
        print(f"dybm: data error: {exc}{hint}", file=sys.stderr)
        return EXIT_DATA
    except (FrameFormatError, experiments.DataError) as exc:
        print(f"dybm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(f"outputs in {out}")
    return code


if __name__ == "__main__":
    sys.exit(main())
