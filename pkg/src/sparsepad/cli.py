"""Command line entry points: ``sparsepad {stats,synth,train,eval,gradcheck}``.

Every command prints its resolved configuration to stderr (stdout stays
machine readable). Exit codes: 0 success, 2 bad input or config, 3 numerical
failure, 4 gradient check failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import experiment as ex
from .data import SynthTask, load_dataset, save_dataset, task_dict
from .grid import GridSpec, PointCloud, read_points
from .interp import InterpMode
from .padding import PaddingReport, PaddingScheme, padding_report
from .train import evaluate

STATS_HEADER = "# sparsepad-stats v1"
EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL, EXIT_GRADCHECK = 0, 2, 3, 4

log = logging.getLogger("sparsepad")


class InputError(Exception):
    pass


def _csv_list(text, conv=str):
    try:
        return [conv(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _size(text):
    """Accept ``0.05`` or ``1/20``."""
    num, _, den = text.partition("/")
    value = float(num) / float(den) if den else float(num)
    if not value > 0:
        raise ValueError(f"voxel size must be positive, got {text}")
    return value


def _override(text):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected section.key=value, got {text!r}")
    return key.strip(), ex.parse_value(value)


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, help="model init and batch order seed")
    shared.add_argument("--config", type=Path, help="flat key = value config file")
    shared.add_argument("--set", type=_override, action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config entry (repeatable)")
    shared.add_argument("--out", type=Path, help="output file or directory")
    shared.add_argument("--precision", type=int, choices=(32, 64))
    shared.add_argument("--threads", type=int, help="cap BLAS worker threads")
    shared.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sparsepad", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", parents=[shared], help="padded voxel counts per scheme and voxel size")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--input", type=Path, help="point file")
    src.add_argument("--synth", default="sphere", help="synthetic task: sphere, checker, pair, single")
    p.add_argument("--n", type=int, default=10000, help="synthetic point count")
    p.add_argument("--voxel-sizes", type=lambda t: _csv_list(t, _size), default=[1 / 10, 1 / 20, 1 / 40, 1 / 80])
    p.add_argument("--schemes", type=_csv_list, default=["zero", "octree", "ring1", "interp"])
    p.add_argument("--format", choices=("csv", "json"), default="csv")

    p = sub.add_parser("synth", parents=[shared], help="write a seeded synthetic dataset")
    p.add_argument("--task", default="checker", help="checker, sphere or pair")
    p.add_argument("--n", type=int, default=2000, help="points per scene")
    p.add_argument("--scenes", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--s-label", type=float, default=0.5)

    for name, helptext in (("train", "train a U-Net and evaluate it"), ("eval", "evaluate a checkpoint")):
        p = sub.add_parser(name, parents=[shared], help=helptext)
        p.add_argument("--padding", help="zero, octree, ringN or interp")
        p.add_argument("--interp", help="nearest, zerofill, normalized or strict")
        if name == "train":
            p.add_argument("--epochs", type=int)
            p.add_argument("--repeat", type=int, default=1, help="train k times with seeds seed..seed+k-1")
        else:
            p.add_argument("--checkpoint", type=Path, required=True)
            p.add_argument("--data", type=Path, help="dataset directory (default: the config's test split)")

    p = sub.add_parser("gradcheck", parents=[shared], help="finite-difference checks of every layer")
    p.add_argument("--inject-bug", action="store_true", help="perturb analytic gradients; must fail")
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def resolve_config(args, base: ex.RunConfig = None) -> ex.RunConfig:
    rc = base or ex.RunConfig()
    if args.config is not None:
        if not args.config.is_file():
            raise InputError(f"config file not found: {args.config}")
        rc = ex.load_config(args.config, rc)
    overrides = dict(args.set)
    if args.precision is not None:
        overrides["model.precision"] = args.precision
    for flag, key in (("padding", "model.padding"), ("interp", "model.interp"), ("epochs", "train.epochs")):
        if getattr(args, flag, None) is not None:
            overrides[key] = getattr(args, flag)
    rc = rc.updated(overrides)
    if args.seed is not None:
        rc = rc.with_seed(args.seed)
    return rc


def _thread_limit(n):
    if n is None:
        return nullcontext()
    if n < 1:
        raise InputError("--threads must be >= 1")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        log.warning("threadpoolctl unavailable; --threads has no effect")
        return nullcontext()
    return threadpool_limits(limits=n)


def _emit(text: str, out: Path = None):
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _stats_cloud(args) -> PointCloud:
    if args.input is not None:
        try:
            return read_points(args.input)
        except OSError as exc:
            raise InputError(f"cannot read {args.input}: {exc.strerror or exc}") from None
    if args.synth == "single":
        return PointCloud([[0.5, 0.5, 0.5]])
    return SynthTask(args.synth, n=args.n, seed=0 if args.seed is None else args.seed).generate()


def cmd_stats(args, rc: ex.RunConfig) -> int:
    cloud = _stats_cloud(args)
    schemes = [PaddingScheme.parse(s) for s in args.schemes]
    itemsize = np.dtype(rc.model.dtype).itemsize
    rows = []
    for size in args.voxel_sizes:
        spec = GridSpec(rc.model.origin, size)
        for scheme in schemes:
            start = time.perf_counter()
            rep = padding_report(cloud, spec, scheme)
            seconds = time.perf_counter() - start
            rows.append((rep, seconds, rep.total * rc.model.in_channels * itemsize, rep.total * 4 * 8))
    if args.format == "json":
        text = _dump({"version": 1, "points": len(cloud), "rows": [
            {"scheme": r.scheme, "voxel_size": r.voxel_size, "M": r.original, "padded": r.padded,
             "total": r.total, "ratio": r.ratio, "seconds": sec, "feature_bytes": fb, "index_bytes": ib}
            for r, sec, fb, ib in rows]})
    else:
        lines = [STATS_HEADER, PaddingReport.CSV_HEADER + ",seconds,feature_bytes,index_bytes"]
        lines += [f"{r.csv_row()},{sec:.6f},{fb},{ib}" for r, sec, fb, ib in rows]
        text = "\n".join(lines) + "\n"
    _emit(text, args.out)
    return EXIT_OK


def cmd_synth(args, rc: ex.RunConfig) -> int:
    if args.out is None:
        raise InputError("synth needs --out DIRECTORY")
    seed = 0 if args.seed is None else args.seed
    seeds = np.random.SeedSequence(seed).spawn(args.scenes)
    tasks = [SynthTask(args.task, n=args.n, noise=args.noise, seed=int(s.generate_state(1)[0]),
                       s_label=args.s_label) for s in seeds]
    clouds = [t.generate() for t in tasks]
    save_dataset(args.out, clouds, {"seed": seed, "tasks": [task_dict(t) for t in tasks]})
    print(f"wrote {len(clouds)} scene(s), {sum(len(c) for c in clouds)} points to {args.out}")
    return EXIT_OK


def cmd_train(args, rc: ex.RunConfig) -> int:
    if args.out is None:
        raise InputError("train needs --out DIRECTORY")
    if args.repeat < 1:
        raise InputError("--repeat must be >= 1")
    data = ex.load_data(rc)
    args.out.mkdir(parents=True, exist_ok=True)
    runs = []
    for r in range(args.repeat):
        result = ex.run(rc.with_seed(rc.model.seed + r) if args.repeat > 1 else rc, data)
        name = "model.ckpt" if args.repeat == 1 else f"model_{r}.ckpt"
        ex.save_run(result, args.out / name)
        runs.append(result.metrics())
        test = runs[-1]["test"]
        print(f"run {r} seed {result.config.model.seed}: accuracy {test['accuracy']:.4f} "
              f"miou {test['miou']:.4f} ceiling {test['majority_ceiling']:.4f}")
    metrics = runs[0] if args.repeat == 1 else {
        "version": ex.METRICS_VERSION, "runs": runs,
        "accuracy": ex.summarize(m["test"]["accuracy"] for m in runs),
        "miou": ex.summarize(m["test"]["miou"] for m in runs),
    }
    if args.repeat > 1:
        for key in ("accuracy", "miou"):
            s = metrics[key]
            print(f"{key}: {s['mean']:.4f} +- {s['mean_abs_dev']:.4f} (mean abs dev), std {s['std']:.4f}")
    (args.out / "metrics.json").write_text(_dump(metrics))
    (args.out / "config.txt").write_text(ex.format_config(rc))
    return EXIT_OK


def cmd_eval(args, rc: ex.RunConfig) -> int:
    if not args.checkpoint.is_file():
        raise InputError(f"checkpoint not found: {args.checkpoint}")
    model, saved = ex.load_run_model(args.checkpoint)
    if args.data is not None:
        clouds = load_dataset(args.data)
    else:
        clouds = ex.load_data(saved)[1]
    result = evaluate(model, clouds)
    out = result.to_json()
    if model.config.mode is InterpMode.NEAREST and result.metrics.accuracy > result.ceiling + 1e-12:
        log.error("nearest-mode accuracy exceeds the per-voxel ceiling")
        return EXIT_NUMERICAL
    text = _dump(out)
    sys.stdout.write(text)
    if args.out is not None:
        _emit(text, args.out)
    return EXIT_OK


def cmd_gradcheck(args, rc: ex.RunConfig) -> int:
    seed = 0 if args.seed is None else args.seed
    reports = ex.gradcheck_suite(seed, inject_bug=args.inject_bug, tolerance=args.tolerance)
    lines = [f"{'layer':12s} {'max_rel_error':>14s}  result"]
    for name, rep in reports.items():
        lines.append(f"{name:12s} {rep.max_rel_error:14.3e}  {'PASS' if rep.passed else 'FAIL'}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out is not None:
        _emit(text, args.out)
    return EXIT_OK if ex.gradcheck_passed(reports) else EXIT_GRADCHECK


COMMANDS = {"stats": cmd_stats, "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gradcheck":
            if args.precision == 32:
                raise InputError("gradcheck always runs in 64-bit precision")
            args.precision = 64
        rc = resolve_config(args)
        sys.stderr.write(ex.format_config(rc))
        with _thread_limit(args.threads):
            return COMMANDS[args.command](args, rc)
    except (InputError, ValueError, LookupError, OSError) as exc:
        print(f"sparsepad {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ArithmeticError as exc:  # NumericalError, degenerate weights, float traps
        print(f"sparsepad {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
