"""Nearest vs trilinear point features on the sub-voxel checker task.

Trains the 3-level U-Net under each padding/interpolation pair for several
seeds and prints mean accuracy next to the per-voxel majority ceiling, the
best accuracy any per-voxel-constant predictor can reach.

    python3 scripts/checker_experiment.py --seeds 0 1 2 --json results.json
"""
import argparse
import json
import time
from dataclasses import replace

from sparsepad.experiment import RunConfig, load_config, load_data, run, summarize

PAIRS = ["zero:nearest", "interp:nearest", "zero:zerofill", "zero:normalized", "interp:zerofill", "interp:strict"]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="sparsepad config file for the base run")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--pairs", nargs="+", default=PAIRS, help="padding:interp pairs")
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--json", help="write per-run metrics here")
    args = ap.parse_args(argv)

    base = load_config(args.config) if args.config else RunConfig()
    if args.epochs is not None:
        base = RunConfig(base.model, replace(base.train, epochs=args.epochs), base.data)
    data = load_data(base)
    table = {}
    for pair in args.pairs:
        padding, interp = pair.split(":")
        rc = RunConfig(replace(base.model, padding=padding, interp=interp), base.train, base.data)
        start = time.perf_counter()
        runs = [run(rc.with_seed(s), data) for s in args.seeds]
        acc = summarize(r.test.metrics.accuracy for r in runs)
        table[pair] = {"accuracy": acc, "ceiling": runs[0].test.ceiling,
                       "miou": summarize(r.test.metrics.miou for r in runs),
                       "seconds": time.perf_counter() - start}
        print(f"{pair:18s} acc {acc['mean']:.4f} +- {acc['mean_abs_dev']:.4f}  "
              f"ceiling {runs[0].test.ceiling:.4f}  {table[pair]['seconds']:.0f}s", flush=True)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"version": 1, "config": base.to_dict(), "results": table}, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
