"""Padded-voxel counts on a sphere as the voxel size shrinks.

Writes one CSV row per (voxel size, scheme), the data behind a
ratio-versus-resolution plot.

    python3 scripts/padding_sweep.py --n 10000 --out sweep.csv
"""
import argparse
import sys

from sparsepad.data import synth_sphere_octant
from sparsepad.grid import GridSpec
from sparsepad.padding import PaddingReport, PaddingScheme, padding_report


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--denominators", type=int, nargs="+", default=[10, 20, 40, 80, 160])
    ap.add_argument("--schemes", nargs="+", default=["octree", "ring1", "ring2", "interp"])
    ap.add_argument("--out", type=argparse.FileType("w"), default=sys.stdout)
    args = ap.parse_args(argv)

    cloud = synth_sphere_octant(args.n, seed=args.seed)
    print("# sparsepad-stats v1", file=args.out)
    print(PaddingReport.CSV_HEADER, file=args.out)
    for d in args.denominators:
        spec = GridSpec(voxel_size=1.0 / d)
        for scheme in args.schemes:
            print(padding_report(cloud, spec, PaddingScheme.parse(scheme)).csv_row(), file=args.out)


if __name__ == "__main__":
    main()
