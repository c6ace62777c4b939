"""plotviz command line: plot <kind> --in CSV [CSV ...] --out IMAGE"""

from __future__ import annotations

import argparse
import sys

from . import KINDS, PlotJob, render


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="plotviz", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("plot", help="render one figure from exported CSVs")
    p.add_argument("kind", choices=KINDS)
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cmap", default="viridis")
    p.add_argument("--max-paths", type=int, default=200)
    p.add_argument("--labels", nargs="*", default=[])
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        render(PlotJob(kind=args.kind, inputs=args.inputs, output=args.out,
                       colormap=args.cmap, max_paths=args.max_paths,
                       labels=args.labels))
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
