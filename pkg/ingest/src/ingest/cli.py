"""`convert` command line tool.

Exit codes: 0 success, 1 usage error, 2 conversion error (missing or
malformed input, count mismatch), 3 internal error.
"""

from __future__ import annotations

import argparse
import sys
import traceback

from .bitcoin import convert_bitcoin
from .common import ConversionError
from .planetoid import EXPECTED, convert_planetoid


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="convert", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    pl = sub.add_parser("planetoid", help="convert a pickled citation dataset")
    pl.add_argument("--dir", required=True, help="directory with the ind.* files")
    pl.add_argument("--name", required=True, choices=sorted(EXPECTED))
    pl.add_argument("--out", required=True, help="output portable JSON path")

    bc = sub.add_parser("bitcoin", help="convert a signed trust-rating CSV")
    bc.add_argument("--csv", required=True)
    bc.add_argument("--out", required=True, help="output portable JSON path")
    bc.add_argument("--pos", type=float, default=3.0,
                    help="weights above this are positive links (default 3)")
    bc.add_argument("--neg", type=float, default=-3.0,
                    help="weights below this are negative links (default -3)")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "planetoid":
            summary = convert_planetoid(args.dir, args.name, args.out)
            print(f"wrote {summary['output']} ({summary['nodes']} nodes, "
                  f"{summary['edges']} edges, {summary['labeled']} labeled) "
                  f"+ {summary['manifest'].name}")
        elif args.command == "bitcoin":
            summary = convert_bitcoin(args.csv, args.out, pos=args.pos, neg=args.neg)
            print(f"wrote {summary['output']} ({summary['nodes']} nodes, "
                  f"{summary['edges']} structural edges) and "
                  f"{summary['sidecar'].name} ({summary['records']} records, "
                  f"{summary['labeled']} labeled at ({args.neg}, {args.pos}))")
        else:
            raise _UsageError("choose a command: planetoid or bitcoin")
        return 0
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConversionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 3


if __name__ == "__main__":
    sys.exit(main())
