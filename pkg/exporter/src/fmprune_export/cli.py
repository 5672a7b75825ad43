"""Command line for checkpoint conversion and fixture generation."""

from __future__ import annotations

import argparse
import sys

from .export import ExportError, export
from .torch_zoo import ARCHITECTURES, save_fixture


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fmprune-export")
    sub = parser.add_subparsers(dest="command", required=True)

    ex = sub.add_parser("export", help="convert a torch checkpoint to a model directory")
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--architecture", required=True, choices=sorted(ARCHITECTURES))
    ex.add_argument("--out", required=True)
    ex.add_argument("--no-verify", action="store_true", help="skip the activation parity gate")
    ex.add_argument("--tolerance", type=float, default=1e-3)

    fx = sub.add_parser("fixture", help="write a deterministic random checkpoint")
    fx.add_argument("--architecture", required=True, choices=sorted(ARCHITECTURES))
    fx.add_argument("--seed", type=int, default=0)
    fx.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    try:
        if args.command == "export":
            diff = export(
                args.checkpoint,
                args.architecture,
                args.out,
                verify=not args.no_verify,
                tolerance=args.tolerance,
            )
            print(f"exported {args.architecture} to {args.out} (parity diff {diff:.3e})")
        else:
            save_fixture(args.architecture, args.seed, args.out)
            print(f"fixture checkpoint written to {args.out}")
    except ExportError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
