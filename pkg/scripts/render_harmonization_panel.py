#!/usr/bin/env python
"""Emit a visual panel of every harmonization transform as PGM images.

For one style-shifted sample image: the original, each harmonized version,
and the amplified absolute difference showing where the transform acted.

Example:
    python scripts/render_harmonization_panel.py --out panel/
"""

import argparse
from pathlib import Path

from fedtrade.cli import emit_panel


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="panel", help="output directory for PGM files")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    paths = emit_panel(Path(args.out), seed=args.seed)
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
