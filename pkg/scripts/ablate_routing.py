#!/usr/bin/env python3
"""Restricted versus bidirectional gradient-flow ablation.

Builds a two-cell sweep over plm.routing from a base config and runs it
through the sweep driver, leaving per-run artifacts and an aggregated
summary CSV in the output directory.

Usage:
    python3 scripts/ablate_routing.py --config configs/vpl_glyph.cfg \
        --seeds 0,1,2 --out runs/routing
"""

import argparse
import os
import sys
import tempfile

from pairlearn.cli import main as cli_main


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", required=True)
    parser.add_argument("--seeds", default="0,1,2", help="comma-separated seed list")
    parser.add_argument("--out", default="runs/routing")
    args = parser.parse_args()

    with open(args.config) as f:
        base = f.read()
    sweep_text = (
        base
        + f"\nsweep.seeds = {args.seeds}\n"
        + "sweep.axis.plm.routing = restricted, bidirectional\n"
    )
    fd, sweep_path = tempfile.mkstemp(suffix=".cfg", text=True)
    try:
        with os.fdopen(fd, "w") as f:
            f.write(sweep_text)
        return cli_main(["sweep", "--config", sweep_path, "--out", args.out])
    finally:
        os.unlink(sweep_path)


if __name__ == "__main__":
    sys.exit(main())
