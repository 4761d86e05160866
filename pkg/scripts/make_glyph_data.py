#!/usr/bin/env python3
"""Generate the glyph corpus in the cifar10 binary layout.

Usage:
    python3 scripts/make_glyph_data.py --root /data/glyphs [--seed 0]

Writes data_batch_1..5.bin and test_batch.bin (60,000 images total).
Point PAIRLEARN_DATA_ROOT at the root to use it from config files.
"""

import argparse
import sys
import time

from pairlearn.glyphs import write_glyph_cifar


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--root", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    t0 = time.perf_counter()
    write_glyph_cifar(args.root, args.seed)
    print(f"wrote 60000 glyph images to {args.root} in {time.perf_counter() - t0:.1f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
