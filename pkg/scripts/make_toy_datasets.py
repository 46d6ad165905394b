#!/usr/bin/env python3
"""Regenerate the committed toy datasets (seeded; see hopflow.toydata).

The parity generator re-verifies its constructed closed-form solution
against the real propagation pipeline and refuses to write a broken set.

    python scripts/make_toy_datasets.py [--root data] [--force]
"""

from __future__ import annotations

import argparse
import shutil
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from hopflow import toydata


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--root", default="data", type=Path)
    parser.add_argument("--force", action="store_true", help="regenerate even if present")
    args = parser.parse_args()

    if args.force:
        for name in (toydata.PARITY_NAME, toydata.HOMOPHILY_NAME):
            shutil.rmtree(args.root / name, ignore_errors=True)
    made = toydata.generate_all(args.root)
    for path in made:
        print(f"generated {path}")
    if not made:
        print("toy datasets already present (use --force to regenerate)")
    acc = toydata.parity_linear_rule_accuracy(args.root / toydata.PARITY_NAME)
    print(f"parity constructed-solution accuracy: {acc:.0%}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
