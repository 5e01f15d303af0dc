#!/usr/bin/env python3
"""Write SCAN splits and the synthetic copy task to disk in text form.

Example:
    python3 scripts/generate_data.py --out data/ --splits addprim_jump simple
    python3 scripts/generate_data.py --out data/ --copy-task
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from latent_qcfg.data import make_copy_task, scan_split, write_scan


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument(
        "--splits",
        nargs="*",
        default=["addprim_jump"],
        choices=["simple", "addprim_jump", "template_around_right", "length"],
    )
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--copy-task", action="store_true", help="also write the synthetic copy task")
    parser.add_argument("--copy-count", type=int, default=2000)
    args = parser.parse_args()

    os.makedirs(args.out, exist_ok=True)
    for name in args.splits:
        train, test = scan_split(name, args.seed)
        for part, pairs in (("train", train), ("test", test)):
            path = os.path.join(args.out, f"scan_{name}_{part}.txt")
            write_scan(path, pairs)
            print(f"wrote {path} ({len(pairs)} pairs)")
    if args.copy_task:
        for part, seed, count in (("train", args.seed, args.copy_count), ("test", args.seed + 2, 200)):
            pairs = make_copy_task(count, seed=seed)
            path = os.path.join(args.out, f"copy_{part}.txt")
            write_scan(path, pairs)
            print(f"wrote {path} ({len(pairs)} pairs)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
