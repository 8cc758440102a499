"""Run every bundled criterion config through the CLI and print a verdict table.

    python3 scripts/run_acceptance.py --out runs/ [--only 7 9 11]
"""

import argparse
import sys
import time
from pathlib import Path

from bnnshift import cli


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs", help="parent directory for per-config outputs")
    ap.add_argument("--only", nargs="*", type=int, help="criterion numbers to run")
    args = ap.parse_args(argv)

    failures = 0
    for crit, name, _ in cli.registry():
        if args.only and crit not in args.only:
            continue
        start = time.perf_counter()
        report = cli.execute(cli.load_config(name), Path(args.out) / name)
        status = "PASS" if report["passed"] else "FAIL"
        failures += not report["passed"]
        print(f"{status} {crit:2d} {name} ({time.perf_counter() - start:.0f} s)", flush=True)
        for c in report["checks"]:
            print(f"     {'ok ' if c['passed'] else 'BAD'} {c['name']} = {c['value']:.6g} ({c['bound']})", flush=True)
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
