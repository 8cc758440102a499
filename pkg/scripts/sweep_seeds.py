"""Rerun one config over several seeds and summarise each check.

Useful for seeing how much headroom a criterion has beyond the bundled seed.

    python3 scripts/sweep_seeds.py sumfilter_shift --seeds 0 1 2 3
"""

import argparse
import tempfile
from collections import defaultdict
from pathlib import Path

import numpy as np

from bnnshift import cli


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config", help="bundled config name or path to a JSON file")
    ap.add_argument("--seeds", nargs="+", type=int, required=True)
    args = ap.parse_args(argv)

    cfg = cli.load_config(args.config)
    values = defaultdict(list)
    passes = 0
    with tempfile.TemporaryDirectory() as tmp:
        for seed in args.seeds:
            report = cli.execute(cfg, Path(tmp) / str(seed), seed=seed)
            passes += report["passed"]
            for c in report["checks"]:
                values[c["name"]].append(c["value"])
            print(f"seed {seed}: {'PASS' if report['passed'] else 'FAIL'}", flush=True)
    print(f"{passes}/{len(args.seeds)} seeds pass")
    for name, v in values.items():
        v = np.asarray(v, dtype=float)
        print(f"  {name}: mean {v.mean():.4g}  min {v.min():.4g}  max {v.max():.4g}")


if __name__ == "__main__":
    main()
