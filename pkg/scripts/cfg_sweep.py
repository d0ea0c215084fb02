"""CFG study: both methods over the configured CFG weights and seeds.

Writes the sweep CSV, the stability summary and line plots under --out, then
prints a table of mean final sliced-W1 per (method, CFG weight).

    python scripts/cfg_sweep.py --config configs/toy.yaml --out runs/cfg_sweep --jobs 4
"""

import argparse
import os
from pathlib import Path

import numpy as np

from tracelab.cli import cmd_plot, cmd_sweep, stability_summary
from tracelab.config import default_config, load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path)
    ap.add_argument("--out", type=Path, default=Path("runs/cfg_sweep"))
    ap.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    ap.add_argument("--seeds", type=int, nargs="+")
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else default_config()
    rows = cmd_sweep(cfg, args.out, seeds=args.seeds, jobs=args.jobs)
    weights = sorted({r[1] for r in rows})
    methods = sorted({r[0] for r in rows})
    print("cfg     " + "  ".join(f"{m:>14}" for m in methods))
    for w in weights:
        cells = []
        for m in methods:
            v = [r[3] for r in rows if r[0] == m and r[1] == w]
            cells.append(f"{np.mean(v):7.3f} +- {np.std(v):.3f}")
        print(f"{w:<7g} " + "  ".join(cells))
    for m, s in stability_summary(rows).items():
        if "plateau" in s:
            print(f"{m}: var over high CFG {s['var_high_cfg']:.4f}, over low CFG {s['var_low_cfg']:.4f}, "
                  f"plateau {s['plateau']}")
    for path in cmd_plot(args.out):
        print(path)


if __name__ == "__main__":
    main()
