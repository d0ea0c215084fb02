"""Canvas-gradient fields of SDS and TraCe on the 2-pixel toy scene.

Dumps the expected descent direction over a grid of canvases at the first
iteration and plots both fields. Also reports how well each field points at
the nearest mode of the conditional target.

    python scripts/gradient_fields.py --out runs/fields --cfg-weight 20
"""

import argparse
import dataclasses
from pathlib import Path

import numpy as np

from tracelab import io
from tracelab.cli import cmd_dump_gradients, cmd_plot
from tracelab.config import default_config, load_config


def alignment(csv_path: Path, modes: np.ndarray) -> float:
    """Mean cosine between the descent direction and the direction to the nearest mode."""
    rows, _ = io.read_csv(csv_path)
    arr = np.array([[float(r[k]) for k in ("x0", "x1", "g0", "g1")] for r in rows])
    pts, desc = arr[:, :2], -arr[:, 2:]
    near = modes[np.argmin(((pts[:, None] - modes[None]) ** 2).sum(-1), axis=1)]
    to_mode = near - pts
    keep = (np.linalg.norm(to_mode, axis=1) > 0.5) & (np.linalg.norm(desc, axis=1) > 0)
    cos = np.sum(desc * to_mode, axis=1)[keep] / (
        np.linalg.norm(desc[keep], axis=1) * np.linalg.norm(to_mode[keep], axis=1))
    return float(cos.mean())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path)
    ap.add_argument("--out", type=Path, default=Path("runs/fields"))
    ap.add_argument("--cfg-weight", type=float)
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else default_config()
    if args.cfg_weight is not None:
        cfg = dataclasses.replace(cfg, distill=dataclasses.replace(cfg.distill, cfg_weight=args.cfg_weight))
    if cfg.canvas_dim() != 2 or cfg.projection_dim:
        raise SystemExit("gradient fields need the 2-pixel direct scene")
    modes = cfg.build_family().condition(cfg.distill.condition).means
    for path in cmd_dump_gradients(cfg, args.out):
        print(f"{path}: alignment with nearest mode {alignment(path, modes):+.3f}")
    for path in cmd_plot(args.out):
        print(path)


if __name__ == "__main__":
    main()
