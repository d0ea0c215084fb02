"""Line and field plots from the files a run directory already holds."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from tracelab import io  # noqa: E402

# fixed metadata keeps the PNG bytes stable across reruns
_META = {"Software": None}


def plot_sweep(csv_path: Path, out_path: Path, metric: str = "sliced_w1") -> Path:
    rows, meta = io.read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method in sorted({r["method"] for r in rows}):
        cells: dict[float, list[float]] = {}
        for r in rows:
            if r["method"] == method and r["status"] == "ok":
                cells.setdefault(float(r["cfg"]), []).append(float(r[metric]))
        ws = sorted(cells)
        mean = [np.mean(cells[w]) for w in ws]
        std = [np.std(cells[w]) for w in ws]
        ax.errorbar(ws, mean, yerr=std, marker="o", capsize=3, label=method)
    ax.set_xscale("log")
    ax.set_xlabel("CFG weight")
    ax.set_ylabel(metric)
    ax.set_title(f"config {meta.get('config_hash', '?')}", fontsize=8)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120, metadata=_META)
    plt.close(fig)
    return out_path


def plot_field(csv_path: Path, out_path: Path) -> Path:
    rows, meta = io.read_csv(csv_path)
    if meta.get("kind") != "grid":
        data = np.array([[float(v) for v in r.values()] for r in rows])
        fig, ax = plt.subplots(figsize=(4, 4))
        side = int(round(np.sqrt(len(data))))
        if side * side == len(data):
            im = ax.imshow(np.linalg.norm(data, axis=1).reshape(side, side), cmap="magma")
            fig.colorbar(im, ax=ax)
        ax.set_title(f"{meta.get('method')} |grad| at iteration {meta.get('iteration')}", fontsize=9)
    else:
        arr = np.array([[float(r[k]) for k in ("x0", "x1", "g0", "g1")] for r in rows])
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        # descent direction, normalised so every arrow is visible
        d = -arr[:, 2:]
        n = np.linalg.norm(d, axis=1, keepdims=True)
        d = np.divide(d, n, out=np.zeros_like(d), where=n > 0)
        ax.quiver(arr[:, 0], arr[:, 1], d[:, 0], d[:, 1], np.log10(n[:, 0] + 1e-12), cmap="viridis")
        ax.set_aspect("equal")
        ax.set_title(f"{meta.get('method')} descent direction, iteration {meta.get('iteration')}", fontsize=9)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120, metadata=_META)
    plt.close(fig)
    return out_path


def plot_record(record_path: Path, out_path: Path) -> Path:
    its, sw = [], []
    for line in Path(record_path).read_text().splitlines():
        rec = json.loads(line)
        if rec.get("kind") == "iteration" and "sliced_w1" in rec:
            its.append(rec["iteration"])
            sw.append(rec["sliced_w1"])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(its, sw, marker=".")
    ax.set_xlabel("iteration")
    ax.set_ylabel("sliced W1 to prior")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120, metadata=_META)
    plt.close(fig)
    return out_path


def plot_all(out: Path) -> list[Path]:
    out = Path(out)
    dest = out / "plots"
    dest.mkdir(parents=True, exist_ok=True)
    written = []
    sweep = out / "sweep" / "sweep.csv"
    if sweep.exists():
        written.append(plot_sweep(sweep, dest / "sweep_sliced_w1.png"))
        written.append(plot_sweep(sweep, dest / "sweep_mmd.png", metric="mmd"))
    for csv_path in sorted(out.glob("gradients/*.csv")) + sorted(out.glob("distill/*/gradients/*.csv")):
        tag = "_".join(csv_path.relative_to(out).with_suffix("").parts)
        written.append(plot_field(csv_path, dest / f"{tag}.png"))
    for rec in sorted(out.glob("distill/*/record.jsonl")):
        written.append(plot_record(rec, dest / f"curve_{rec.parent.name}.png"))
    return written
