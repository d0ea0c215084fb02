"""``tracelab`` command line: verify, train-score, distill, sweep, dump-gradients, plot.

Everything a command writes lives under ``--out``.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from tracelab import _rng, io, verify
from tracelab.config import RunConfig, default_config, dump_config, load_config
from tracelab.distill import DistillationAborted, RunRecord, config_hash, gradient_field, gradient_grid, run_distillation
from tracelab.errors import ConfigError, TrainingError
from tracelab.nn import (
    DsmHyper,
    Mlp,
    MlpScore,
    TrainReport,
    init_adapter,
    init_mlp,
    load_snapshot,
    mse_to_optimal,
    save_snapshot,
    train_dsm,
)
from tracelab.render import DirectField, ViewTransform, sample_view

log = logging.getLogger("tracelab")

N_RENDER_VIEWS = 8
_RENDER_VIEWS_TAG = 120
GRID_HALF_WIDTH = 7.0
GRID_POINTS = 21


# score model ---------------------------------------------------------------------


def _score_key(cfg: RunConfig) -> dict:
    # everything the pretrained network depends on
    return {
        "seed": cfg.seed, "schedule": cfg.to_dict()["schedule"], "family": cfg.to_dict()["family"],
        "model": cfg.to_dict()["model"], "dsm": cfg.to_dict()["dsm"], "x_dim": cfg.layout().x_dim,
    }


def _score_hash(cfg: RunConfig) -> str:
    return config_hash(_score_key(cfg))


def cmd_train_score(cfg: RunConfig, out: Path) -> tuple[Mlp, TrainReport]:
    """Denoising score matching against the configured family; writes snapshot and report."""
    fam = cfg.build_family()
    sched = cfg.schedule.build()
    model = init_mlp(cfg.layout(), cfg.model.hidden, cfg.model.activation, seed=cfg.seed)
    hyper = DsmHyper(cfg.dsm.steps, cfg.dsm.batch, cfg.dsm.lr, cfg.dsm.t_range, cfg.dsm.uncond_prob, cfg.seed)
    report = train_dsm(model, fam, sched, hyper)
    ys = list(range(len(fam))) + ([None] if len(fam) > 1 else [])
    mse = {str(y): mse_to_optimal(model, fam.condition(y), sched, y) for y in ys}
    stamp = {"config_hash": _score_hash(cfg), "seed": cfg.seed}
    save_snapshot(out / "score" / "base", model, extra=stamp)
    payload = dict(stamp, snapshot=report.snapshot_id, steps=len(report.losses), mse_to_optimal=mse,
                   final_loss=float(np.mean(report.losses[-100:])) if report.losses else None)
    io.write_json(out / "score" / "report.json", payload)
    io.write_csv(out / "score" / "losses.csv", stamp, ["step", "loss"], enumerate(report.losses))
    return model, report


def ensure_score(cfg: RunConfig, out: Path) -> Mlp:
    """Load the pretrained network from ``out/score`` if it matches the config, else train it."""
    manifest = out / "score" / "base.json"
    if manifest.exists():
        meta = json.loads(manifest.read_text()).get("extra", {})
        if meta.get("config_hash") == _score_hash(cfg):
            return load_snapshot(out / "score" / "base")[0]
    log.info("training score network (%d DSM steps)", cfg.dsm.steps)
    return cmd_train_score(cfg, out)[0]


def _eps_model(cfg: RunConfig, base: Mlp, seed: int) -> MlpScore:
    adapter = init_adapter(base, cfg.model.adapter_rank, cfg.model.adapter_scale, seed=seed)
    prior = cfg.build_prior()
    proj = getattr(prior, "projection", None)
    return MlpScore(base.copy(), adapter, proj)


# distillation ---------------------------------------------------------------------


def _render_views(cfg: RunConfig) -> list[ViewTransform]:
    ranges = cfg.distill.build(cfg.seed).view_ranges
    return [sample_view(_rng.stream(cfg.seed, _RENDER_VIEWS_TAG, v), ranges) for v in range(N_RENDER_VIEWS)]


def _write_renders(cfg: RunConfig, gen, thetas: np.ndarray, out: Path, stamp: dict) -> None:
    for v, view in enumerate(_render_views(cfg)):
        imgs = np.stack([gen.render(th, view) for th in thetas])  # (P, H, W, C)
        p, h, w, c = imgs.shape
        # particles stacked vertically, channels side by side
        montage = imgs.transpose(0, 1, 3, 2).reshape(p * h, c * w)
        io.write_pgm(out / f"view{v}.pgm", montage, dict(stamp, view=v))


def _toy_grid() -> np.ndarray:
    g = np.linspace(-GRID_HALF_WIDTH, GRID_HALF_WIDTH, GRID_POINTS)
    xx, yy = np.meshgrid(g, g, indexing="xy")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def write_gradient_dump(cfg: RunConfig, method: str, gen, thetas, eps_model, iteration: int, path: Path, stamp: dict):
    """Canvas-gradient statistics at the current state.

    Two-pixel direct fields get a vector field over a grid of canvases;
    everything else gets the gradient image at the first particle.
    """
    dcfg = cfg.distill.build(cfg.seed)
    prior, sp, sb = cfg.build_prior(), cfg.schedule.build(), cfg.bridge_schedule.build()
    stamp = dict(stamp, method=method, iteration=iteration)
    if isinstance(gen, DirectField) and cfg.canvas_dim() == 2:
        pts = _toy_grid()
        mean, var = gradient_grid(pts, method, dcfg, prior, sp, eps_model, sb, iteration=iteration)
        rows = [(*p, *m, *v) for p, m, v in zip(pts, mean, var)]
        io.write_csv(path.with_name(path.name + ".csv"), dict(stamp, kind="grid"),
                     ["x0", "x1", "g0", "g1", "var0", "var1"], rows)
        mag = np.linalg.norm(mean, axis=1).reshape(GRID_POINTS, GRID_POINTS)[::-1]
        io.write_pgm(path.with_name(path.name + ".pgm"), mag, dict(stamp, kind="grid_magnitude"))
        return
    field = gradient_field(gen, thetas[0], method, dcfg, prior, sp, eps_model, sb, iteration=iteration)
    flat = field.mean.reshape(-1, gen.canvas_shape[-1])
    io.write_csv(path.with_name(path.name + ".csv"), dict(stamp, kind="canvas"),
                 [f"c{k}" for k in range(flat.shape[1])], flat)
    io.write_pgm(path.with_name(path.name + ".pgm"), field.magnitude, dict(stamp, kind="canvas_magnitude"))


def run_one(
    cfg: RunConfig,
    method: str,
    base: Mlp,
    out: Optional[Path] = None,
    dumps: bool = True,
) -> RunRecord:
    """One distillation run; with ``out`` set, writes record, summary, renders and gradient dumps."""
    gen = cfg.generator.build()
    dcfg = cfg.distill.build(cfg.seed)
    prior = cfg.build_prior()
    eps_model = _eps_model(cfg, base, cfg.seed)
    theta0 = cfg.theta0()
    stamp = io.provenance(cfg.hash(), cfg.seed)
    total = dcfg.total_iterations
    dump_at = {0, total // 2, total - 1} if total > 0 else set()

    def _dump(it, thetas):
        if out is not None and dumps and it in dump_at:
            write_gradient_dump(cfg, method, gen, thetas, eps_model, it, out / "gradients" / f"iter{it:05d}", stamp)

    try:
        record = run_distillation(
            dcfg, gen, theta0, prior, eps_model, method, cfg.schedule.build(), cfg.bridge_schedule.build(),
            header={"config_hash": cfg.hash(), "run_config": cfg.to_dict()}, on_iteration=_dump,
        )
    except DistillationAborted as exc:
        if out is not None:
            _write_record(exc.record, out, stamp)
        raise
    if out is not None:
        _write_record(record, out, stamp)
        thetas = record.theta if record.theta.ndim > len(gen.param_shape) else record.theta[None]
        _write_renders(cfg, gen, thetas, out / "renders", stamp)
        flat = thetas.reshape(thetas.shape[0], -1)
        io.write_csv(out / "theta.csv", stamp, [f"p{k}" for k in range(flat.shape[1])], flat)
    return record


def _write_record(record: RunRecord, out: Path, stamp: dict) -> None:
    io.write_text(out / "record.jsonl", record.to_jsonl())
    io.write_text(out / "summary.txt", "".join(f"# {k}: {stamp[k]}\n" for k in sorted(stamp)) + record.summary())


def cmd_distill(cfg: RunConfig, method: str, out: Path) -> RunRecord:
    base = ensure_score(cfg, out)
    return run_one(cfg, method, base, out / "distill" / method)


# sweep -------------------------------------------------------------------------------

SWEEP_COLUMNS = ["method", "cfg", "seed", "sliced_w1", "mmd", "wall_clock", "status"]


def _sweep_job(args) -> tuple:
    cfg, method, base, run_dir = args
    start = time.perf_counter()
    try:
        rec = run_one(cfg, method, base, run_dir, dumps=False)
        row = (rec.final["sliced_w1"], rec.final["mmd"], "ok")
    except (DistillationAborted, TrainingError, ConfigError, FloatingPointError) as exc:
        row = (float("nan"), float("nan"), f"error: {type(exc).__name__}: {exc}".replace("\n", " "))
    return (method, cfg.distill.cfg_weight, cfg.seed, row[0], row[1], time.perf_counter() - start, row[2])


def sweep_configs(cfg: RunConfig, methods, cfg_weights, seeds) -> list[tuple[str, RunConfig]]:
    out = []
    for method, w, s in itertools.product(methods, cfg_weights, seeds):
        dist = dataclasses.replace(cfg.distill, cfg_weight=float(w))
        out.append((method, dataclasses.replace(cfg, seed=int(s), distill=dist)))
    return out


def stability_summary(rows: Sequence[tuple], low=(5.0, 7.5, 10.0), high=(15.0, 20.0, 25.0, 50.0, 100.0)) -> dict:
    """Per (method, cfg) mean/variance over seeds, plus the across-cfg variance of those means."""
    by: dict = {}
    for method, w, _seed, sw, *_ in rows:
        by.setdefault(method, {}).setdefault(float(w), []).append(float(sw))
    summary = {}
    for method, cells in by.items():
        means = {w: float(np.mean(v)) for w, v in cells.items()}
        entry = {
            "per_cfg": {repr(w): {"mean": means[w], "var_over_seeds": float(np.var(v)), "n": len(v)}
                        for w, v in sorted(cells.items())},
        }
        lo = [means[w] for w in low if w in means]
        hi = [means[w] for w in high if w in means]
        if len(lo) > 1 and len(hi) > 1:
            entry["var_low_cfg"] = float(np.var(lo))
            entry["var_high_cfg"] = float(np.var(hi))
            entry["plateau"] = bool(entry["var_high_cfg"] <= 2.0 * entry["var_low_cfg"])
        summary[method] = entry
    return summary


def cmd_sweep(cfg: RunConfig, out: Path, methods=None, cfg_weights=None, seeds=None, jobs: int = 1) -> list[tuple]:
    methods = list(methods or cfg.sweep.methods)
    cfg_weights = list(cfg_weights or cfg.sweep.cfg_weights)
    seeds = list(seeds if seeds is not None else cfg.sweep.seeds)
    if not methods or not cfg_weights or not seeds:
        raise ConfigError("sweep lists must be non-empty")
    base = ensure_score(cfg, out)
    jobs_args = [
        (c, m, base, out / "sweep" / "runs" / f"{m}_w{c.distill.cfg_weight:g}_s{c.seed}")
        for m, c in sweep_configs(cfg, methods, cfg_weights, seeds)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_job, jobs_args))
    else:
        rows = [_sweep_job(a) for a in jobs_args]
    stamp = io.provenance(cfg.hash(), cfg.seed)
    io.write_csv(out / "sweep" / "sweep.csv", stamp, SWEEP_COLUMNS, rows)
    io.write_json(out / "sweep" / "stability.json", dict(stamp, methods=stability_summary(rows)))
    return rows


# gradient dumps and plots --------------------------------------------------------------


def cmd_dump_gradients(cfg: RunConfig, out: Path, methods=("sds", "trace")) -> list[Path]:
    """Gradient fields at the initial state for each method."""
    base = ensure_score(cfg, out)
    gen = cfg.generator.build()
    thetas = cfg.theta0()
    stamp = io.provenance(cfg.hash(), cfg.seed)
    written = []
    for m in methods:
        path = out / "gradients" / f"{m}_field"
        write_gradient_dump(cfg, m, gen, thetas, _eps_model(cfg, base, cfg.seed), 0, path, stamp)
        written.append(path.with_name(path.name + ".csv"))
    return written


def cmd_plot(out: Path) -> list[Path]:
    from tracelab import plots

    return plots.plot_all(out)


def cmd_verify(out: Path) -> int:
    results = verify.run_checks()
    io.write_text(out / "verify.json", verify.report(results))
    failed = [c.name for c in results if not c.passed]
    for c in results:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}  value={c.value:.3e}  tol={c.tolerance:.1e}")
    if failed:
        print("failed checks: " + ", ".join(failed), file=sys.stderr)
        return 1
    print(f"all {len(results)} checks passed")
    return 0


# entry point ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tracelab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, method=False, jobs=False):
        sp.add_argument("--config", type=Path, help="YAML run config (default: the built-in toy scene)")
        sp.add_argument("--out", type=Path, help="output directory (default: the config's 'out')")
        sp.add_argument("--seed", type=int, help="override the config seed")
        if method:
            sp.add_argument("--method", choices=("sds", "trace"), default="trace")
        if jobs:
            sp.add_argument("--jobs", type=int, default=1, help="parallel runs")

    sp = sub.add_parser("verify", help="run the self-check suite")
    sp.add_argument("--out", type=Path, default=Path("runs/verify"))
    common(sub.add_parser("train-score", help="train the score network by denoising score matching"))
    common(sub.add_parser("distill", help="one distillation run"), method=True)
    sp = sub.add_parser("sweep", help="runs over methods x CFG weights x seeds")
    common(sp, jobs=True)
    sp.add_argument("--methods", nargs="+", choices=("sds", "trace"))
    sp.add_argument("--cfg-weights", nargs="+", type=float)
    sp.add_argument("--seeds", nargs="+", type=int)
    sp = sub.add_parser("dump-gradients", help="gradient fields at the initial state")
    common(sp)
    sp.add_argument("--method", choices=("sds", "trace"))
    sp = sub.add_parser("plot", help="PNG plots from whatever the output directory holds")
    sp.add_argument("--out", type=Path, required=True)
    sub.add_parser("show-config", help="print the effective config").add_argument("--config", type=Path)
    return p


def _resolve(args) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config) if getattr(args, "config", None) else default_config()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    out = args.out if getattr(args, "out", None) is not None else Path(cfg.out)
    return cfg, out


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.command == "verify":
            return cmd_verify(args.out)
        if args.command == "plot":
            for path in cmd_plot(args.out):
                print(path)
            return 0
        if args.command == "show-config":
            cfg, _ = _resolve(args)
            print(dump_config(cfg), end="")
            return 0
        cfg, out = _resolve(args)
        out.mkdir(parents=True, exist_ok=True)
        io.write_text(out / "config.yaml", dump_config(cfg))
        if args.command == "train-score":
            cmd_train_score(cfg, out)
            print(json.dumps(json.loads((out / "score" / "report.json").read_text())["mse_to_optimal"]))
        elif args.command == "distill":
            rec = cmd_distill(cfg, args.method, out)
            print(rec.summary(), end="")
        elif args.command == "sweep":
            rows = cmd_sweep(cfg, out, args.methods, args.cfg_weights, args.seeds, args.jobs)
            print(f"{len(rows)} runs -> {out / 'sweep' / 'sweep.csv'}")
        elif args.command == "dump-gradients":
            methods = (args.method,) if args.method else ("sds", "trace")
            for path in cmd_dump_gradients(cfg, out, methods):
                print(path)
        return 0
    except DistillationAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
