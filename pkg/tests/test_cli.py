import json

import pytest

from tracelab import io
from tracelab.cli import SWEEP_COLUMNS, main, stability_summary
from tracelab.nn import load_snapshot


def _files(root):
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())


def _strip_wall_clock(path):
    rows, meta = io.read_csv(path)
    return meta, [{k: v for k, v in r.items() if k != "wall_clock"} for r in rows]


def test_show_config(small_yaml, capsys):
    assert main(["show-config", "--config", str(small_yaml)]) == 0
    assert "steps: 300" in capsys.readouterr().out


def test_bad_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("nonsense: 1\n")
    assert main(["train-score", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_train_score_outputs(small_yaml, tmp_path):
    out = tmp_path / "ts"
    assert main(["train-score", "--config", str(small_yaml), "--out", str(out)]) == 0
    report = json.loads((out / "score" / "report.json").read_text())
    assert report["steps"] == 300 and set(report["mse_to_optimal"]) == {"0", "1", "None"}
    model, adapter = load_snapshot(out / "score" / "base")
    assert adapter is None and model.fingerprint() == report["snapshot"]
    _, meta = io.read_csv(out / "score" / "losses.csv")
    assert meta["config_hash"] == report["config_hash"]


@pytest.mark.parametrize("method", ["sds", "trace"])
def test_distill_outputs_and_determinism(small_yaml, tmp_path, method):
    runs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        assert main(["distill", "--config", str(small_yaml), "--out", str(out), "--method", method]) == 0
        runs.append(out)
    a, b = runs
    assert _files(a) == _files(b)
    files = [str(p) for p in _files(a)]
    run = a / "distill" / method
    for name in ("record.jsonl", "summary.txt", "theta.csv", "renders/view7.pgm",
                 "gradients/iter00000.csv", "gradients/iter00020.csv", "gradients/iter00039.csv"):
        assert (run / name).exists(), (name, files)
    for rel in _files(a):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    header = json.loads((run / "record.jsonl").read_text().splitlines()[0])
    _, meta = io.read_pgm(run / "renders" / "view0.pgm")
    assert header["config_hash"] == meta["config_hash"] and meta["seed"] == "0"


def test_seed_override_changes_outputs(small_yaml, tmp_path):
    main(["distill", "--config", str(small_yaml), "--out", str(tmp_path / "a"), "--method", "sds"])
    main(["distill", "--config", str(small_yaml), "--out", str(tmp_path / "b"), "--method", "sds", "--seed", "1"])
    ta = (tmp_path / "a" / "distill" / "sds" / "theta.csv").read_text()
    tb = (tmp_path / "b" / "distill" / "sds" / "theta.csv").read_text()
    assert ta != tb


def test_sweep_plot_and_parallel_determinism(small_yaml, tmp_path):
    serial, parallel = tmp_path / "s", tmp_path / "p"
    assert main(["sweep", "--config", str(small_yaml), "--out", str(serial)]) == 0
    assert main(["sweep", "--config", str(small_yaml), "--out", str(parallel), "--jobs", "2"]) == 0
    rows, meta = io.read_csv(serial / "sweep" / "sweep.csv")
    assert list(rows[0]) == SWEEP_COLUMNS and len(rows) == 2 * 2 * 2
    assert all(r["status"] == "ok" for r in rows)
    assert _strip_wall_clock(serial / "sweep" / "sweep.csv") == _strip_wall_clock(parallel / "sweep" / "sweep.csv")
    assert (serial / "sweep" / "stability.json").read_bytes() == (parallel / "sweep" / "stability.json").read_bytes()
    assert main(["plot", "--out", str(serial)]) == 0
    assert (serial / "plots" / "sweep_sliced_w1.png").stat().st_size > 0


def test_single_row_sweep(small_yaml, tmp_path):
    out = tmp_path / "one"
    assert main(["sweep", "--config", str(small_yaml), "--out", str(out), "--methods", "trace",
                 "--cfg-weights", "20", "--seeds", "0"]) == 0
    rows, _ = io.read_csv(out / "sweep" / "sweep.csv")
    assert [(r["method"], r["cfg"], r["seed"]) for r in rows] == [("trace", "20.0", "0")]


def test_dump_gradients(small_yaml, tmp_path):
    out = tmp_path / "g"
    assert main(["dump-gradients", "--config", str(small_yaml), "--out", str(out)]) == 0
    for m in ("sds", "trace"):
        rows, meta = io.read_csv(out / "gradients" / f"{m}_field.csv")
        assert len(rows) == 21 * 21 and meta["kind"] == "grid" and meta["method"] == m
    assert main(["plot", "--out", str(out)]) == 0
    assert (out / "plots" / "gradients_trace_field.png").exists()


def test_stability_summary():
    rows = [("trace", w, s, v, 0.0, 0.0, "ok") for w, s, v in [
        (5.0, 0, 1.0), (5.0, 1, 1.2), (10.0, 0, 2.0), (10.0, 1, 2.0),
        (20.0, 0, 1.5), (20.0, 1, 1.5), (50.0, 0, 1.5), (50.0, 1, 1.5)]]
    s = stability_summary(rows)["trace"]
    assert s["per_cfg"]["5.0"]["mean"] == pytest.approx(1.1)
    assert s["per_cfg"]["5.0"]["var_over_seeds"] == pytest.approx(0.01)
    assert s["var_high_cfg"] == 0.0 and s["plateau"]
