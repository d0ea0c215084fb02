"""Artifact writers. Every file starts with (or embeds) the config hash and seed."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from tracelab.errors import DomainError


def provenance(config_hash: str, seed: int, **extra) -> dict:
    out = {"config_hash": config_hash, "seed": int(seed)}
    out.update(extra)
    return out


def _ensure_parent(path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _to_gray8(image, lo: float | None, hi: float | None) -> tuple[np.ndarray, float, float]:
    img = np.asarray(image, dtype=float)
    if img.ndim == 3 and img.shape[-1] == 1:
        img = img[..., 0]
    if img.ndim != 2:
        raise DomainError(f"expected a single-channel image, got shape {img.shape}")
    lo = float(np.min(img)) if lo is None else float(lo)
    hi = float(np.max(img)) if hi is None else float(hi)
    span = hi - lo if hi > lo else 1.0
    q = np.clip(np.round((img - lo) / span * 255.0), 0, 255).astype(np.uint8)
    return q, lo, hi


def write_pgm(path, image, header: dict, lo: float | None = None, hi: float | None = None) -> Path:
    """Binary PGM; the header dict and the intensity range go in comment lines."""
    path = _ensure_parent(path)
    q, lo, hi = _to_gray8(image, lo, hi)
    lines = ["P5"] + [f"# {k}: {header[k]}" for k in sorted(header)]
    lines += [f"# range: {lo!r} {hi!r}", f"{q.shape[1]} {q.shape[0]}", "255"]
    path.write_bytes(("\n".join(lines) + "\n").encode() + q.tobytes())
    return path


def read_pgm(path) -> tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    buf = io.BytesIO(raw)
    if buf.readline().strip() != b"P5":
        raise DomainError(f"{path} is not a binary PGM")
    meta = {}
    line = buf.readline()
    while line.startswith(b"#"):
        key, _, val = line[1:].decode().strip().partition(": ")
        meta[key] = val
        line = buf.readline()
    w, h = map(int, line.split())
    buf.readline()
    data = np.frombuffer(buf.read(w * h), dtype=np.uint8).reshape(h, w)
    return data, meta


def write_png(path, image, header: dict, lo: float | None = None, hi: float | None = None) -> Path:
    """8-bit PNG with the header dict stored as text chunks."""
    path = _ensure_parent(path)
    img = np.asarray(image, dtype=float)
    if img.ndim == 3 and img.shape[-1] == 3:
        lo_ = float(img.min()) if lo is None else lo
        hi_ = float(img.max()) if hi is None else hi
        span = hi_ - lo_ if hi_ > lo_ else 1.0
        q = np.clip(np.round((img - lo_) / span * 255.0), 0, 255).astype(np.uint8)
        pil = Image.fromarray(q, "RGB")
        lo, hi = lo_, hi_
    else:
        q, lo, hi = _to_gray8(img, lo, hi)
        pil = Image.fromarray(q, "L")
    info = PngInfo()
    for k in sorted(header):
        info.add_text(k, str(header[k]))
    info.add_text("range", f"{lo!r} {hi!r}")
    pil.save(path, pnginfo=info)
    return path


def write_csv(path, header: dict, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = _ensure_parent(path)
    buf = io.StringIO()
    for k in sorted(header):
        buf.write(f"# {k}: {header[k]}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    path.write_text(buf.getvalue())
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def read_csv(path) -> tuple[list[dict], dict]:
    """Rows as dicts of strings plus the ``# key: value`` header."""
    meta, body = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            k, _, v = line[1:].strip().partition(": ")
            meta[k] = v
        else:
            body.append(line)
    return list(csv.DictReader(body)), meta


def write_json(path, payload: dict) -> Path:
    path = _ensure_parent(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def write_text(path, text: str) -> Path:
    path = _ensure_parent(path)
    path.write_text(text)
    return path
