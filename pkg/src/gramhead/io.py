"""Checkpoint files and CSV/SVG emitters.

Checkpoint layout (all integers little-endian)::

    b"GRMH"  u32 version  u32 header_len  header (UTF-8 JSON)
    u32 blob_count, then per blob in sorted name order:
        u16 name_len  name (UTF-8)  u8 ndim  u32[ndim] shape  f32[...] data
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"GRMH"
VERSION = 1

METRIC_COLUMNS = ["epoch", "split", "loss_ce", "loss_dec", "top1", "strength", "rho", "bound"]

PALETTE = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
]


def write_blobs(path, header: dict, blobs: dict[str, np.ndarray]) -> None:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head, struct.pack("<I", len(blobs))]
    for name in sorted(blobs):
        arr = np.ascontiguousarray(blobs[name], dtype="<f4")
        enc = name.encode("utf-8")
        parts.append(struct.pack("<H", len(enc)) + enc)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_blobs(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    try:
        version, hlen = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise FormatError(f"{path}: checkpoint version {version}, this build reads {VERSION}")
        pos = 12
        header = json.loads(buf[pos : pos + hlen].decode("utf-8"))
        pos += hlen
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        blobs = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if pos + 4 * n > len(buf):
                raise FormatError(f"{path}: blob {name!r} runs past end of file")
            blobs[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
            pos += 4 * n
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    return header, blobs


def save_checkpoint(model, meta: dict, path, optimizer=None) -> None:
    """Persist parameters, batch-norm statistics and (optionally) momentum."""
    blobs = {f"param.{k}": v.data for k, v in model.named_parameters().items()}
    blobs.update({f"buffer.{k}": v for k, v in model.named_buffers().items()})
    tracked = {name: st.tracked for name, st in model.backbone.bn.items()}
    if optimizer is not None:
        blobs.update({f"momentum.{k}": v for k, v in optimizer.state_dict().items()})
    header = dict(meta)
    header["model"] = model.config.to_dict()
    header["head_ids"] = model.head_ids
    header["bn_tracked"] = tracked
    write_blobs(path, header, blobs)


def load_checkpoint(path, optimizer_factory=None):
    """Rebuild a model from a checkpoint; returns ``(model, header)``.

    With ``optimizer_factory`` the result is ``(model, header, optimizer)``
    where the optimizer's momentum buffers are restored.
    """
    from .ensemble import ModelConfig, build_model, prune_heads

    header, blobs = read_blobs(path)
    config = ModelConfig(**header["model"])
    model = build_model(config, seed=0, dtype=np.float32)
    head_ids = header.get("head_ids", list(range(config.num_heads)))
    if head_ids != list(range(config.num_heads)):
        model = prune_heads(model, head_ids)
    for name, tensor in model.named_parameters().items():
        key = f"param.{name}"
        if key not in blobs:
            raise FormatError(f"{path}: missing parameter {name!r}")
        if blobs[key].shape != tensor.shape:
            raise FormatError(f"{path}: parameter {name!r} has shape {blobs[key].shape}, expected {tensor.shape}")
        tensor.data[...] = blobs[key]
    for name, arr in model.named_buffers().items():
        key = f"buffer.{name}"
        if key not in blobs:
            raise FormatError(f"{path}: missing buffer {name!r}")
        arr[...] = blobs[key]
    for name, st in model.backbone.bn.items():
        st.tracked = int(header.get("bn_tracked", {}).get(name, 1))
    if optimizer_factory is None:
        return model, header
    opt = optimizer_factory(model)
    state = {k[len("momentum."):]: v for k, v in blobs.items() if k.startswith("momentum.")}
    opt.load_state_dict(state)
    return model, header, opt


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_metrics(history: list[dict], path) -> None:
    """Write ``history`` rows as CSV with the fixed metric columns."""
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_COLUMNS)
            for row in history:
                w.writerow([_fmt(row.get(c)) for c in METRIC_COLUMNS])
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_table(rows: list[dict], columns: list[str], path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                w.writerow([_fmt(row.get(c)) for c in columns])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def write_features(features: dict[int, np.ndarray], labels: np.ndarray, path) -> None:
    """CSV with header ``head,example,dim_0..dim_{D-1},label``."""
    dims = next(iter(features.values())).shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["head", "example"] + [f"dim_{i}" for i in range(dims)] + ["label"])
        for head in sorted(features):
            for ex, row in enumerate(features[head]):
                w.writerow([head, ex] + [repr(float(v)) for v in row] + [int(labels[ex])])


def read_features(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(heads, examples, features, labels)`` arrays."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[:2] != ["head", "example"] or header[-1] != "label":
            raise FormatError(f"{path}: unexpected feature header {header[:3]}...")
        rows = list(r)
    if not rows:
        raise FormatError(f"{path}: no feature rows")
    arr = np.array(rows, dtype=np.float64)
    return arr[:, 0].astype(int), arr[:, 1].astype(int), arr[:, 2:-1], arr[:, -1].astype(int)


def emit_scatter(points, path, size: int = 480, radius: float = 2.5) -> None:
    """SVG scatter with one circle per ``(x, y, head)`` point, colored by head."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    margin = 10.0
    if len(pts):
        lo = pts[:, :2].min(axis=0)
        span = np.maximum(pts[:, :2].max(axis=0) - lo, 1e-12)
    circles = []
    for x, y, head in pts:
        cx = margin + (x - lo[0]) / span[0] * (size - 2 * margin)
        cy = size - margin - (y - lo[1]) / span[1] * (size - 2 * margin)
        color = PALETTE[int(head) % len(PALETTE)]
        circles.append(
            f'<circle cx="{cx:.3f}" cy="{cy:.3f}" r="{radius}" fill="{color}" data-head="{int(head)}"/>'
        )
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">\n'
        f'<rect width="{size}" height="{size}" fill="white"/>\n'
        + "\n".join(circles)
        + "\n</svg>\n"
    )
    try:
        Path(path).write_text(svg)
    except OSError as exc:
        raise OSError(f"cannot write scatter to {path}: {exc}") from exc
