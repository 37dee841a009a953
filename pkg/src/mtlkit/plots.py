"""SVG loss curves and PPM prediction panels.

Curve coordinates use a fixed linear map so plotted values can be read back:

    x_px = LEFT + (epoch - e_lo) / (e_hi - e_lo) * PLOT_W
    y_px = TOP + (v_hi - value) / (v_hi - v_lo) * PLOT_H

where ``[e_lo, e_hi]`` and ``[v_lo, v_hi]`` are the data ranges over all
plotted runs. A degenerate range is widened by 0.5 on each side. The ranges
are written into the SVG as ``data-*`` attributes of the ``<svg>`` element.
"""

from __future__ import annotations

import re
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import gradcore as gc
from . import losses as L
from .errors import ContractViolation, StorageError
from .harness import read_csv
from .model import TinySegNet
from .scenes import PALETTE, Sample

QUANTITIES = {
    "seg_loss": "test_seg", "depth_loss": "test_depth", "normal_loss": "test_normal",
    "train_seg_loss": "train_seg", "train_depth_loss": "train_depth", "train_normal_loss": "train_normal",
    "miou": "miou", "depth_rmse": "depth_rmse", "normal_angle": "normal_angle",
}
WIDTH, HEIGHT = 640, 400
LEFT, TOP, PLOT_W, PLOT_H = 70, 30, 540, 320
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"]


def _range(values):
    lo, hi = float(min(values)), float(max(values))
    if hi - lo <= 0:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def to_pixels(epoch, value, e_range, v_range):
    x = LEFT + (epoch - e_range[0]) / (e_range[1] - e_range[0]) * PLOT_W
    y = TOP + (v_range[1] - value) / (v_range[1] - v_range[0]) * PLOT_H
    return x, y


def from_pixels(x, y, e_range, v_range):
    epoch = e_range[0] + (x - LEFT) / PLOT_W * (e_range[1] - e_range[0])
    value = v_range[1] - (y - TOP) / PLOT_H * (v_range[1] - v_range[0])
    return epoch, value


def plot(run_dirs, quantity: str, out_path) -> Path:
    """One polyline per run of ``quantity`` against epoch."""
    if quantity not in QUANTITIES:
        raise ContractViolation(f"unknown quantity {quantity!r}; choose from {sorted(QUANTITIES)}")
    col = QUANTITIES[quantity]
    series = []
    for run in run_dirs:
        rows = read_csv(Path(run) / "epochs.csv")
        pts = [(int(r["epoch"]), float(r[col])) for r in rows if r[col] != ""]
        if pts:
            series.append((Path(run).name or str(run), pts))
    if not series:
        raise ContractViolation(f"no run records {quantity}")
    e_range = _range([e for _, pts in series for e, _ in pts])
    v_range = _range([v for _, pts in series for _, v in pts])

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'data-quantity="{quantity}" data-epoch-range="{e_range[0]!r} {e_range[1]!r}" '
        f'data-value-range="{v_range[0]!r} {v_range[1]!r}">',
        f'<rect x="{LEFT}" y="{TOP}" width="{PLOT_W}" height="{PLOT_H}" fill="none" stroke="#888"/>',
        f'<text x="{LEFT}" y="{TOP - 10}" font-size="13">{escape(quantity)}</text>',
        f'<text x="{LEFT - 5}" y="{TOP + 4}" font-size="10" text-anchor="end">{v_range[1]:.4g}</text>',
        f'<text x="{LEFT - 5}" y="{TOP + PLOT_H}" font-size="10" text-anchor="end">{v_range[0]:.4g}</text>',
        f'<text x="{LEFT}" y="{TOP + PLOT_H + 15}" font-size="10">{e_range[0]:g}</text>',
        f'<text x="{LEFT + PLOT_W}" y="{TOP + PLOT_H + 15}" font-size="10" text-anchor="end">{e_range[1]:g}</text>',
    ]
    for i, (name, pts) in enumerate(series):
        color = COLORS[i % len(COLORS)]
        coords = " ".join("{:.6f},{:.6f}".format(*to_pixels(e, v, e_range, v_range)) for e, v in pts)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" data-run="{escape(name)}" points="{coords}"/>')
        parts.append(f'<text x="{LEFT + PLOT_W - 5}" y="{TOP + 15 + 14 * i}" font-size="11" '
                     f'text-anchor="end" fill="{color}">{escape(name)}</text>')
    parts.append("</svg>")
    out = Path(out_path)
    try:
        out.write_text("\n".join(parts) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write {out}: {exc}") from exc
    return out


def _to_bytes(img):
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def label_colors(labels: np.ndarray) -> np.ndarray:
    """H x W x 3 uint8 image using the scene palette."""
    return _to_bytes(PALETTE[labels])


def predict(model: TinySegNet, image: np.ndarray):
    """(class map, depth map, code map) for one C x H x W image."""
    tape = gc.Tape(model.params)
    out = model.forward(tape, image[None])
    return out.seg.data[0].argmax(axis=0), out.disparity.data[0, 0], out.normal.data[0].argmax(axis=0)


def render_panels(model: TinySegNet, sample: Sample) -> np.ndarray:
    """Input, predicted labels, predicted depth and predicted normals side by side."""
    labels, disp, codes = predict(model, sample.left)
    depth = L.depth_from_disparity(disp, sample.focal, sample.baseline)
    lo, hi = depth.min(), depth.max()
    gray = 1.0 - (depth - lo) / (hi - lo) if hi > lo else np.zeros_like(depth)
    book = L.build_codebook(model.config.num_codes)
    normals = (book.codes[codes] + 1.0) / 2.0
    panels = [
        _to_bytes(np.moveaxis(sample.left, 0, -1)),
        label_colors(labels),
        _to_bytes(np.repeat(gray[..., None], 3, axis=-1)),
        _to_bytes(normals),
    ]
    return np.concatenate(panels, axis=1)


def write_ppm(path, rgb: np.ndarray) -> Path:
    h, w, _ = rgb.shape
    out = Path(path)
    try:
        with open(out, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())
    except OSError as exc:
        raise StorageError(f"cannot write {out}: {exc}") from exc
    return out


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+255\s", data)
    if m is None:
        raise StorageError(f"{path}: not a binary 8-bit PPM")
    w, h = int(m[1]), int(m[2])
    return np.frombuffer(data[m.end(): m.end() + w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def visualize(checkpoint, sample_path, out_path) -> Path:
    model = TinySegNet.load(checkpoint)
    sample = Sample.load(sample_path)
    return write_ppm(out_path, render_panels(model, sample))
