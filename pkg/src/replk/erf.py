"""Effective receptive field measurement.

For each input sample the central spatial position of every output channel
is summed, pulled back to the input through the graph's VJP chain, and the
negative part discarded.  Scores are summed over samples and input channels
(``raw``), mapped through ``log10(raw + 1)`` and divided by their maximum
(``A``).  The area ratio at threshold ``t`` is the fraction of the input
covered by the smallest centered square holding ``t`` of the total score.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model.graph import LayerGraph, ModelWeights, forward, vjp
from .tensor import Rng, Uniform, as_tensor

__all__ = [
    "ERFMap",
    "AreaRatioReport",
    "DegenerateMapError",
    "sample_inputs",
    "compute_erf",
    "area_ratio",
    "theoretical_erf",
    "render_heatmap",
    "read_pgm",
    "read_image",
    "support_side",
    "DEFAULT_THRESHOLDS",
]

DEFAULT_THRESHOLDS = (0.2, 0.3, 0.5, 0.99)


class DegenerateMapError(ValueError):
    """Area ratios are undefined on an all-zero contribution map."""


@dataclass
class ERFMap:
    A: np.ndarray
    raw: np.ndarray
    n_samples: int
    input_size: tuple

    @property
    def degenerate(self) -> bool:
        return not np.any(self.raw > 0)


@dataclass
class AreaRatioReport:
    rows: list = field(default_factory=list)   # (threshold, side, ratio)
    source: str = "raw"

    def ratios(self) -> dict:
        return {t: r for t, _, r in self.rows}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("threshold", "side", "ratio"))
        for t, side, r in self.rows:
            writer.writerow((f"{t:.4f}", side, f"{r:.6f}"))
        return buf.getvalue()


def sample_inputs(n: int, size: int, seed: int = 0, channels: int = 3) -> np.ndarray:
    return Rng(seed).sample((n, channels, size, size), Uniform(0.0, 1.0))


def compute_erf(graph: LayerGraph, weights: ModelWeights, inputs, backend: str = "blocked",
                batch_size: int = 4) -> ERFMap:
    if graph.has_head:
        raise ValueError("ERF needs the last feature map: evaluate a headless graph "
                         "(graph.without_head())")
    x = as_tensor(inputs)
    raw = np.zeros(x.shape[2:], dtype=np.float64)
    for start in range(0, x.shape[0], batch_size):
        chunk = x[start:start + batch_size]
        out, values = forward(graph, weights, chunk, backend=backend, keep=True)
        seed = np.zeros_like(out)
        seed[:, :, out.shape[2] // 2, out.shape[3] // 2] = 1.0
        grad = vjp(graph, weights, values, seed)
        raw += np.maximum(grad, 0).astype(np.float64).sum(axis=(0, 1))
    A = np.log1p(raw) / math.log(10.0)
    peak = A.max()
    if peak > 0:
        A = A / peak
    return ERFMap(A, raw, x.shape[0], tuple(x.shape[2:]))


def area_ratio(erf: ERFMap, thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
               on: str = "raw") -> AreaRatioReport:
    """Smallest centered square holding at least fraction ``t`` of the total score.

    Squares are centered at ``(h // 2, w // 2)``; a side-``s`` square spans
    rows ``[h//2 - s//2, h//2 - s//2 + s)``.  On non-square maps the square
    is clipped to the map and the ratio uses the clipped area.
    """
    if on not in ("raw", "log"):
        raise ValueError(f"on must be 'raw' or 'log', got {on!r}")
    scores = erf.raw if on == "raw" else erf.A
    if not np.any(scores > 0):
        raise DegenerateMapError("contribution map is all zero")
    h, w = scores.shape
    csum = np.zeros((h + 1, w + 1), dtype=np.float64)
    csum[1:, 1:] = np.cumsum(np.cumsum(scores.astype(np.float64), axis=0), axis=1)
    total = csum[-1, -1]
    ch, cw = h // 2, w // 2

    def window(s):
        r0, c0 = max(ch - s // 2, 0), max(cw - s // 2, 0)
        r1, c1 = min(ch - s // 2 + s, h), min(cw - s // 2 + s, w)
        mass = csum[r1, c1] - csum[r0, c1] - csum[r1, c0] + csum[r0, c0]
        return mass, (r1 - r0) * (c1 - c0)

    report = AreaRatioReport(source=on)
    for t in thresholds:
        if not 0 < t <= 1:
            raise ValueError(f"threshold must be in (0, 1], got {t}")
        target = t * total * (1 - 1e-12)
        lo, hi = 1, max(h, w)
        while lo < hi:  # nested squares: mass is monotone in s
            mid = (lo + hi) // 2
            if window(mid)[0] >= target:
                hi = mid
            else:
                lo = mid + 1
        _, area = window(lo)
        report.rows.append((float(t), min(lo, h, w), area / (h * w)))
    return report


def theoretical_erf(K: int, L: int) -> float:
    """Comparative ERF index ``K * sqrt(L)`` (linear in kernel size, sub-linear in depth)."""
    if K < 1 or L < 1:
        raise ValueError("K and L must be >= 1")
    return K * math.sqrt(L)


def support_side(a: np.ndarray) -> tuple:
    """(rows, cols) of the bounding box of the nonzero entries of ``a``."""
    rows = np.flatnonzero(np.any(a != 0, axis=1))
    cols = np.flatnonzero(np.any(a != 0, axis=0))
    if rows.size == 0:
        return 0, 0
    return int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1)


def render_heatmap(erf: ERFMap, path) -> Path:
    """Write ``A`` as an 8-bit binary PGM (``floor(A * 255 + 0.5)``) plus a ``.txt`` sidecar."""
    path = Path(path)
    img = np.floor(np.clip(erf.A, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = img.shape
    path.write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())
    sidecar = path.with_name(path.name + ".txt")
    sidecar.write_text(f"degenerate={str(erf.degenerate).lower()}\n"
                       f"n_samples={erf.n_samples}\ninput_size={h}x{w}\n")
    return path


def _read_pnm(path):
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1  # single whitespace before the raster
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval > 255:
        raise ValueError(f"{path}: only 8-bit binary PGM/PPM (P5/P6) supported")
    ch = 1 if magic == b"P5" else 3
    raster = np.frombuffer(data, dtype=np.uint8, count=w * h * ch, offset=pos)
    return raster.reshape(h, w, ch), maxval


def read_pgm(path) -> np.ndarray:
    img, _ = _read_pnm(path)
    return img[:, :, 0]


def read_image(path, channels: int = 3) -> np.ndarray:
    """Load a PGM/PPM (scaled to [0, 1]) or a ``.npy`` CHW float array as a (1, C, H, W) tensor."""
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path).astype(np.float32)
        if arr.ndim == 3:
            arr = arr[None]
        return as_tensor(arr)
    img, maxval = _read_pnm(path)
    arr = img.astype(np.float32).transpose(2, 0, 1) / float(maxval)
    if arr.shape[0] == 1 and channels == 3:
        arr = np.repeat(arr, 3, axis=0)
    return as_tensor(arr[None])
