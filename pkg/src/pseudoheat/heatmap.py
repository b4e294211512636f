"""Gaussian position heatmaps: encoding, peak decoding, regeneration, corruption.

Heatmaps live on the public 0-255 intensity scale.  Points are ``(x, y)``
pairs in pixel units where integer coordinates are pixel centres.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import maximum_filter

DEFAULT_SIGMA = 6.0
DEFAULT_AMPLITUDE = 255.0
DEFAULT_TH_D = 100.0
MAX_INTENSITY = 255.0


class HeatmapError(ValueError):
    """Invalid parameter or point set handed to the codec."""


@dataclass(frozen=True)
class Point:
    x: float
    y: float

    def as_tuple(self) -> tuple[float, float]:
        return (self.x, self.y)

    def rounded(self) -> "Point":
        return Point(float(math.floor(self.x + 0.5)), float(math.floor(self.y + 0.5)))

    def distance(self, other: "Point") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class PositionHeatmap:
    grid: np.ndarray
    sigma: float = DEFAULT_SIGMA
    amplitude: float = DEFAULT_AMPLITUDE

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.grid.shape)  # type: ignore[return-value]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PositionHeatmap):
            return NotImplemented
        return (
            self.sigma == other.sigma
            and self.amplitude == other.amplitude
            and self.grid.shape == other.grid.shape
            and bool(np.array_equal(self.grid, other.grid))
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class CorruptionSpec:
    """How to damage a ground-truth point set.

    ``shift_range`` is only used by ``mode="shift"``.
    """

    mode: str
    count: int = 1
    shift_range: tuple[float, float] = (2 * DEFAULT_SIGMA, 4 * DEFAULT_SIGMA)

    def validate(self, n_points: int, sigma: float) -> None:
        if self.mode not in ("add", "remove", "shift"):
            raise HeatmapError(f"unknown corruption mode {self.mode!r}")
        if self.count < 1:
            raise HeatmapError("corruption count must be >= 1")
        if self.mode in ("remove", "shift") and self.count > n_points:
            raise HeatmapError(
                f"{self.mode} count {self.count} exceeds the {n_points} ground-truth points"
            )
        lo, hi = self.shift_range
        if self.mode == "shift" and (lo < 2 * sigma or hi < lo):
            raise HeatmapError(
                f"shift_range {self.shift_range} must satisfy 2*sigma={2 * sigma} <= lo <= hi"
            )


def as_points(points: Iterable) -> list[Point]:
    return [p if isinstance(p, Point) else Point(float(p[0]), float(p[1])) for p in points]


def _check_params(sigma: float, amplitude: float) -> None:
    if not sigma > 0:
        raise HeatmapError(f"sigma must be positive, got {sigma}")
    if not 0 < amplitude <= MAX_INTENSITY:
        raise HeatmapError(f"amplitude must be in (0, 255], got {amplitude}")


def encode_points(
    points: Sequence,
    shape: tuple[int, int],
    sigma: float = DEFAULT_SIGMA,
    amplitude: float = DEFAULT_AMPLITUDE,
) -> PositionHeatmap:
    """Render each point as a Gaussian bump; overlaps combine by per-pixel max."""
    _check_params(sigma, amplitude)
    h, w = shape
    pts = as_points(points)
    for i, p in enumerate(pts):
        if not (0 <= p.x < w and 0 <= p.y < h):
            raise HeatmapError(f"point {i} at ({p.x}, {p.y}) is outside a {h}x{w} grid")
    grid = np.zeros((h, w), dtype=np.float64)
    if not pts:
        return PositionHeatmap(grid, sigma, amplitude)
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    inv = 1.0 / (2.0 * sigma * sigma)
    for p in pts:
        np.maximum(grid, amplitude * np.exp(-((xs - p.x) ** 2 + (ys - p.y) ** 2) * inv), out=grid)
    np.clip(grid, 0.0, MAX_INTENSITY, out=grid)
    return PositionHeatmap(grid, sigma, amplitude)


def detect_peaks(
    heatmap: PositionHeatmap | np.ndarray,
    th_d: float = DEFAULT_TH_D,
    nms_radius: int | None = None,
) -> list[Point]:
    """Return local maxima at or above ``th_d``, sorted by (y, x).

    A pixel qualifies when nothing in its ``(2r+1)`` square window is larger
    and no equal-valued pixel in the window precedes it in (y, x) order.
    Zero-valued pixels never qualify.
    """
    if isinstance(heatmap, PositionHeatmap):
        grid = heatmap.grid
        if nms_radius is None:
            nms_radius = int(round(heatmap.sigma))
    else:
        grid = np.asarray(heatmap, dtype=np.float64)
    if nms_radius is None:
        nms_radius = int(round(DEFAULT_SIGMA))
    if not 0 <= th_d <= MAX_INTENSITY:
        raise HeatmapError(f"th_d must be in [0, 255], got {th_d}")
    if nms_radius < 1:
        raise HeatmapError(f"nms_radius must be >= 1, got {nms_radius}")
    r = int(nms_radius)
    local_max = maximum_filter(grid, size=2 * r + 1, mode="constant", cval=-np.inf)
    cand = (grid == local_max) & (grid >= th_d) & (grid > 0)
    ys, xs = np.nonzero(cand)  # row-major, already sorted by (y, x)
    peaks = []
    h, w = grid.shape
    for y, x in zip(ys.tolist(), xs.tolist()):
        v = grid[y, x]
        above = grid[max(0, y - r):y, max(0, x - r):min(w, x + r + 1)]
        left = grid[y, max(0, x - r):x]
        if np.any(above == v) or np.any(left == v):
            continue
        peaks.append(Point(float(x), float(y)))
    return peaks


def regenerate(
    predicted: PositionHeatmap | np.ndarray,
    th_d: float = DEFAULT_TH_D,
    sigma: float = DEFAULT_SIGMA,
    amplitude: float = DEFAULT_AMPLITUDE,
    nms_radius: int | None = None,
) -> PositionHeatmap:
    """Clean pseudo-heatmap: re-encode the peaks found in ``predicted``."""
    grid = predicted.grid if isinstance(predicted, PositionHeatmap) else np.asarray(predicted)
    if nms_radius is None:
        nms_radius = int(round(sigma))
    peaks = detect_peaks(grid, th_d, nms_radius)
    return encode_points(peaks, grid.shape, sigma, amplitude)


def corrupt(
    gt_points: Sequence,
    shape: tuple[int, int],
    spec: CorruptionSpec,
    rng_seed: int,
    sigma: float = DEFAULT_SIGMA,
    amplitude: float = DEFAULT_AMPLITUDE,
    max_tries: int = 1000,
) -> tuple[PositionHeatmap, list[Point]]:
    """Build a deliberately wrong heatmap from ground truth.

    Returns the corrupted heatmap together with the corrupted point list.
    """
    pts = as_points(gt_points)
    spec.validate(len(pts), sigma)
    rng = np.random.default_rng(rng_seed)
    h, w = shape
    min_gap = 2 * sigma

    if spec.mode == "remove":
        drop = set(rng.choice(len(pts), size=spec.count, replace=False).tolist())
        out = [p for i, p in enumerate(pts) if i not in drop]
    elif spec.mode == "add":
        out = list(pts)
        for _ in range(spec.count):
            for _ in range(max_tries):
                cand = Point(float(rng.uniform(0, w - 1)), float(rng.uniform(0, h - 1)))
                if all(cand.distance(q) >= min_gap for q in out):
                    out.append(cand)
                    break
            else:
                raise HeatmapError(
                    f"could not place an added point >= 2*sigma={min_gap} px from all others "
                    f"after {max_tries} tries"
                )
    else:
        lo, hi = spec.shift_range
        idx = rng.choice(len(pts), size=spec.count, replace=False).tolist()
        out = list(pts)
        for i in idx:
            p = pts[i]
            for _ in range(max_tries):
                mag = rng.uniform(lo, hi)
                ang = rng.uniform(0, 2 * np.pi)
                q = Point(
                    float(np.clip(p.x + mag * np.cos(ang), 0, w - 1)),
                    float(np.clip(p.y + mag * np.sin(ang), 0, h - 1)),
                )
                # clipping at a border can undo the displacement
                if q.distance(p) >= lo:
                    out[i] = q
                    break
            else:
                raise HeatmapError(
                    f"could not shift point {i} by >= {lo} px inside the {h}x{w} grid"
                )
    return encode_points(out, shape, sigma, amplitude), out


# --- persistence -----------------------------------------------------------

def save_heatmap_png(heatmap: PositionHeatmap | np.ndarray, path: str | Path) -> None:
    grid = heatmap.grid if isinstance(heatmap, PositionHeatmap) else np.asarray(heatmap)
    Image.fromarray(np.clip(np.rint(grid), 0, 255).astype(np.uint8), mode="L").save(path)


def load_heatmap_png(path: str | Path, sigma: float = DEFAULT_SIGMA,
                     amplitude: float = DEFAULT_AMPLITUDE) -> PositionHeatmap:
    with Image.open(path) as im:
        grid = np.asarray(im.convert("L"), dtype=np.float64)
    return PositionHeatmap(grid, sigma, amplitude)


ANNOTATION_HEADER = ("patch_id", "x", "y")


def write_annotations(path: str | Path, annotations: dict[str, Sequence[Point]]) -> None:
    """Write ``patch_id,x,y`` rows; patches without points produce no rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANNOTATION_HEADER)
        for pid, pts in annotations.items():
            for p in as_points(pts):
                writer.writerow([pid, repr(float(p.x)), repr(float(p.y))])


def read_annotations(
    path: str | Path, shapes: dict[str, tuple[int, int]] | None = None
) -> dict[str, list[Point]]:
    """Parse an annotation CSV.

    When ``shapes`` is given, rows naming an unknown id or falling outside
    that patch raise ``HeatmapError`` with the path and line number.
    """
    path = Path(path)
    out: dict[str, list[Point]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != ANNOTATION_HEADER:
            raise HeatmapError(f"{path}:1: expected header 'patch_id,x,y', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise HeatmapError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            pid = row[0].strip()
            try:
                x, y = float(row[1]), float(row[2])
            except ValueError:
                raise HeatmapError(f"{path}:{lineno}: non-numeric coordinate in {row}") from None
            if shapes is not None:
                if pid not in shapes:
                    raise HeatmapError(f"{path}:{lineno}: unknown patch id {pid!r}")
                h, w = shapes[pid]
                if not (0 <= x < w and 0 <= y < h):
                    raise HeatmapError(
                        f"{path}:{lineno}: point ({x}, {y}) outside {h}x{w} patch {pid!r}"
                    )
            out.setdefault(pid, []).append(Point(x, y))
    return out
