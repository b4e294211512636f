"""Two-domain synthetic cell images, patch tiling and dataset persistence.

The on-disk layout is the ingestion format for real data as well::

    <dir>/manifest.txt            [labeled-source] / [unlabeled-target] / [test-source] / [test-target]
    <dir>/images/<id>.png         8-bit grayscale
    <dir>/annotations.csv         patch_id,x,y  (labeled-source only)
    <dir>/shadow/annotations.csv  patch_id,x,y  (evaluation-only ground truth)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .heatmap import HeatmapError, Point, as_points, read_annotations, write_annotations
from .seeding import derive_seed

PATCH_SIZE = 128
SPLITS = ("labeled-source", "unlabeled-target", "test-source", "test-target")
SPLIT_DOMAIN = {
    "labeled-source": "source",
    "unlabeled-target": "target",
    "test-source": "source",
    "test-target": "target",
}
SPLIT_PROVENANCE = {
    "labeled-source": "labeled-source",
    "unlabeled-target": "unlabeled-target",
    "test-source": "test",
    "test-target": "test",
}
PROVENANCES = ("labeled-source", "unlabeled-target", "pseudo", "test")


class DataError(ValueError):
    """Malformed, missing or inconsistent dataset content."""


@dataclass(frozen=True)
class DomainParams:
    eccentricity_range: tuple[float, float] = (1.0, 1.3)
    radius_range: tuple[float, float] = (5.0, 7.0)
    density: float = 5.0
    noise_std: float = 8.0
    background_level: float = 110.0
    texture_seedable: bool = True
    contrast_range: tuple[float, float] = (20.0, 80.0)
    polarity: str = "mixed"  # "bright", "dark" or "mixed"
    min_separation: float = 14.0

    def validate(self) -> None:
        lo, hi = self.eccentricity_range
        if lo < 1 or hi < lo:
            raise DataError(f"eccentricity_range {self.eccentricity_range} must satisfy 1 <= lo <= hi")
        rlo, rhi = self.radius_range
        if rlo <= 0 or rhi < rlo:
            raise DataError(f"radius_range {self.radius_range} must be positive and ordered")
        if not self.density > 0:
            raise DataError(f"density must be > 0, got {self.density}")
        if self.noise_std < 0:
            raise DataError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.polarity not in ("bright", "dark", "mixed"):
            raise DataError(f"unknown polarity {self.polarity!r}")


SOURCE_DOMAIN = DomainParams()
# thin, elongated cells on a brighter and noisier background
TARGET_DOMAIN = DomainParams(eccentricity_range=(2.5, 4.0), radius_range=(2.5, 3.5), noise_std=12.0,
                             background_level=140.0)


@dataclass(frozen=True)
class Cell:
    x: float
    y: float
    minor: float
    major: float
    angle: float
    contrast: float

    @property
    def axis_ratio(self) -> float:
        return self.major / self.minor


@dataclass(eq=False)
class PatchSample:
    image: np.ndarray
    points: list[Point] | None
    domain: str
    provenance: str
    id: str

    def __post_init__(self) -> None:
        if self.provenance not in PROVENANCES:
            raise DataError(f"{self.id}: unknown provenance {self.provenance!r}")
        if self.provenance in ("labeled-source", "pseudo") and self.points is None:
            raise DataError(f"{self.id}: {self.provenance} samples need a point list")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PatchSample):
            return NotImplemented
        return (
            self.id == other.id
            and self.domain == other.domain
            and self.provenance == other.provenance
            and self.points == other.points
            and self.image.shape == other.image.shape
            and bool(np.array_equal(self.image, other.image))
        )


@dataclass(eq=False)
class DataSet:
    """Samples keyed by id, split membership, and evaluator-only ground truth."""

    samples: dict[str, PatchSample] = field(default_factory=dict)
    manifest: dict[str, list[str]] = field(default_factory=lambda: {s: [] for s in SPLITS})
    shadow: dict[str, list[Point]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for s in SPLITS:
            self.manifest.setdefault(s, [])
        seen: set[str] = set()
        for split, ids in self.manifest.items():
            for i in ids:
                if i in seen:
                    raise DataError(f"id {i!r} listed twice in the manifest (split {split})")
                if i not in self.samples:
                    raise DataError(f"manifest id {i!r} has no sample")
                seen.add(i)

    def split(self, name: str) -> list[PatchSample]:
        return [self.samples[i] for i in self.manifest.get(name, [])]

    def ground_truth(self, sample_id: str) -> list[Point]:
        if sample_id in self.shadow:
            return self.shadow[sample_id]
        pts = self.samples[sample_id].points
        if pts is None:
            raise DataError(f"no ground truth available for {sample_id!r}")
        return pts

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DataSet):
            return NotImplemented
        return (
            self.manifest == other.manifest
            and self.shadow == other.shadow
            and self.samples.keys() == other.samples.keys()
            and all(self.samples[k] == other.samples[k] for k in self.samples)
        )


# --- rendering -------------------------------------------------------------

def sample_cells(params: DomainParams, rng: np.random.Generator,
                 shape: tuple[int, int], max_tries: int = 200) -> list[Cell]:
    """Draw cell geometry; centres may sit slightly outside the frame."""
    h, w = shape
    n = rng.poisson(params.density * h * w / PATCH_SIZE**2)
    margin = params.radius_range[1] * params.eccentricity_range[1]
    cells: list[Cell] = []
    for _ in range(n):
        for _ in range(max_tries):
            cx = rng.uniform(-margin, w + margin)
            cy = rng.uniform(-margin, h + margin)
            if all(math.hypot(cx - c.x, cy - c.y) >= params.min_separation for c in cells):
                break
        else:
            continue
        minor = rng.uniform(*params.radius_range)
        major = minor * rng.uniform(*params.eccentricity_range)
        angle = rng.uniform(0, math.pi)
        contrast = rng.uniform(*params.contrast_range)
        if params.polarity == "dark" or (params.polarity == "mixed" and rng.random() < 0.5):
            contrast = -contrast
        cells.append(Cell(cx, cy, minor, major, angle, contrast))
    return cells


def _ellipse_coverage(cell: Cell, shape: tuple[int, int]) -> tuple[tuple[slice, slice], np.ndarray] | None:
    h, w = shape
    ext = cell.major + 2
    x0, x1 = max(0, int(math.floor(cell.x - ext))), min(w, int(math.ceil(cell.x + ext)) + 1)
    y0, y1 = max(0, int(math.floor(cell.y - ext))), min(h, int(math.ceil(cell.y + ext)) + 1)
    if x0 >= x1 or y0 >= y1:
        return None
    ys, xs = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    dx, dy = xs - cell.x, ys - cell.y
    c, s = math.cos(cell.angle), math.sin(cell.angle)
    u = (dx * c + dy * s) / cell.major
    v = (-dx * s + dy * c) / cell.minor
    rn = np.sqrt(u * u + v * v)
    # first-order distance to the boundary, in pixels
    grad = np.sqrt((u / cell.major) ** 2 + (v / cell.minor) ** 2) / np.maximum(rn, 1e-9)
    dist = (rn - 1.0) / np.maximum(grad, 1e-9)
    return (slice(y0, y1), slice(x0, x1)), np.clip(0.5 - dist, 0.0, 1.0)


def render_cells(params: DomainParams, cells: Sequence[Cell], rng: np.random.Generator,
                 shape: tuple[int, int]) -> np.ndarray:
    img = np.full(shape, params.background_level, dtype=np.float64)
    if params.texture_seedable:
        tex = gaussian_filter(rng.standard_normal(shape), sigma=10.0, mode="wrap")
        img += 12.0 * tex / max(tex.std(), 1e-9)
    for cell in cells:
        cov = _ellipse_coverage(cell, shape)
        if cov is not None:
            sl, a = cov
            img[sl] += cell.contrast * a
    if params.noise_std > 0:
        img += rng.normal(0.0, params.noise_std, size=shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def render_scene(params: DomainParams, rng_seed: int,
                 shape: tuple[int, int] = (PATCH_SIZE, PATCH_SIZE)) -> tuple[np.ndarray, list[Point], list[Cell]]:
    """Image, in-frame centres and the full cell list for one seed."""
    params.validate()
    rng = np.random.default_rng(rng_seed)
    cells = sample_cells(params, rng, shape)
    image = render_cells(params, cells, rng, shape)
    h, w = shape
    points = [Point(c.x, c.y) for c in cells if 0 <= c.x < w and 0 <= c.y < h]
    return image, points, cells


def generate_patch(params: DomainParams, rng_seed: int, *, domain: str = "source",
                   provenance: str = "labeled-source", sample_id: str | None = None,
                   shape: tuple[int, int] = (PATCH_SIZE, PATCH_SIZE)) -> PatchSample:
    image, points, _ = render_scene(params, rng_seed, shape)
    return PatchSample(image, points, domain, provenance, sample_id or f"{domain}-{rng_seed}")


SPLIT_PREFIX = {
    "labeled-source": "ls",
    "unlabeled-target": "ut",
    "test-source": "ts",
    "test-target": "tt",
}


def generate_dataset(
    source: DomainParams,
    target: DomainParams,
    counts: dict[str, int] | None = None,
    rng_seed: int = 0,
    test_shape: tuple[int, int] = (256, 256),
) -> DataSet:
    """Labeled source patches, unlabeled target patches and full-size test images.

    Ground truth for everything but ``labeled-source`` goes to ``shadow``.
    """
    full = {"labeled-source": 24, "unlabeled-target": 1000, "test-source": 20, "test-target": 20}
    if counts:
        counts = {k.replace("_", "-"): v for k, v in counts.items()}
        unknown = set(counts) - set(full)
        if unknown:
            raise DataError(f"unknown split counts {sorted(unknown)}")
        full.update(counts)
    for k, v in full.items():
        if v < 0:
            raise DataError(f"count for {k} must be >= 0, got {v}")
    source.validate()
    target.validate()
    samples: dict[str, PatchSample] = {}
    manifest: dict[str, list[str]] = {s: [] for s in SPLITS}
    shadow: dict[str, list[Point]] = {}
    for split in SPLITS:
        params = source if SPLIT_DOMAIN[split] == "source" else target
        shape = test_shape if split.startswith("test") else (PATCH_SIZE, PATCH_SIZE)
        for i in range(full[split]):
            sid = f"{SPLIT_PREFIX[split]}{i:05d}"
            image, points, _ = render_scene(params, derive_seed(rng_seed, split, i), shape)
            if split == "labeled-source":
                sample = PatchSample(image, points, "source", "labeled-source", sid)
            else:
                sample = PatchSample(image, None, SPLIT_DOMAIN[split], SPLIT_PROVENANCE[split], sid)
                shadow[sid] = points
            samples[sid] = sample
            manifest[split].append(sid)
    return DataSet(samples, manifest, shadow)


# --- tiling and intensity ----------------------------------------------------

def tile_origins(length: int, patch_size: int, stride: int) -> list[int]:
    """Tile start offsets along one axis; the last tile is aligned to the edge."""
    origins = list(range(0, length - patch_size + 1, stride))
    if origins[-1] + patch_size < length:
        origins.append(length - patch_size)
    return origins


def extract_patches(image: np.ndarray, points: Sequence | None = None,
                    patch_size: int = PATCH_SIZE, stride: int | None = None,
                    *, prefix: str = "tile", domain: str = "target",
                    provenance: str = "unlabeled-target") -> list[PatchSample]:
    h, w = image.shape[:2]
    if h < patch_size or w < patch_size:
        raise DataError(f"image {h}x{w} is smaller than the {patch_size}px patch")
    stride = stride or patch_size
    if stride < 1:
        raise DataError("stride must be >= 1")
    pts = as_points(points) if points is not None else None
    out = []
    for y0 in tile_origins(h, patch_size, stride):
        for x0 in tile_origins(w, patch_size, stride):
            tile_pts = None
            if pts is not None:
                tile_pts = [Point(p.x - x0, p.y - y0) for p in pts
                            if x0 <= p.x < x0 + patch_size and y0 <= p.y < y0 + patch_size]
            tile = image[y0:y0 + patch_size, x0:x0 + patch_size].copy()
            out.append(PatchSample(tile, tile_pts, domain, provenance, f"{prefix}_{y0}_{x0}"))
    return out


def normalize_image(image: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 255]; a constant image becomes all zeros."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    if hi == lo:
        return np.zeros_like(img)
    return (img - lo) * (255.0 / (hi - lo))


# --- persistence -------------------------------------------------------------

def write_manifest(path: Path, manifest: dict[str, list[str]]) -> None:
    lines = []
    for split in SPLITS:
        lines.append(f"[{split}]")
        lines.extend(manifest.get(split, []))
        lines.append("")
    path.write_text("\n".join(lines))


def read_manifest(path: Path) -> dict[str, list[str]]:
    if not path.exists():
        raise DataError(f"{path}: manifest not found")
    manifest: dict[str, list[str]] = {s: [] for s in SPLITS}
    seen: dict[str, int] = {}
    current = None
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in SPLITS:
                raise DataError(f"{path}:{lineno}: unknown section [{current}]")
            continue
        if current is None:
            raise DataError(f"{path}:{lineno}: id {line!r} outside any section")
        if line in seen:
            raise DataError(f"{path}:{lineno}: duplicate id {line!r} (first on line {seen[line]})")
        seen[line] = lineno
        manifest[current].append(line)
    return manifest


def save_dataset(dataset: DataSet, dir_path: str | Path) -> None:
    root = Path(dir_path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "shadow").mkdir(exist_ok=True)
    write_manifest(root / "manifest.txt", dataset.manifest)
    for sid, s in dataset.samples.items():
        Image.fromarray(np.asarray(s.image, dtype=np.uint8), mode="L").save(root / "images" / f"{sid}.png")
    labeled = {sid: dataset.samples[sid].points or [] for sid in dataset.manifest["labeled-source"]}
    write_annotations(root / "annotations.csv", labeled)
    write_annotations(root / "shadow" / "annotations.csv", dataset.shadow)


def _read_image(path: Path, sid: str) -> np.ndarray:
    if not path.exists():
        raise DataError(f"{path}: image for id {sid!r} is missing")
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8).copy()


def load_dataset(manifest_path: str | Path) -> DataSet:
    """Load a dataset from its directory or its ``manifest.txt``."""
    p = Path(manifest_path)
    root = p if p.is_dir() else p.parent
    manifest = read_manifest(root / "manifest.txt" if p.is_dir() else p)
    images = {}
    for split in SPLITS:
        for sid in manifest[split]:
            images[sid] = _read_image(root / "images" / f"{sid}.png", sid)
    shapes = {sid: im.shape for sid, im in images.items()}
    ann_path = root / "annotations.csv"
    if not ann_path.exists():
        raise DataError(f"{ann_path}: annotation file not found")
    labeled_ids = set(manifest["labeled-source"])
    try:
        labeled = read_annotations(ann_path, {k: v for k, v in shapes.items() if k in labeled_ids})
        shadow_path = root / "shadow" / "annotations.csv"
        shadow = None
        if shadow_path.exists():
            shadow = read_annotations(shadow_path, {k: v for k, v in shapes.items() if k not in labeled_ids})
    except HeatmapError as e:
        raise DataError(str(e)) from None
    samples = {}
    shadow_out: dict[str, list[Point]] = {}
    for split in SPLITS:
        for sid in manifest[split]:
            if split == "labeled-source":
                samples[sid] = PatchSample(images[sid], labeled.get(sid, []), "source", "labeled-source", sid)
            else:
                samples[sid] = PatchSample(images[sid], None, SPLIT_DOMAIN[split], SPLIT_PROVENANCE[split], sid)
                if shadow is not None:
                    shadow_out[sid] = shadow.get(sid, [])
    return DataSet(samples, manifest, shadow_out)


def has_shadow(dir_path: str | Path) -> bool:
    return (Path(dir_path) / "shadow" / "annotations.csv").exists()
