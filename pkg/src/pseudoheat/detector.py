"""Heatmap-regression network: image patch -> position heatmap."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .heatmap import (
    DEFAULT_AMPLITUDE,
    DEFAULT_SIGMA,
    DEFAULT_TH_D,
    Point,
    PositionHeatmap,
    detect_peaks,
    encode_points,
)
from .seeding import derive_seed
from .synth import PATCH_SIZE, PatchSample, extract_patches, tile_origins

CHECKPOINT_VERSION = 1


class TrainingError(ValueError):
    """Invalid training request (bad config, empty or unlabeled data)."""


class CheckpointError(ValueError):
    """Checkpoint missing, malformed or inconsistent with the expected config."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 40
    batch_size: int = 8
    seed: int = 0
    augment: bool = False

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise TrainingError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise TrainingError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Encoder-decoder with skip connections; output size equals input size.

    ``widths`` has one entry per resolution level, so ``len(widths) - 1``
    down/up stages.  The 1x1 head is zero-initialised.
    """

    def __init__(self, widths: Sequence[int] = (8, 16, 32, 64, 64)):
        super().__init__()
        self.widths = tuple(widths)
        self.down = nn.ModuleList()
        cin = 1
        for w in self.widths:
            self.down.append(_conv_block(cin, w))
            cin = w
        self.up = nn.ModuleList()
        for lvl in range(len(self.widths) - 2, -1, -1):
            self.up.append(_conv_block(cin + self.widths[lvl], self.widths[lvl]))
            cin = self.widths[lvl]
        self.head = nn.Conv2d(cin, 1, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for i, block in enumerate(self.down):
            if i > 0:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        skips.pop()
        for block in self.up:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(torch.cat([x, skips.pop()], dim=1))
        return self.head(x)


@dataclass
class DetectorModel:
    net: UNet
    config: TrainConfig = field(default_factory=TrainConfig)
    sigma: float = DEFAULT_SIGMA
    amplitude: float = DEFAULT_AMPLITUDE
    loss_history: list[float] = field(default_factory=list)
    epochs_trained: int = 0

    @property
    def architecture(self) -> dict:
        return {"name": "unet", "widths": list(self.net.widths)}


def new_detector(widths: Sequence[int] = (8, 16, 32, 64, 64), seed: int = 0,
                 sigma: float = DEFAULT_SIGMA, amplitude: float = DEFAULT_AMPLITUDE) -> DetectorModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = UNet(widths)
    return DetectorModel(net, sigma=sigma, amplitude=amplitude)


def image_tensor(images: Sequence[np.ndarray] | np.ndarray) -> torch.Tensor:
    arr = np.asarray(images, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    return torch.from_numpy(arr[:, None])


def _dihedral(t: torch.Tensor, k: int) -> torch.Tensor:
    if k >= 4:
        t = torch.flip(t, dims=(-1,))
    return torch.rot90(t, k % 4, dims=(-2, -1))


def target_heatmaps(samples: Sequence[PatchSample], sigma: float, amplitude: float) -> np.ndarray:
    out = []
    for s in samples:
        if s.points is None:
            raise TrainingError(f"sample {s.id!r} has no points to build a target heatmap from")
        out.append(encode_points(s.points, s.image.shape, sigma, amplitude).grid)
    return np.asarray(out)


def train_detector(model: DetectorModel | None, samples: Sequence[PatchSample],
                   cfg: TrainConfig, *, widths: Sequence[int] = (8, 16, 32, 64, 64),
                   sigma: float = DEFAULT_SIGMA, amplitude: float = DEFAULT_AMPLITUDE) -> DetectorModel:
    """Fit (or fine-tune) the detector with MSE on the internal [0, 1] scale.

    ``model=None`` starts from fresh weights seeded by ``cfg.seed``.  The
    per-epoch mean loss is appended to ``loss_history``.
    """
    cfg.validate()
    if not samples:
        raise TrainingError("cannot train on an empty sample list")
    if model is None:
        model = new_detector(widths, derive_seed(cfg.seed, "init"), sigma, amplitude)
    targets = target_heatmaps(samples, model.sigma, model.amplitude)
    x_all = image_tensor([s.image for s in samples])
    y_all = torch.from_numpy(targets.astype(np.float32)[:, None] / 255.0)

    gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "batches"))
    net = model.net
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    net.train()
    n = len(samples)
    for _ in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            if cfg.augment:
                k = int(torch.randint(8, (1,), generator=gen))
                xb, yb = _dihedral(xb, k), _dihedral(yb, k)
            loss = F.mse_loss(net(xb), yb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        model.loss_history.append(total / n)
        model.epochs_trained += 1
    net.eval()
    model.config = cfg
    return model


@torch.no_grad()
def predict_grids(model: DetectorModel, images: Sequence[np.ndarray], batch_size: int = 32) -> np.ndarray:
    """Batched inference; returns grids on the 0-255 scale."""
    net = model.net
    was_training = net.training
    net.eval()
    out = []
    for start in range(0, len(images), batch_size):
        y = net(image_tensor(images[start:start + batch_size]))
        out.append(y[:, 0].double().numpy())
    if was_training:
        net.train()
    if not out:
        return np.zeros((0, PATCH_SIZE, PATCH_SIZE))
    return np.clip(np.concatenate(out) * 255.0, 0.0, 255.0)


def predict_heatmap(model: DetectorModel, image: np.ndarray) -> PositionHeatmap:
    image = np.asarray(image)
    if image.shape != (PATCH_SIZE, PATCH_SIZE):
        raise ValueError(f"expected a {PATCH_SIZE}x{PATCH_SIZE} image, got {image.shape}")
    return PositionHeatmap(predict_grids(model, [image])[0], model.sigma, model.amplitude)


def predict_full_image(model: DetectorModel, image: np.ndarray, th_d: float = DEFAULT_TH_D,
                       nms_radius: int | None = None) -> list[Point]:
    """Tile, predict, map peaks to global coordinates and merge seam duplicates."""
    image = np.asarray(image)
    r = int(round(model.sigma)) if nms_radius is None else nms_radius
    tiles = extract_patches(image, None, PATCH_SIZE, PATCH_SIZE)
    grids = predict_grids(model, [t.image for t in tiles])
    h, w = image.shape
    origins = [(y0, x0) for y0 in tile_origins(h, PATCH_SIZE, PATCH_SIZE)
               for x0 in tile_origins(w, PATCH_SIZE, PATCH_SIZE)]
    found: list[tuple[float, float, float]] = []  # (value, y, x)
    for (y0, x0), grid in zip(origins, grids):
        for p in detect_peaks(grid, th_d, r):
            found.append((float(grid[int(p.y), int(p.x)]), p.y + y0, p.x + x0))
    # strongest first; ties resolved by (y, x)
    found.sort(key=lambda t: (-t[0], t[1], t[2]))
    kept: list[tuple[float, float, float]] = []
    for v, y, x in found:
        if all(max(abs(y - ky), abs(x - kx)) > r for _, ky, kx in kept):
            kept.append((v, y, x))
    return sorted((Point(x, y) for _, y, x in kept), key=lambda p: (p.y, p.x))


# --- checkpoints -------------------------------------------------------------

def config_hash(architecture: dict, config: dict) -> str:
    blob = json.dumps({"arch": architecture, "config": config}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(model: DetectorModel, path: str | Path) -> None:
    cfg = asdict(model.config)
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "kind": "detector",
            "architecture": model.architecture,
            "config": cfg,
            "config_hash": config_hash(model.architecture, cfg),
            "sigma": model.sigma,
            "amplitude": model.amplitude,
            "loss_history": list(model.loss_history),
            "epochs_trained": model.epochs_trained,
            "state_dict": model.net.state_dict(),
        },
        path,
    )


def read_checkpoint(path: str | Path, kind: str, expected_config: dict | None = None,
                    force: bool = False) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: checkpoint not found")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:  # torch raises a variety of unpickling errors
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from None
    if not isinstance(blob, dict) or blob.get("kind") != kind:
        raise CheckpointError(f"{path}: not a {kind} checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    if not force:
        stored = config_hash(blob["architecture"], blob["config"])
        if stored != blob["config_hash"]:
            raise CheckpointError(f"{path}: config hash mismatch (stored {blob['config_hash']}, contents {stored})")
        if expected_config is not None:
            want = config_hash(blob["architecture"], expected_config)
            if want != blob["config_hash"]:
                raise CheckpointError(
                    f"{path}: trained with config hash {blob['config_hash']}, expected {want}; pass force to override"
                )
    return blob


def load_checkpoint(path: str | Path, expected_config: dict | None = None, force: bool = False) -> DetectorModel:
    blob = read_checkpoint(path, "detector", expected_config, force)
    net = UNet(blob["architecture"]["widths"])
    net.load_state_dict(blob["state_dict"])
    net.eval()
    return DetectorModel(
        net,
        TrainConfig(**blob["config"]),
        blob["sigma"],
        blob["amplitude"],
        list(blob["loss_history"]),
        blob["epochs_trained"],
    )
