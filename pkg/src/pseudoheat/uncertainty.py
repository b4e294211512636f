"""Dropout-equipped pair discriminator and MC-dropout uncertainty scoring.

Label convention: ``0`` means the heatmap is a correct label for the image,
``1`` means it is wrong.  The uncertainty score of a pair is the mean
class-1 probability over ``T`` stochastic forward passes.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .detector import (
    CheckpointError,
    CHECKPOINT_VERSION,
    TrainConfig,
    TrainingError,
    _dihedral,
    config_hash,
    read_checkpoint,
)
from .heatmap import (
    DEFAULT_AMPLITUDE,
    DEFAULT_SIGMA,
    CorruptionSpec,
    PositionHeatmap,
    corrupt,
    encode_points,
)
from .seeding import derive_seed
from .synth import PatchSample

DEFAULT_T = 10
DEFAULT_DROPOUT = 0.2
UNCERTAINTY_METRICS = ("mean_p1", "variance")


@dataclass
class PairSample:
    image: np.ndarray
    heatmap: PositionHeatmap
    label: int | None = None
    id: str = ""

    def __post_init__(self) -> None:
        if self.image.shape != self.heatmap.shape:
            raise ValueError(f"pair {self.id!r}: image {self.image.shape} vs heatmap {self.heatmap.shape}")
        if self.label not in (None, 0, 1):
            raise ValueError(f"pair {self.id!r}: label must be 0, 1 or None")


@dataclass(frozen=True)
class UncertaintyScore:
    score: float
    per_pass: tuple[float, ...]
    variance: float

    @classmethod
    def from_passes(cls, per_pass: Sequence[float]) -> "UncertaintyScore":
        # exact rational arithmetic: identical passes give exactly that value and zero variance
        fr = [Fraction(p) for p in per_pass]
        mean = sum(fr, Fraction(0)) / len(fr)
        var = sum(((f - mean) ** 2 for f in fr), Fraction(0)) / len(fr)
        return cls(float(mean), tuple(float(p) for p in per_pass), float(var))


class MCDropout(nn.Module):
    """Element-wise dropout that can stay on at inference with its own generator."""

    def __init__(self, p: float):
        super().__init__()
        self.p = float(p)
        self.mc_active = False
        self.generator: torch.Generator | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.p == 0 or not (self.training or self.mc_active):
            return x
        keep = torch.rand(x.shape, generator=self.generator) >= self.p
        return x * keep / (1.0 - self.p)


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNetDiscriminator(nn.Module):
    """Small residual classifier over stacked (image, heatmap) channels.

    Dropout follows every residual stage, so the last one sits right before
    the linear head.
    """

    def __init__(self, widths: Sequence[int] = (16, 32, 64, 128), blocks: int = 1,
                 dropout: float = DEFAULT_DROPOUT):
        super().__init__()
        self.widths = tuple(widths)
        self.blocks = blocks
        self.dropout = float(dropout)
        self.stem = nn.Sequential(
            nn.Conv2d(2, widths[0], 3, 2, 1, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
        )
        stages = []
        cin = widths[0]
        for i, w in enumerate(widths):
            layers = []
            for b in range(blocks):
                layers.append(BasicBlock(cin, w, 2 if (i > 0 and b == 0) else 1))
                cin = w
            layers.append(MCDropout(dropout))
            stages.append(nn.Sequential(*layers))
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(cin, 2)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(self.stem(x)).mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    def dropouts(self) -> list[MCDropout]:
        return [m for m in self.modules() if isinstance(m, MCDropout)]


@dataclass
class DiscriminatorModel:
    net: ResNetDiscriminator
    config: TrainConfig = field(default_factory=TrainConfig)
    loss_history: list[float] = field(default_factory=list)
    epochs_trained: int = 0

    @property
    def architecture(self) -> dict:
        return {"name": "resnet", "widths": list(self.net.widths), "blocks": self.net.blocks,
                "dropout": self.net.dropout}


def new_discriminator(widths: Sequence[int] = (16, 32, 64, 128), blocks: int = 1,
                      dropout: float = DEFAULT_DROPOUT, seed: int = 0) -> DiscriminatorModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = ResNetDiscriminator(widths, blocks, dropout)
    net.eval()
    return DiscriminatorModel(net)


def standardize_images(img: np.ndarray, scale: float = 0.2) -> np.ndarray:
    """Per-patch zero mean / fixed std, so brightness and contrast shifts drop out."""
    img = np.asarray(img, dtype=np.float32)
    mean = img.mean(axis=(-2, -1), keepdims=True)
    std = img.std(axis=(-2, -1), keepdims=True)
    return (img - mean) / (std + 1e-3 * 255.0) * scale


def pair_tensor(pairs: Sequence[PairSample]) -> torch.Tensor:
    img = standardize_images(np.asarray([p.image for p in pairs]))
    hm = np.asarray([p.heatmap.grid for p in pairs], dtype=np.float32) / 255.0
    return torch.from_numpy(np.stack([img, hm], axis=1))


# --- training pairs ------------------------------------------------------------

def random_corruption(n_points: int, rng: np.random.Generator, sigma: float,
                      max_count: int = 3, shift_multiples: tuple[float, float] = (2.0, 4.0)) -> CorruptionSpec:
    modes = ["add", "remove", "shift"] if n_points > 0 else ["add"]
    mode = modes[int(rng.integers(len(modes)))]
    limit = max_count if mode == "add" else min(max_count, n_points)
    count = int(rng.integers(1, limit + 1))
    return CorruptionSpec(mode, count, (shift_multiples[0] * sigma, shift_multiples[1] * sigma))


def make_training_pairs(labeled: Sequence[PatchSample], neg_per_pos: int = 1, rng_seed: int = 0,
                        sigma: float = DEFAULT_SIGMA, amplitude: float = DEFAULT_AMPLITUDE,
                        max_count: int = 3, shift_multiples: tuple[float, float] = (2.0, 4.0)) -> list[PairSample]:
    """One clean positive (Y=0) and ``neg_per_pos`` corrupted negatives (Y=1) per sample.

    The corruption mode is uniform over add/remove/shift; modes that are
    impossible for an empty point set are redrawn.
    """
    if neg_per_pos < 0:
        raise ValueError("neg_per_pos must be >= 0")
    pairs = []
    for s in labeled:
        if s.points is None:
            raise TrainingError(f"sample {s.id!r} has no points")
        pairs.append(PairSample(s.image, encode_points(s.points, s.image.shape, sigma, amplitude), 0, f"{s.id}+pos"))
        rng = np.random.default_rng(derive_seed(rng_seed, s.id))
        for j in range(neg_per_pos):
            spec = random_corruption(len(s.points), rng, sigma, max_count, shift_multiples)
            hm, _ = corrupt(s.points, s.image.shape, spec, derive_seed(rng_seed, s.id, j), sigma, amplitude)
            pairs.append(PairSample(s.image, hm, 1, f"{s.id}+neg{j}"))
    return pairs


def train_discriminator(model: DiscriminatorModel | None, pairs: Sequence[PairSample], cfg: TrainConfig,
                        *, widths: Sequence[int] = (16, 32, 64, 128), blocks: int = 1,
                        dropout: float = DEFAULT_DROPOUT) -> DiscriminatorModel:
    """Cross-entropy training with dropout on; records per-epoch mean loss."""
    cfg.validate()
    if not pairs:
        raise TrainingError("cannot train the discriminator on an empty pair list")
    labels = [p.label for p in pairs]
    if any(lbl is None for lbl in labels):
        raise TrainingError("every training pair needs a label")
    if len(set(labels)) < 2:
        raise TrainingError(f"training pairs contain a single class ({labels[0]}); need both 0 and 1")
    if model is None:
        model = new_discriminator(widths, blocks, dropout, derive_seed(cfg.seed, "init"))
    x_all = pair_tensor(pairs)
    y_all = torch.tensor(labels, dtype=torch.long)
    gen = torch.Generator().manual_seed(derive_seed(cfg.seed, "batches"))
    net = model.net
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    n = len(pairs)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(cfg.seed, "dropout"))
        net.train()
        for _ in range(cfg.epochs):
            perm = torch.randperm(n, generator=gen)
            total = 0.0
            for start in range(0, n, cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                xb = x_all[idx]
                if cfg.augment:
                    xb = _dihedral(xb, int(torch.randint(8, (1,), generator=gen)))
                loss = F.cross_entropy(net(xb), y_all[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            model.loss_history.append(total / n)
            model.epochs_trained += 1
    net.eval()
    model.config = cfg
    return model


# --- inference -----------------------------------------------------------------

@torch.no_grad()
def class1_probability(model: DiscriminatorModel, pair: PairSample) -> float:
    """Deterministic (dropout off) probability that the heatmap is wrong."""
    model.net.eval()
    logits = model.net(pair_tensor([pair])).double()
    return float(torch.softmax(logits, dim=1)[0, 1])


@torch.no_grad()
def mc_pass_probabilities(model: DiscriminatorModel, pair: PairSample, T: int, rng_seed: int) -> np.ndarray:
    """Class probabilities of shape ``(T, 2)`` from T dropout-on passes."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    net = model.net
    net.eval()
    gen = torch.Generator().manual_seed(int(rng_seed))
    drops = net.dropouts()
    for d in drops:
        d.mc_active, d.generator = True, gen
    try:
        x = pair_tensor([pair])
        rows = [torch.softmax(net(x).double(), dim=1)[0] for _ in range(T)]
    finally:
        for d in drops:
            d.mc_active, d.generator = False, None
    return torch.stack(rows).numpy()


def mc_uncertainty(model: DiscriminatorModel, pair: PairSample, T: int = DEFAULT_T,
                   rng_seed: int = 0) -> UncertaintyScore:
    probs = mc_pass_probabilities(model, pair, T, rng_seed)
    return UncertaintyScore.from_passes(probs[:, 1].tolist())


def selection_key(score: UncertaintyScore, metric: str) -> float:
    if metric == "mean_p1":
        return score.score
    if metric == "variance":
        return score.variance
    raise ValueError(f"unknown uncertainty metric {metric!r}; expected one of {UNCERTAINTY_METRICS}")


def score_candidates(model: DiscriminatorModel, candidates: Sequence[PairSample], T: int = DEFAULT_T,
                     rng_seed: int = 0, metric: str = "mean_p1") -> list[tuple[str, UncertaintyScore]]:
    """Score every candidate with its own seed stream; ascending, ties by id."""
    if not candidates:
        raise ValueError("no candidates to score")
    selection_key(UncertaintyScore(0.0, (0.0,), 0.0), metric)
    scored = [(c.id, mc_uncertainty(model, c, T, derive_seed(rng_seed, c.id))) for c in candidates]
    return sorted(scored, key=lambda t: (selection_key(t[1], metric), t[0]))


@torch.no_grad()
def embed_pairs(model: DiscriminatorModel, pairs: Sequence[PairSample], batch_size: int = 64) -> np.ndarray:
    """Penultimate (pooled) features with dropout off."""
    model.net.eval()
    out = [model.net.features(pair_tensor(pairs[i:i + batch_size])).double().numpy()
           for i in range(0, len(pairs), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.net.widths[-1]))


def write_scores_csv(scored: Sequence[tuple[str, UncertaintyScore]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["candidate_id", "score", "variance"])
        for cid, s in scored:
            writer.writerow([cid, repr(s.score), repr(s.variance)])


# --- checkpoints -----------------------------------------------------------------

def save_discriminator(model: DiscriminatorModel, path: str | Path) -> None:
    cfg = asdict(model.config)
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "kind": "discriminator",
            "architecture": model.architecture,
            "config": cfg,
            "config_hash": config_hash(model.architecture, cfg),
            "loss_history": list(model.loss_history),
            "epochs_trained": model.epochs_trained,
            "state_dict": model.net.state_dict(),
        },
        path,
    )


def load_discriminator(path: str | Path, expected_config: dict | None = None,
                       force: bool = False) -> DiscriminatorModel:
    blob = read_checkpoint(path, "discriminator", expected_config, force)
    arch = blob["architecture"]
    try:
        net = ResNetDiscriminator(arch["widths"], arch["blocks"], arch["dropout"])
        net.load_state_dict(blob["state_dict"])
    except (KeyError, RuntimeError) as e:
        raise CheckpointError(f"{path}: weights do not fit the stored architecture ({e})") from None
    net.eval()
    return DiscriminatorModel(net, TrainConfig(**blob["config"]), list(blob["loss_history"]),
                              blob["epochs_trained"])
