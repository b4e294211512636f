"""Flat, typed run configuration with INI-style profiles.

A config file holds one or more ``[profile]`` sections of ``key = value``
lines; every key is a :class:`RunConfig` field.  The built-in ``defaults``
profile is ``RunConfig()`` itself.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any

from .detector import TrainConfig
from .seeding import derive_seed
from .selftrain import AdaptationConfig, ConfigError
from .synth import DomainParams


@dataclass(frozen=True)
class RunConfig:
    dataset: str = ""
    out: str = "runs/default"
    seed: int = 0
    deterministic: bool = True
    d_match: float = 10.0
    # named sub-seeds; -1 derives them from ``seed``
    data_seed: int = -1
    detector_seed: int = -1
    discriminator_seed: int = -1
    adapt_seed: int = -1
    # synthetic dataset
    labeled_source: int = 24
    unlabeled_target: int = 1000
    test_source: int = 20
    test_target: int = 20
    test_size: int = 256
    source_eccentricity_range: tuple[float, float] = (1.0, 1.3)
    source_radius_range: tuple[float, float] = (5.0, 7.0)
    source_density: float = 5.0
    source_noise_std: float = 8.0
    source_background_level: float = 110.0
    source_polarity: str = "mixed"
    target_eccentricity_range: tuple[float, float] = (2.5, 4.0)
    target_radius_range: tuple[float, float] = (2.5, 3.5)
    target_density: float = 5.0
    target_noise_std: float = 12.0
    target_background_level: float = 140.0
    target_polarity: str = "mixed"
    texture: bool = True
    # method
    th_d: float = 100.0
    th_u: float = 10.0
    T: int = 10
    iterations: int = 4
    sigma: float = 6.0
    amplitude: float = 255.0
    nms_radius: int = 0
    learning_rate: float = 1e-3
    detector_epochs: int = 60
    detector_finetune_epochs: int = 30
    detector_batch_size: int = 8
    detector_augment: bool = True
    discriminator_epochs: int = 100
    discriminator_finetune_epochs: int = 40
    discriminator_batch_size: int = 16
    discriminator_augment: bool = True
    dropout: float = 0.2
    neg_per_pos: int = 3
    corrupt_pseudo: bool = True
    uncertainty_metric: str = "mean_p1"
    candidate_subset: int = 0
    finetune: bool = True
    final_retrain: bool = True

    def sub_seed(self, name: str) -> int:
        explicit = getattr(self, f"{name}_seed")
        return explicit if explicit >= 0 else derive_seed(self.seed, name)

    def domain(self, which: str) -> DomainParams:
        g = lambda k: getattr(self, f"{which}_{k}")  # noqa: E731
        return DomainParams(
            eccentricity_range=g("eccentricity_range"),
            radius_range=g("radius_range"),
            density=g("density"),
            noise_std=g("noise_std"),
            background_level=g("background_level"),
            texture_seedable=self.texture,
            polarity=g("polarity"),
        )

    def counts(self) -> dict[str, int]:
        return {
            "labeled-source": self.labeled_source,
            "unlabeled-target": self.unlabeled_target,
            "test-source": self.test_source,
            "test-target": self.test_target,
        }

    def adaptation(self) -> AdaptationConfig:
        return AdaptationConfig(
            th_d=self.th_d,
            th_u=int(self.th_u) if self.th_u >= 1 else self.th_u,
            T=self.T,
            max_iterations=self.iterations,
            sigma=self.sigma,
            amplitude=self.amplitude,
            nms_radius=self.nms_radius or None,
            detector=TrainConfig(self.learning_rate, self.detector_epochs, self.detector_batch_size,
                                 self.sub_seed("detector"), self.detector_augment),
            discriminator=TrainConfig(self.learning_rate, self.discriminator_epochs,
                                      self.discriminator_batch_size, self.sub_seed("discriminator"),
                                      self.discriminator_augment),
            finetune=self.finetune,
            detector_finetune_epochs=self.detector_finetune_epochs,
            discriminator_finetune_epochs=self.discriminator_finetune_epochs,
            dropout=self.dropout,
            neg_per_pos=self.neg_per_pos,
            corrupt_pseudo=self.corrupt_pseudo,
            uncertainty_metric=self.uncertainty_metric,
            candidate_subset=self.candidate_subset or None,
            final_retrain=self.final_retrain,
            d_match=self.d_match,
            seed=self.sub_seed("adapt"),
        )

    def validate(self) -> None:
        """Check every value without touching the filesystem for outputs."""
        for k, v in self.counts().items():
            if v < 0:
                raise ConfigError(f"{k} count must be >= 0, got {v}")
        if self.test_size < 128:
            raise ConfigError(f"test_size must be >= 128, got {self.test_size}")
        if not self.d_match > 0:
            raise ConfigError(f"d_match must be > 0, got {self.d_match}")
        for which in ("source", "target"):
            try:
                self.domain(which).validate()
            except ValueError as e:
                raise ConfigError(f"{which} domain: {e}") from None
        self.adaptation().validate()


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_value(key: str, text: str) -> Any:
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    default = getattr(RunConfig(), key)
    try:
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [float(p) for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
            if len(parts) != len(default):
                raise ValueError(f"expected {len(default)} comma-separated numbers")
            return tuple(parts)
        return text.strip()
    except ValueError as e:
        raise ConfigError(f"bad value for {key!r}: {text!r} ({e})") from None


def format_value(value: Any) -> str:
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def load_config(path: str | Path | None = None, profile: str = "defaults",
                overrides: dict[str, Any] | None = None) -> RunConfig:
    """Defaults, then the chosen file profile, then explicit overrides."""
    values: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"{p}: config file not found")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # keep key case (``T``)
        try:
            parser.read(p)
        except configparser.Error as e:
            raise ConfigError(f"{p}: {e}") from None
        if profile != "defaults" and not parser.has_section(profile):
            raise ConfigError(f"{p}: no [{profile}] profile")
        for section in ("defaults", profile):
            if parser.has_section(section):
                for k, v in parser.items(section):
                    values[k] = parse_value(k, v)
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {k!r}")
        values[k] = parse_value(k, v) if isinstance(v, str) and not isinstance(getattr(RunConfig(), k), str) else v
    return replace(RunConfig(), **values)


def dump_config(cfg: RunConfig, path: str | Path, profile: str = "effective") -> None:
    lines = [f"[{profile}]"]
    for f in fields(RunConfig):
        lines.append(f"{f.name} = {format_value(getattr(cfg, f.name))}")
    Path(path).write_text("\n".join(lines) + "\n")
