"""Iterative domain extension with confident pseudo-heatmaps.

Each iteration trains the detector and the discriminator on the current pool,
predicts heatmaps for the unlabeled target patches, regenerates clean
pseudo-heatmaps from their peaks, scores every (image, pseudo-heatmap) pair
by MC dropout and moves the ``th_u`` most confident patches into the pool.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .detector import (
    DetectorModel,
    TrainConfig,
    load_checkpoint,
    predict_grids,
    save_checkpoint,
    train_detector,
)
from .heatmap import DEFAULT_AMPLITUDE, DEFAULT_SIGMA, DEFAULT_TH_D, Point, PositionHeatmap, detect_peaks, regenerate
from .metrics import DEFAULT_D_MATCH, MatchReport, evaluate_model, write_metrics_csv, write_report_csv
from .seeding import derive_seed
from .synth import DataSet, PatchSample
from .uncertainty import (
    DEFAULT_DROPOUT,
    DEFAULT_T,
    DiscriminatorModel,
    PairSample,
    UncertaintyScore,
    load_discriminator,
    make_training_pairs,
    save_discriminator,
    score_candidates,
    train_discriminator,
    write_scores_csv,
)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Adaptation settings or dataset splits unusable for a run."""


class ResumeError(ValueError):
    """Run directory holds no complete, consistent iteration checkpoint."""


def _default_detector_cfg() -> TrainConfig:
    return TrainConfig(epochs=60, batch_size=8, augment=True)


def _default_discriminator_cfg() -> TrainConfig:
    return TrainConfig(epochs=100, batch_size=16, augment=True)


@dataclass
class AdaptationConfig:
    th_d: float = DEFAULT_TH_D
    th_u: float = 10
    T: int = DEFAULT_T
    max_iterations: int = 4
    sigma: float = DEFAULT_SIGMA
    amplitude: float = DEFAULT_AMPLITUDE
    nms_radius: int | None = None
    detector: TrainConfig = field(default_factory=_default_detector_cfg)
    discriminator: TrainConfig = field(default_factory=_default_discriminator_cfg)
    finetune: bool = True
    detector_finetune_epochs: int = 30
    discriminator_finetune_epochs: int = 40
    detector_widths: tuple[int, ...] = (8, 16, 32, 64, 64)
    discriminator_widths: tuple[int, ...] = (16, 32, 64, 128)
    discriminator_blocks: int = 1
    dropout: float = DEFAULT_DROPOUT
    neg_per_pos: int = 3
    corrupt_pseudo: bool = True
    uncertainty_metric: str = "mean_p1"
    candidate_subset: int | None = None
    final_retrain: bool = True
    d_match: float = DEFAULT_D_MATCH
    seed: int = 0

    def validate(self) -> None:
        if self.max_iterations < 1:
            raise ConfigError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.th_u <= 0 or (self.th_u >= 1 and self.th_u != int(self.th_u)):
            raise ConfigError(f"th_u must be a positive count or a fraction in (0, 1), got {self.th_u}")
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if not 0 <= self.th_d <= 255:
            raise ConfigError(f"th_d must be in [0, 255], got {self.th_d}")
        if self.uncertainty_metric not in ("mean_p1", "variance"):
            raise ConfigError(f"unknown uncertainty_metric {self.uncertainty_metric!r}")
        if self.detector_finetune_epochs < 1 or self.discriminator_finetune_epochs < 1:
            raise ConfigError("fine-tune epochs must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.candidate_subset is not None and self.candidate_subset < 1:
            raise ConfigError("candidate_subset must be >= 1 when set")
        self.detector.validate()
        self.discriminator.validate()

    @property
    def radius(self) -> int:
        return int(round(self.sigma)) if self.nms_radius is None else self.nms_radius

    def selection_count(self, initial_pool: int) -> int:
        if self.th_u >= 1:
            return int(self.th_u)
        return max(1, int(round(self.th_u * initial_pool)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["detector_widths"] = list(self.detector_widths)
        d["discriminator_widths"] = list(self.discriminator_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptationConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown adaptation settings {sorted(unknown)}")
        for key in ("detector", "discriminator"):
            if isinstance(d.get(key), dict):
                d[key] = TrainConfig(**d[key])
        for key in ("detector_widths", "discriminator_widths"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class AdaptationState:
    iteration: int
    detector: DetectorModel | None
    discriminator: DiscriminatorModel | None
    training_pool: list[PatchSample]
    remaining_unlabeled: list[PatchSample]
    history: list[dict] = field(default_factory=list)
    initial_unlabeled: int = 0

    def selected_ids(self) -> list[str]:
        return [i for rec in self.history for i in rec["selected"]]


@dataclass
class IterationOutput:
    """Side products of one iteration, kept for auditing and reports."""

    scored: list[tuple[str, UncertaintyScore]]
    pseudo: dict[str, PositionHeatmap]


@dataclass
class RunReport:
    rows: list[dict]
    final: dict | None
    selected: dict[int, list[str]]
    run_dir: Path | None = None

    @property
    def baseline(self) -> dict:
        return self.rows[0]

    @property
    def adapted(self) -> dict:
        return self.final if self.final is not None else self.rows[-1]


def initial_state(dataset: DataSet) -> AdaptationState:
    labeled = dataset.split("labeled-source")
    unlabeled = dataset.split("unlabeled-target")
    return AdaptationState(0, None, None, list(labeled), list(unlabeled), [], len(unlabeled))


def select_pseudo(scored: Sequence[tuple[str, UncertaintyScore]], th_u: int,
                  candidates: dict[str, tuple[PatchSample, PositionHeatmap]],
                  nms_radius: int | None = None) -> list[PatchSample]:
    """Take the first ``th_u`` scored candidates as pseudo-labeled samples.

    Their points are the peaks of the clean pseudo-heatmap, where every peak
    sits at full amplitude.
    """
    out = []
    for cid, _ in list(scored)[:max(0, th_u)]:
        sample, pseudo = candidates[cid]
        points = detect_peaks(pseudo, th_d=pseudo.amplitude / 2, nms_radius=nms_radius)
        out.append(PatchSample(sample.image, points, sample.domain, "pseudo", sample.id))
    return out


def _stage_cfg(base: TrainConfig, cfg: AdaptationConfig, name: str, k: int, finetune_epochs: int) -> TrainConfig:
    epochs = base.epochs if (k == 0 or not cfg.finetune) else finetune_epochs
    return replace(base, epochs=epochs, seed=derive_seed(base.seed, name, k))


def train_pool_detector(pool: Sequence[PatchSample], prev: DetectorModel | None, cfg: AdaptationConfig,
                        k: int) -> DetectorModel:
    start = copy.deepcopy(prev) if (cfg.finetune and prev is not None) else None
    det_cfg = _stage_cfg(cfg.detector, cfg, "detector", k, cfg.detector_finetune_epochs)
    return train_detector(start, pool, det_cfg, widths=cfg.detector_widths,
                          sigma=cfg.sigma, amplitude=cfg.amplitude)


def discriminator_pairs(pool: Sequence[PatchSample], cfg: AdaptationConfig, k: int) -> list[PairSample]:
    labeled = [s for s in pool if s.provenance != "pseudo"]
    pseudo = [s for s in pool if s.provenance == "pseudo"]
    seed = derive_seed(cfg.seed, "pairs", k)
    pairs = make_training_pairs(labeled, cfg.neg_per_pos, seed, cfg.sigma, cfg.amplitude)
    if pseudo:
        pairs += make_training_pairs(pseudo, cfg.neg_per_pos if cfg.corrupt_pseudo else 0,
                                     seed, cfg.sigma, cfg.amplitude)
    return pairs


def build_candidates(detector: DetectorModel, unlabeled: Sequence[PatchSample],
                     cfg: AdaptationConfig) -> dict[str, tuple[PatchSample, PositionHeatmap]]:
    """Regenerated pseudo-heatmaps for patches with at least one detection."""
    if not unlabeled:
        return {}
    grids = predict_grids(detector, [s.image for s in unlabeled])
    out = {}
    for s, grid in zip(unlabeled, grids):
        pseudo = regenerate(grid, cfg.th_d, cfg.sigma, cfg.amplitude, cfg.radius)
        if np.any(pseudo.grid > 0):
            out[s.id] = (s, pseudo)
    return out


def run_iteration(state: AdaptationState, cfg: AdaptationConfig) -> tuple[AdaptationState, IterationOutput]:
    """One full train / predict / regenerate / score / select round."""
    k = state.iteration
    pool = list(state.training_pool)
    detector = train_pool_detector(pool, state.detector, cfg, k)

    pairs = discriminator_pairs(pool, cfg, k)
    prev_disc = copy.deepcopy(state.discriminator) if (cfg.finetune and state.discriminator is not None) else None
    disc_cfg = _stage_cfg(cfg.discriminator, cfg, "discriminator", k, cfg.discriminator_finetune_epochs)
    discriminator = train_discriminator(prev_disc, pairs, disc_cfg, widths=cfg.discriminator_widths,
                                        blocks=cfg.discriminator_blocks, dropout=cfg.dropout)

    remaining = list(state.remaining_unlabeled)
    pool_for_scoring = remaining
    if cfg.candidate_subset is not None and len(remaining) > cfg.candidate_subset:
        rng = np.random.default_rng(derive_seed(cfg.seed, "subset", k))
        keep = set(rng.choice(len(remaining), cfg.candidate_subset, replace=False).tolist())
        pool_for_scoring = [s for i, s in enumerate(remaining) if i in keep]
    candidates = build_candidates(detector, pool_for_scoring, cfg)

    scored: list[tuple[str, UncertaintyScore]] = []
    if candidates:
        pairs_in = [PairSample(s.image, hm, None, cid) for cid, (s, hm) in candidates.items()]
        scored = score_candidates(discriminator, pairs_in, cfg.T, derive_seed(cfg.seed, "mc", k),
                                  cfg.uncertainty_metric)
    n_select = cfg.selection_count(state.initial_unlabeled)
    selected = select_pseudo(scored, n_select, candidates, cfg.radius)
    chosen = {s.id for s in selected}

    record = {
        "iteration": k,
        "n_candidates": len(candidates),
        "n_unlabeled": len(remaining),
        "selected": [s.id for s in selected],
        "selected_scores": [s.score for cid, s in scored[:len(selected)]],
        "pool_size": len(pool) + len(selected),
    }
    new_state = AdaptationState(
        iteration=k + 1,
        detector=detector,
        discriminator=discriminator,
        training_pool=pool + selected,
        remaining_unlabeled=[s for s in remaining if s.id not in chosen],
        history=state.history + [record],
        initial_unlabeled=state.initial_unlabeled,
    )
    pseudo = {cid: hm for cid, (_, hm) in candidates.items()}
    return new_state, IterationOutput(scored, pseudo)


# --- evaluation and persistence -------------------------------------------------

def test_pairs(dataset: DataSet, split: str) -> list[tuple[np.ndarray, list[Point]]]:
    return [(s.image, dataset.ground_truth(s.id)) for s in dataset.split(split)]


def evaluate_detector(detector: DetectorModel, dataset: DataSet, cfg: AdaptationConfig) -> dict[str, MatchReport]:
    return {
        split: evaluate_model(detector, test_pairs(dataset, split), cfg.d_match, cfg.th_d)
        for split in ("test-source", "test-target")
    }


def report_row(iteration: int | str, reports: dict[str, MatchReport], n_selected: int) -> dict:
    src, tgt = reports["test-source"], reports["test-target"]
    return {
        "iteration": iteration,
        "f_source": src.f_score,
        "f_target": tgt.f_score,
        "precision_source": src.precision,
        "recall_source": src.recall,
        "precision_target": tgt.precision,
        "recall_target": tgt.recall,
        "n_selected": n_selected,
    }


def check_dataset(dataset: DataSet) -> None:
    if not dataset.manifest.get("labeled-source"):
        raise ConfigError("dataset has no labeled-source samples")
    for split in ("test-source", "test-target"):
        if not dataset.manifest.get(split):
            raise ConfigError(f"dataset has no {split} split")
        missing = [i for i in dataset.manifest[split] if i not in dataset.shadow]
        if missing:
            raise ConfigError(f"{split}: no evaluation ground truth for {missing[0]!r}")


def _write_selected(path: Path, record: dict) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["candidate_id", "score"])
        for cid, score in zip(record["selected"], record["selected_scores"]):
            writer.writerow([cid, repr(float(score))])


def _state_blob(state: AdaptationState) -> dict:
    return {
        "iteration": state.iteration,
        "initial_unlabeled": state.initial_unlabeled,
        "pool": [
            {"id": s.id, "provenance": s.provenance,
             "points": [[p.x, p.y] for p in s.points] if s.provenance == "pseudo" else None}
            for s in state.training_pool
        ],
        "remaining": [s.id for s in state.remaining_unlabeled],
        "history": state.history,
    }


def save_iteration(run_dir: Path, state: AdaptationState, out: IterationOutput, row: dict,
                   reports: dict[str, MatchReport], cfg: AdaptationConfig) -> Path:
    k = state.iteration - 1
    d = run_dir / f"iter_{k}"
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state.detector, d / "detector.ckpt")
    save_discriminator(state.discriminator, d / "discriminator.ckpt")
    _write_selected(d / "selected.csv", state.history[-1])
    write_scores_csv(out.scored, d / "scores.csv")
    write_metrics_csv(reports, d / "metrics.csv", cfg.d_match, cfg.th_d)
    # written last: its presence marks the iteration as complete
    (d / "state.json").write_text(json.dumps({"state": _state_blob(state), "row": row}, indent=1))
    return d


def load_state(run_dir: str | Path, dataset: DataSet) -> tuple[AdaptationState, list[dict]]:
    """Rebuild the state after the last complete iteration in ``run_dir``."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ResumeError(f"{run_dir}: run directory does not exist")
    done = sorted(
        (int(p.name.split("_", 1)[1]) for p in run_dir.glob("iter_*")
         if p.name.split("_", 1)[1].isdigit() and (p / "state.json").exists()),
    )
    if not done:
        raise ResumeError(f"{run_dir}: no complete iteration checkpoint (iter_<k>/state.json)")
    rows = []
    for k in range(done[-1] + 1):
        sp = run_dir / f"iter_{k}" / "state.json"
        if not sp.exists():
            raise ResumeError(f"{run_dir}: iteration {k} is incomplete (missing {sp.name})")
        rows.append(json.loads(sp.read_text())["row"])
    last = run_dir / f"iter_{done[-1]}"
    for piece in ("detector.ckpt", "discriminator.ckpt", "selected.csv", "metrics.csv"):
        if not (last / piece).exists():
            raise ResumeError(f"{last}: checkpoint is missing {piece}")
    try:
        blob = json.loads((last / "state.json").read_text())["state"]
    except (json.JSONDecodeError, KeyError) as e:
        raise ResumeError(f"{last / 'state.json'}: corrupt state ({e})") from None
    pool = []
    for entry in blob["pool"]:
        sid = entry["id"]
        if sid not in dataset.samples:
            raise ResumeError(f"{last}: pool id {sid!r} is not in the dataset")
        base = dataset.samples[sid]
        if entry["provenance"] == "pseudo":
            pts = [Point(float(x), float(y)) for x, y in entry["points"]]
            pool.append(PatchSample(base.image, pts, base.domain, "pseudo", sid))
        else:
            pool.append(base)
    remaining = [dataset.samples[i] for i in blob["remaining"]]
    state = AdaptationState(
        iteration=blob["iteration"],
        detector=load_checkpoint(last / "detector.ckpt"),
        discriminator=load_discriminator(last / "discriminator.ckpt"),
        training_pool=pool,
        remaining_unlabeled=remaining,
        history=blob["history"],
        initial_unlabeled=blob["initial_unlabeled"],
    )
    return state, rows


def save_run_config(run_dir: Path, cfg: AdaptationConfig, dataset_path: str | None) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "adaptation.json").write_text(
        json.dumps({"config": cfg.to_dict(), "dataset": dataset_path}, indent=1, sort_keys=True)
    )


def load_run_config(run_dir: str | Path) -> tuple[AdaptationConfig, str | None]:
    p = Path(run_dir) / "adaptation.json"
    if not p.exists():
        raise ResumeError(f"{run_dir}: missing adaptation.json")
    blob = json.loads(p.read_text())
    return AdaptationConfig.from_dict(blob["config"]), blob.get("dataset")


def resume(checkpoint_dir: str | Path, dataset: DataSet | None = None) -> AdaptationState:
    """Reconstruct the adaptation state stored in a run directory."""
    checkpoint_dir = Path(checkpoint_dir)
    if dataset is None:
        _, ds_path = load_run_config(checkpoint_dir)
        if ds_path is None:
            raise ResumeError(f"{checkpoint_dir}: no dataset recorded; pass one explicitly")
        from .synth import load_dataset

        dataset = load_dataset(ds_path)
    return load_state(checkpoint_dir, dataset)[0]


def run_adaptation(dataset: DataSet, cfg: AdaptationConfig, run_dir: str | Path | None = None, *,
                   resume_run: bool = False, stop_after: int | None = None,
                   dataset_path: str | None = None) -> RunReport:
    """Run ``cfg.max_iterations`` iterations, evaluating after each one.

    ``stop_after`` ends the run once that many iterations exist (used to
    simulate an interruption).  With ``resume_run`` the run continues from
    the last complete iteration found in ``run_dir``.
    """
    cfg.validate()
    check_dataset(dataset)
    run_dir = Path(run_dir) if run_dir is not None else None
    rows: list[dict] = []
    if resume_run:
        if run_dir is None:
            raise ConfigError("resume needs a run directory")
        state, rows = load_state(run_dir, dataset)
    else:
        state = initial_state(dataset)
        if run_dir is not None:
            save_run_config(run_dir, cfg, dataset_path)

    while state.iteration < cfg.max_iterations:
        if stop_after is not None and state.iteration >= stop_after:
            break
        state, out = run_iteration(state, cfg)
        reports = evaluate_detector(state.detector, dataset, cfg)
        row = report_row(state.iteration - 1, reports, len(state.history[-1]["selected"]))
        rows.append(row)
        log.info("iteration %d: f_source=%.3f f_target=%.3f selected=%d",
                 row["iteration"], row["f_source"], row["f_target"], row["n_selected"])
        if run_dir is not None:
            save_iteration(run_dir, state, out, row, reports, cfg)
            write_report_csv(rows, run_dir / "report.csv")

    selected = {rec["iteration"]: list(rec["selected"]) for rec in state.history}
    final = None
    if state.iteration >= cfg.max_iterations and cfg.final_retrain and state.history[-1]["selected"]:
        final = _final_round(state, dataset, cfg, run_dir)
    return RunReport(rows, final, selected, run_dir)


def _final_round(state: AdaptationState, dataset: DataSet, cfg: AdaptationConfig,
                 run_dir: Path | None) -> dict:
    """Train once more so the last iteration's selections are used."""
    if run_dir is not None and (run_dir / "final" / "row.json").exists():
        return json.loads((run_dir / "final" / "row.json").read_text())
    detector = train_pool_detector(state.training_pool, state.detector, cfg, state.iteration)
    reports = evaluate_detector(detector, dataset, cfg)
    row = report_row("final", reports, 0)
    if run_dir is not None:
        d = run_dir / "final"
        d.mkdir(exist_ok=True)
        save_checkpoint(detector, d / "detector.ckpt")
        write_metrics_csv(reports, d / "metrics.csv", cfg.d_match, cfg.th_d)
        (d / "row.json").write_text(json.dumps(row, indent=1))
    return row
