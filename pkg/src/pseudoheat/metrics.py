"""One-to-one proximity matching, F-score aggregation and run reports."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .heatmap import DEFAULT_TH_D, Point, as_points

if TYPE_CHECKING:
    from .detector import DetectorModel

DEFAULT_D_MATCH = 10.0


class EvaluationError(ValueError):
    """Evaluation requested on an empty split or without ground truth."""


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f


@dataclass
class MatchReport:
    tp: int
    fp: int
    fn: int
    matched_pairs: list[tuple[int, int, float]] = field(default_factory=list)

    @property
    def precision(self) -> float:
        return prf(self.tp, self.fp, self.fn)[0]

    @property
    def recall(self) -> float:
        return prf(self.tp, self.fp, self.fn)[1]

    @property
    def f_score(self) -> float:
        return prf(self.tp, self.fp, self.fn)[2]

    def __add__(self, other: "MatchReport") -> "MatchReport":
        return MatchReport(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def as_row(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "precision": self.precision, "recall": self.recall, "f_score": self.f_score,
        }


def match_detections(pred: Sequence, gt: Sequence, d_match: float = DEFAULT_D_MATCH) -> MatchReport:
    """Maximum-cardinality matching within ``d_match``, ties by least total distance."""
    if not d_match > 0:
        raise ValueError(f"d_match must be > 0, got {d_match}")
    p = np.array([q.as_tuple() for q in as_points(pred)], dtype=np.float64).reshape(-1, 2)
    g = np.array([q.as_tuple() for q in as_points(gt)], dtype=np.float64).reshape(-1, 2)
    if len(p) == 0 or len(g) == 0:
        return MatchReport(0, len(p), len(g))
    dist = np.sqrt(((p[:, None, :] - g[None, :, :]) ** 2).sum(-1))
    feasible = dist <= d_match
    # every extra match outweighs any possible distance saving
    bonus = d_match * (min(len(p), len(g)) + 1) + 1.0
    cost = np.where(feasible, dist - bonus, 0.0)
    rows, cols = linear_sum_assignment(cost)
    pairs = [(int(r), int(c), float(dist[r, c])) for r, c in zip(rows, cols) if feasible[r, c]]
    tp = len(pairs)
    return MatchReport(tp, len(p) - tp, len(g) - tp, pairs)


def aggregate(reports: Iterable[MatchReport]) -> MatchReport:
    """Micro-average: sum counts, then recompute P/R/F."""
    total = MatchReport(0, 0, 0)
    for r in reports:
        total = total + r
    return total


def evaluate_model(model: "DetectorModel", test_split: Sequence[tuple[np.ndarray, Sequence[Point] | None]],
                   d_match: float = DEFAULT_D_MATCH, th_d: float = DEFAULT_TH_D) -> MatchReport:
    """Full-image detection on each ``(image, gt)`` pair, micro-averaged."""
    from .detector import predict_full_image

    if not test_split:
        raise EvaluationError("test split is empty")
    reports = []
    for i, (image, gt) in enumerate(test_split):
        if gt is None:
            raise EvaluationError(f"test image {i} has no ground truth")
        reports.append(match_detections(predict_full_image(model, image, th_d), gt, d_match))
    return aggregate(reports)


REPORT_COLUMNS = ("iteration", "f_source", "f_target", "precision_target", "recall_target", "n_selected")


def write_report_csv(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in REPORT_COLUMNS})


def _fmt(v: object) -> object:
    return repr(float(v)) if isinstance(v, float) else v


def write_metrics_csv(reports: dict[str, MatchReport], path: str | Path, d_match: float, th_d: float) -> None:
    """One row per evaluated split, with the matching threshold spelled out."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "tp", "fp", "fn", "precision", "recall", "f_score", "d_match", "th_d"])
        for name, r in reports.items():
            writer.writerow([name, r.tp, r.fp, r.fn, repr(r.precision), repr(r.recall), repr(r.f_score),
                             repr(float(d_match)), repr(float(th_d))])


def read_metrics_csv(path: str | Path) -> dict[str, dict]:
    with open(path, newline="") as fh:
        return {row["split"]: row for row in csv.DictReader(fh)}
