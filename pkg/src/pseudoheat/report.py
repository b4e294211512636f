"""Plots and tables summarising an adaptation run directory."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .detector import load_checkpoint, predict_grids  # noqa: E402
from .heatmap import regenerate  # noqa: E402
from .selftrain import load_run_config  # noqa: E402
from .synth import DataSet, load_dataset  # noqa: E402
from .uncertainty import PairSample, embed_pairs, load_discriminator, make_training_pairs  # noqa: E402


class ReportError(ValueError):
    """Run directory too incomplete to report on, or output not writable."""


def _read_csv(path: Path) -> list[dict]:
    if not path.exists():
        raise ReportError(f"{path}: not found")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def iteration_dirs(run_dir: Path) -> list[Path]:
    dirs = [p for p in run_dir.glob("iter_*") if (p / "state.json").exists()]
    return sorted(dirs, key=lambda p: int(p.name.split("_")[1]))


def pca_2d(features: np.ndarray) -> np.ndarray:
    """Project onto the two leading principal directions (sign fixed for determinism)."""
    centered = features - features.mean(axis=0, keepdims=True)
    if len(centered) < 2:
        return np.zeros((len(centered), 2))
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    for i, c in enumerate(comps):
        if c[np.argmax(np.abs(c))] < 0:
            comps[i] = -c
    proj = centered @ comps.T
    if proj.shape[1] < 2:
        proj = np.pad(proj, ((0, 0), (0, 2 - proj.shape[1])))
    return proj


def plot_f_scores(rows: list[dict], path: Path, final: dict | None = None) -> None:
    its = [int(r["iteration"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(its, [float(r["f_source"]) for r in rows], "o-", label="source test")
    ax.plot(its, [float(r["f_target"]) for r in rows], "s-", label="target test")
    if final is not None:
        x = its[-1] + 1
        ax.plot([x], [final["f_source"]], "o", color="C0", mfc="none")
        ax.plot([x], [final["f_target"]], "s", color="C1", mfc="none")
        ax.set_xticks(its + [x], [str(i) for i in its] + ["final"])
    ax.set_xlabel("iteration")
    ax.set_ylabel("F-score")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_triptych(image: np.ndarray, predicted: np.ndarray, pseudo: np.ndarray, path: Path, title: str) -> None:
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    for ax, arr, name in zip(axes, (image, predicted, pseudo), ("image", "predicted", "pseudo")):
        ax.imshow(arr, cmap="gray", vmin=0, vmax=255)
        ax.set_title(name)
        ax.axis("off")
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)


def feature_scatter(run_dir: Path, dataset: DataSet, path: Path) -> list[dict]:
    """Discriminator-feature scatter for the last iteration's candidates plus labeled source.

    The 2-D layout is a linear PCA projection, an approximation of a
    feature-distribution picture rather than a reproduction of one.
    """
    dirs = iteration_dirs(run_dir)
    if not dirs:
        raise ReportError(f"{run_dir}: no completed iterations")
    last = dirs[-1]
    k = int(last.name.split("_")[1])
    cfg, _ = load_run_config(run_dir)
    detector = load_checkpoint(last / "detector.ckpt")
    disc = load_discriminator(last / "discriminator.ckpt")
    scored_ids = [r["candidate_id"] for r in _read_csv(last / "scores.csv")]
    selected = {r["candidate_id"] for r in _read_csv(last / "selected.csv")}

    samples = [dataset.samples[i] for i in scored_ids]
    grids = predict_grids(detector, [s.image for s in samples]) if samples else []
    pairs = [PairSample(s.image, regenerate(g, cfg.th_d, cfg.sigma, cfg.amplitude, cfg.radius), None, s.id)
             for s, g in zip(samples, grids)]
    groups = [f"selected iter {k}" if s.id in selected else "unselected" for s in samples]
    labeled = dataset.split("labeled-source")
    pairs += make_training_pairs(labeled, 0, 0, cfg.sigma, cfg.amplitude)
    groups += ["labeled source"] * len(labeled)
    ids = [p.id for p in pairs]

    xy = pca_2d(embed_pairs(disc, pairs)) if pairs else np.zeros((0, 2))
    palette = {"labeled source": "tab:red", "unselected": "lightgray", f"selected iter {k}": f"C{k % 10}"}
    fig, ax = plt.subplots(figsize=(5, 4.5))
    for g in ("unselected", "labeled source", f"selected iter {k}"):
        m = np.array([gg == g for gg in groups], dtype=bool)
        if m.any():
            ax.scatter(xy[m, 0], xy[m, 1], s=10, c=palette[g], label=g)
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.set_title("discriminator features (linear projection)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return [{"id": i, "pc1": float(a), "pc2": float(b), "group": g}
            for i, (a, b), g in zip(ids, xy, groups)]


def emit_report(run_dir: str | Path, out_dir: str | Path | None = None, dataset: DataSet | None = None,
                n_triptych: int = 2) -> dict[str, Path]:
    """Write the F-score table and plot, triptychs and the feature scatter."""
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir is not None else run_dir / "report"
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ReportError(f"{out}: cannot create report directory ({e})") from None
    rows = _read_csv(run_dir / "report.csv")
    final = None
    if (run_dir / "final" / "row.json").exists():
        final = json.loads((run_dir / "final" / "row.json").read_text())
    if dataset is None:
        _, ds_path = load_run_config(run_dir)
        if ds_path is None:
            raise ReportError(f"{run_dir}: no dataset recorded; pass one explicitly")
        dataset = load_dataset(ds_path)
    cfg, _ = load_run_config(run_dir)

    written: dict[str, Path] = {}
    table = out / "report.csv"
    with open(table, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()) if rows else ["iteration"])
        writer.writeheader()
        writer.writerows(rows)
    written["table"] = table
    plot_f_scores(rows, out / "f_scores.png", final)
    written["f_plot"] = out / "f_scores.png"

    for d in iteration_dirs(run_dir):
        k = int(d.name.split("_")[1])
        ids = [r["candidate_id"] for r in _read_csv(d / "selected.csv")][:n_triptych]
        if not ids:
            continue
        detector = load_checkpoint(d / "detector.ckpt")
        grids = predict_grids(detector, [dataset.samples[i].image for i in ids])
        for i, g in zip(ids, grids):
            p = out / f"triptych_iter{k}_{i}.png"
            pseudo = regenerate(g, cfg.th_d, cfg.sigma, cfg.amplitude, cfg.radius)
            plot_triptych(dataset.samples[i].image, g, pseudo.grid, p, f"iteration {k}: {i}")
            written[p.stem] = p

    points = feature_scatter(run_dir, dataset, out / "feature_scatter.png")
    with open(out / "feature_scatter.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["id", "pc1", "pc2", "group"])
        writer.writeheader()
        writer.writerows(points)
    written["scatter"] = out / "feature_scatter.png"
    written["scatter_table"] = out / "feature_scatter.csv"
    return written
