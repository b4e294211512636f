import numpy as np
import pytest
import torch

import pseudoheat.detector as det_mod
from pseudoheat.detector import (
    CheckpointError,
    TrainConfig,
    TrainingError,
    load_checkpoint,
    new_detector,
    predict_full_image,
    predict_grids,
    predict_heatmap,
    save_checkpoint,
    train_detector,
)
from pseudoheat.heatmap import Point, detect_peaks, encode_points
from pseudoheat.synth import SOURCE_DOMAIN, Cell, PatchSample, generate_patch, render_cells

from conftest import state_dicts_equal

SMALL = (4, 8, 8, 8, 8)


def _mse_internal(model, sample):
    pred = predict_grids(model, [sample.image])[0] / 255.0
    target = encode_points(sample.points, (128, 128)).grid / 255.0
    return float(np.mean((pred - target) ** 2))


def test_overfit_one_sample():
    s = generate_patch(SOURCE_DOMAIN, 21)
    model = train_detector(None, [s], TrainConfig(learning_rate=3e-3, epochs=150, batch_size=1, seed=0),
                           widths=(8, 16, 16, 16, 16))
    assert _mse_internal(model, s) < 1e-3
    assert model.loss_history[-1] < model.loss_history[0]
    assert model.epochs_trained == 150


def test_zero_epochs_rejected():
    s = generate_patch(SOURCE_DOMAIN, 0)
    with pytest.raises(TrainingError, match="epochs"):
        train_detector(None, [s], TrainConfig(epochs=0))


def test_empty_and_unlabeled_samples_rejected():
    with pytest.raises(TrainingError, match="empty"):
        train_detector(None, [], TrainConfig(epochs=1))
    s = generate_patch(SOURCE_DOMAIN, 0)
    unlabeled = PatchSample(s.image, None, "target", "unlabeled-target", "ut-x")
    with pytest.raises(TrainingError, match="ut-x"):
        train_detector(None, [unlabeled], TrainConfig(epochs=1))


def test_all_zero_targets_converge_to_zero():
    samples = [PatchSample(generate_patch(SOURCE_DOMAIN, i).image, [], "source", "labeled-source", f"z{i}")
               for i in range(4)]
    model = train_detector(None, samples, TrainConfig(epochs=40, batch_size=4, seed=2), widths=SMALL)
    pred = predict_grids(model, [s.image for s in samples]) / 255.0
    assert pred.mean() < 0.05


def test_untrained_zero_head_output_constant():
    model = new_detector(SMALL)
    hm = predict_heatmap(model, generate_patch(SOURCE_DOMAIN, 3).image)
    assert np.ptp(hm.grid) == 0
    assert hm.shape == (128, 128)


def test_predict_heatmap_shape_check():
    with pytest.raises(ValueError, match="128"):
        predict_heatmap(new_detector(SMALL), np.zeros((64, 128)))


def test_training_is_deterministic():
    samples = [generate_patch(SOURCE_DOMAIN, i) for i in range(4)]
    cfg = TrainConfig(epochs=2, batch_size=2, seed=5, augment=True)
    a = train_detector(None, samples, cfg, widths=SMALL)
    b = train_detector(None, samples, cfg, widths=SMALL)
    assert a.loss_history == b.loss_history
    assert state_dicts_equal(a.net, b.net)


def test_trained_detector_finds_source_cell(trained_detector):
    hits = 0
    for seed in range(900, 910):
        s = generate_patch(SOURCE_DOMAIN, seed)
        if not s.points:
            continue
        peaks = detect_peaks(predict_heatmap(trained_detector, s.image), 100)
        hits += any(min(p.distance(g) for p in peaks) <= 10 for g in s.points) if peaks else 0
    assert hits >= 8


def test_inference_is_pure_and_repeatable(trained_detector):
    img = generate_patch(SOURCE_DOMAIN, 77).image
    before = {k: v.clone() for k, v in trained_detector.net.state_dict().items()}
    a = predict_heatmap(trained_detector, img)
    b = predict_heatmap(trained_detector, img)
    assert a == b
    after = trained_detector.net.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert a.grid.min() >= 0 and a.grid.max() <= 255


def test_full_image_single_tile_matches_patch_path(trained_detector):
    img = generate_patch(SOURCE_DOMAIN, 31).image
    assert predict_full_image(trained_detector, img, 100) == detect_peaks(
        predict_heatmap(trained_detector, img), 100)


def test_seam_duplicates_merge_keeping_stronger(monkeypatch):
    # a stub model whose tiles see one cell just left and just right of the x=128 seam
    def fake_grids(model, images, batch_size=32):
        grids = []
        for i, _ in enumerate(images):
            if i == 0:
                grids.append(encode_points([(127, 60)], (128, 128), 6, 200).grid)
            elif i == 1:
                grids.append(encode_points([(1, 61)], (128, 128), 6, 230).grid)
            else:
                grids.append(np.zeros((128, 128)))
        return np.asarray(grids)

    monkeypatch.setattr(det_mod, "predict_grids", fake_grids)
    found = predict_full_image(new_detector(SMALL), np.zeros((256, 256), np.uint8), 100)
    assert found == [Point(129, 61)]


def test_seam_straddling_cell_detected_once(trained_detector):
    cells = [Cell(128.0, 64.0, 6.0, 6.5, 0.3, 70.0)]
    params = SOURCE_DOMAIN
    img = render_cells(params, cells, np.random.default_rng(0), (256, 256))
    found = predict_full_image(trained_detector, img, 100)
    near = [p for p in found if p.distance(Point(128, 64)) <= 10]
    assert len(near) == 1


def test_empty_background_has_no_detections(trained_detector):
    img = render_cells(SOURCE_DOMAIN, [], np.random.default_rng(1), (256, 256))
    assert predict_full_image(trained_detector, img, 100) == []


def test_checkpoint_round_trip(tmp_path, trained_detector):
    p = tmp_path / "d.ckpt"
    save_checkpoint(trained_detector, p)
    back = load_checkpoint(p)
    assert state_dicts_equal(back.net, trained_detector.net)
    assert back.loss_history == trained_detector.loss_history
    img = generate_patch(SOURCE_DOMAIN, 5).image
    assert predict_heatmap(back, img) == predict_heatmap(trained_detector, img)


def test_checkpoint_config_hash_guard(tmp_path, trained_detector):
    p = tmp_path / "d.ckpt"
    save_checkpoint(trained_detector, p)
    other = {"learning_rate": 1e-3, "epochs": 1, "batch_size": 8, "seed": 0, "augment": False}
    with pytest.raises(CheckpointError, match="hash"):
        load_checkpoint(p, expected_config=other)
    assert load_checkpoint(p, expected_config=other, force=True).epochs_trained == 60


def test_checkpoint_missing_or_garbage(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "nope.ckpt")
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
