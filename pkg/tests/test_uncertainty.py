import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from pseudoheat.detector import CheckpointError, TrainConfig, TrainingError
from pseudoheat.heatmap import CorruptionSpec, corrupt, detect_peaks, encode_points
from pseudoheat.synth import SOURCE_DOMAIN, PatchSample, generate_patch
from pseudoheat.uncertainty import (
    MCDropout,
    PairSample,
    UncertaintyScore,
    class1_probability,
    load_discriminator,
    make_training_pairs,
    mc_pass_probabilities,
    mc_uncertainty,
    new_discriminator,
    random_corruption,
    save_discriminator,
    score_candidates,
    selection_key,
    standardize_images,
    train_discriminator,
    write_scores_csv,
)

from conftest import state_dicts_equal

SMALL = (4, 8, 8, 8)


@pytest.fixture(scope="module")
def labeled():
    return [generate_patch(SOURCE_DOMAIN, 300 + i, sample_id=f"L{i:02d}") for i in range(24)]


@pytest.fixture(scope="module")
def shift_disc(labeled):
    """Discriminator trained on clean versus 4-sigma-shifted heatmaps."""
    pairs = []
    for i, s in enumerate(labeled):
        pairs.append(PairSample(s.image, encode_points(s.points, (128, 128)), 0, f"{s.id}+pos"))
        spec = CorruptionSpec("shift", min(3, len(s.points)), (18.0, 24.0)) if s.points else CorruptionSpec("add", 2)
        hm, _ = corrupt(s.points, (128, 128), spec, i)
        pairs.append(PairSample(s.image, hm, 1, f"{s.id}+neg"))
    return train_discriminator(None, pairs, TrainConfig(epochs=60, batch_size=8, augment=True, seed=4))


def _shift_pairs(seeds):
    out = []
    for i in seeds:
        s = generate_patch(SOURCE_DOMAIN, i)
        if not s.points:
            continue
        clean = PairSample(s.image, encode_points(s.points, (128, 128)), 0, f"{i}c")
        k = min(3, len(s.points))
        hm, _ = corrupt(s.points, (128, 128), CorruptionSpec("shift", k, (24.0, 24.0)), i)
        out.append((clean, PairSample(s.image, hm, 1, f"{i}s")))
    return out


def test_pair_counts(labeled):
    assert len(make_training_pairs(labeled, 1, 0)) == 48
    pos_only = make_training_pairs(labeled, 0, 0)
    assert len(pos_only) == 24 and all(p.label == 0 for p in pos_only)
    three = make_training_pairs(labeled, 3, 0)
    assert sum(p.label for p in three) == 72


def test_negatives_differ_from_ground_truth(labeled):
    pairs = make_training_pairs(labeled, 2, 1)
    by_id = {s.id: s for s in labeled}
    for p in pairs:
        if p.label == 1:
            gt = by_id[p.id.split("+")[0]].points
            peaks = {q.as_tuple() for q in detect_peaks(p.heatmap, 100)}
            assert peaks != {q.rounded().as_tuple() for q in gt}


def test_empty_sample_only_gets_add_corruptions():
    empty = PatchSample(np.zeros((128, 128), np.uint8), [], "source", "labeled-source", "e")
    pairs = make_training_pairs([empty], 5, 3)
    assert all(len(detect_peaks(p.heatmap, 100)) >= 1 for p in pairs if p.label == 1)


def test_pairs_deterministic(labeled):
    a = make_training_pairs(labeled[:4], 2, 9)
    b = make_training_pairs(labeled[:4], 2, 9)
    assert [(p.id, p.label) for p in a] == [(p.id, p.label) for p in b]
    assert all(x.heatmap == y.heatmap for x, y in zip(a, b))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 12), st.integers(0, 2**32 - 1))
def test_random_corruption_is_always_valid(n, seed):
    spec = random_corruption(n, np.random.default_rng(seed), 6.0)
    spec.validate(n, 6.0)
    assert spec.shift_range == (12.0, 24.0)
    assert 1 <= spec.count <= 3


def test_single_class_rejected(labeled):
    pairs = make_training_pairs(labeled[:3], 0, 0)
    with pytest.raises(TrainingError, match="single class"):
        train_discriminator(None, pairs, TrainConfig(epochs=1), widths=SMALL)
    with pytest.raises(TrainingError, match="empty"):
        train_discriminator(None, [], TrainConfig(epochs=1), widths=SMALL)


def test_training_deterministic(labeled):
    pairs = make_training_pairs(labeled[:4], 1, 0)
    cfg = TrainConfig(epochs=2, batch_size=4, seed=3, augment=True)
    a = train_discriminator(None, pairs, cfg, widths=SMALL)
    b = train_discriminator(None, pairs, cfg, widths=SMALL)
    assert state_dicts_equal(a.net, b.net)
    assert a.loss_history == b.loss_history


def test_standardize_removes_brightness_and_contrast():
    img = np.random.default_rng(0).integers(0, 200, (2, 128, 128))
    shifted = img * 0.5 + 40
    # equal up to the small std floor that keeps flat patches finite
    assert np.allclose(standardize_images(img), standardize_images(shifted), atol=1e-2)


def test_held_out_accuracy_on_shifts(shift_disc):
    correct = total = 0
    for clean, bad in _shift_pairs(range(2000, 2030)):
        correct += (class1_probability(shift_disc, clean) < 0.5) + (class1_probability(shift_disc, bad) >= 0.5)
        total += 2
    assert correct / total > 0.9


def test_clean_candidate_ranks_first(shift_disc):
    wins = trials = 0
    for clean, bad in _shift_pairs(range(3000, 3020)):
        ranked = score_candidates(shift_disc, [bad, clean], 10, rng_seed=trials)
        wins += ranked[0][0] == clean.id
        trials += 1
    assert wins / trials >= 0.9


def test_zero_dropout_matches_deterministic_probability(shift_disc, labeled):
    model = new_discriminator(dropout=0.0)
    model.net.load_state_dict(shift_disc.net.state_dict())
    pair = make_training_pairs(labeled[:1], 1, 0)[1]
    s = mc_uncertainty(model, pair, 10, 123)
    assert s.variance == 0.0
    assert s.score == class1_probability(model, pair)
    assert len(set(s.per_pass)) == 1


def test_zero_head_gives_one_half(labeled):
    model = new_discriminator(SMALL)
    torch.nn.init.zeros_(model.net.head.weight)
    torch.nn.init.zeros_(model.net.head.bias)
    s = mc_uncertainty(model, make_training_pairs(labeled[:1], 0, 0)[0], 10, 1)
    assert s.score == 0.5 and s.variance == 0.0


def test_mc_passes_are_stochastic_and_seeded(shift_disc, labeled):
    pair = make_training_pairs(labeled[:1], 0, 0)[0]
    a = mc_pass_probabilities(shift_disc, pair, 10, 7)
    b = mc_pass_probabilities(shift_disc, pair, 10, 7)
    assert np.array_equal(a, b)
    assert len(np.unique(a[:, 1])) > 1
    assert np.allclose(a.sum(axis=1), 1.0, atol=1e-6)
    # dropout is switched off again afterwards
    assert all(not d.mc_active for d in shift_disc.net.dropouts())


def test_T_validation(shift_disc, labeled):
    pair = make_training_pairs(labeled[:1], 0, 0)[0]
    with pytest.raises(ValueError, match="T"):
        mc_uncertainty(shift_disc, pair, 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=50))
def test_score_is_exact_mean(per_pass):
    s = UncertaintyScore.from_passes(per_pass)
    mean = math.fsum(per_pass) / len(per_pass)
    assert s.score == pytest.approx(mean, abs=1e-15)
    assert s.variance >= 0
    assert s.variance == pytest.approx(float(np.var(per_pass)), abs=1e-12)
    if len(set(per_pass)) == 1:
        assert s.score == per_pass[0] and s.variance == 0.0


def test_score_candidates_tie_order_and_single():
    model = new_discriminator(SMALL)
    torch.nn.init.zeros_(model.net.head.weight)
    torch.nn.init.zeros_(model.net.head.bias)
    img = np.zeros((128, 128), np.uint8)
    hm = encode_points([(10, 10)], (128, 128))
    cands = [PairSample(img, hm, None, i) for i in ("c", "a", "b")]
    assert [cid for cid, _ in score_candidates(model, cands, 3)] == ["a", "b", "c"]
    assert len(score_candidates(model, cands[:1], 3)) == 1
    with pytest.raises(ValueError):
        score_candidates(model, [], 3)


def test_score_independent_of_candidate_order(shift_disc, labeled):
    pairs = make_training_pairs(labeled[:3], 1, 2)
    fwd = dict(score_candidates(shift_disc, pairs, 5, 11))
    rev = dict(score_candidates(shift_disc, pairs[::-1], 5, 11))
    assert fwd == rev


def test_selection_key_metrics():
    s = UncertaintyScore(0.3, (0.2, 0.4), 0.01)
    assert selection_key(s, "mean_p1") == 0.3
    assert selection_key(s, "variance") == 0.01
    with pytest.raises(ValueError):
        selection_key(s, "entropy")


def test_mc_dropout_module_only_active_on_request():
    layer = MCDropout(0.5).eval()
    x = torch.ones(100)
    assert torch.equal(layer(x), x)
    layer.mc_active = True
    layer.generator = torch.Generator().manual_seed(0)
    y = layer(x)
    assert set(y.unique().tolist()) <= {0.0, 2.0}


def test_scores_csv_and_checkpoint(tmp_path, shift_disc, labeled):
    pairs = make_training_pairs(labeled[:2], 1, 0)
    scored = score_candidates(shift_disc, pairs, 4, 0)
    write_scores_csv(scored, tmp_path / "scores.csv")
    lines = (tmp_path / "scores.csv").read_text().splitlines()
    assert lines[0] == "candidate_id,score,variance" and len(lines) == 5
    save_discriminator(shift_disc, tmp_path / "b.ckpt")
    back = load_discriminator(tmp_path / "b.ckpt")
    assert state_dicts_equal(back.net, shift_disc.net)
    assert score_candidates(back, pairs, 4, 0) == scored
    with pytest.raises(CheckpointError):
        load_discriminator(tmp_path / "missing.ckpt")
