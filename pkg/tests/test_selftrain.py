import filecmp
import json
from dataclasses import replace

import numpy as np
import pytest

from pseudoheat.detector import new_detector
from pseudoheat.heatmap import encode_points
from pseudoheat.selftrain import (
    AdaptationConfig,
    ConfigError,
    ResumeError,
    build_candidates,
    check_dataset,
    initial_state,
    load_state,
    resume,
    run_adaptation,
    run_iteration,
    select_pseudo,
)
from pseudoheat.synth import DataSet, PatchSample
from pseudoheat.uncertainty import UncertaintyScore

from conftest import state_dicts_equal, tiny_config


def _fake_candidates(n):
    img = np.zeros((128, 128), np.uint8)
    cands, scored = {}, []
    rng = np.random.default_rng(0)
    for i in range(n):
        cid = f"c{i:03d}"
        cands[cid] = (PatchSample(img, None, "target", "unlabeled-target", cid),
                      encode_points([(20 + i % 80, 40)], (128, 128)))
        s = float(rng.random())
        scored.append((cid, UncertaintyScore(s, (s,), 0.0)))
    scored.sort(key=lambda t: (t[1].score, t[0]))
    return cands, scored


def test_select_lowest_th_u():
    cands, scored = _fake_candidates(100)
    chosen = select_pseudo(scored, 10, cands)
    assert [s.id for s in chosen] == [cid for cid, _ in scored[:10]]
    assert all(s.provenance == "pseudo" and len(s.points) == 1 for s in chosen)


def test_select_saturates_and_handles_empty():
    cands, scored = _fake_candidates(4)
    assert len(select_pseudo(scored, 10, cands)) == 4
    assert select_pseudo([], 10, {}) == []


def test_zero_detection_candidates_excluded(tiny_dataset, tiny_cfg):
    # a fresh detector has a zero head, so it predicts nothing anywhere
    assert build_candidates(new_detector((4, 4, 8, 8, 8)), tiny_dataset.split("unlabeled-target"), tiny_cfg) == {}


def test_first_iteration_pool_growth(tiny_dataset, tiny_cfg):
    state, out = run_iteration(initial_state(tiny_dataset), tiny_cfg)
    assert state.iteration == 1
    assert len(state.training_pool) == 6 + 3
    assert len(state.remaining_unlabeled) == 12 - 3
    rec = state.history[0]
    assert rec["selected"] == [cid for cid, _ in out.scored[:3]]
    assert rec["pool_size"] == 9
    pool_ids = {s.id for s in state.training_pool}
    assert not pool_ids & {s.id for s in state.remaining_unlabeled}


def test_empty_unlabeled_pool_is_a_no_op(tiny_dataset, tiny_cfg):
    state = initial_state(tiny_dataset)
    state = replace(state, remaining_unlabeled=[])
    new, out = run_iteration(state, tiny_cfg)
    assert new.iteration == 1
    assert new.history[0]["selected"] == [] and out.scored == []
    assert [s.id for s in new.training_pool] == [s.id for s in state.training_pool]


@pytest.fixture(scope="module")
def full_run(tiny_dataset, tmp_path_factory):
    root = tmp_path_factory.mktemp("run") / "a"
    cfg = tiny_config(max_iterations=3)
    return cfg, run_adaptation(tiny_dataset, cfg, root), root


def test_run_bookkeeping(full_run, tiny_dataset):
    cfg, rep, root = full_run
    assert [r["iteration"] for r in rep.rows] == [0, 1, 2]
    ids = [i for k in sorted(rep.selected) for i in rep.selected[k]]
    assert len(ids) == len(set(ids)) == 9
    state, rows = load_state(root, tiny_dataset)
    assert len(state.history) == cfg.max_iterations
    sizes = [rec["pool_size"] for rec in state.history]
    assert sizes == [9, 12, 15]
    for k in range(3):
        assert (root / f"iter_{k}" / "state.json").exists()
    lines = (root / "report.csv").read_text().splitlines()
    assert lines[0] == "iteration,f_source,f_target,precision_target,recall_target,n_selected"
    assert len(lines) == 1 + 3
    assert json.loads((root / "final" / "row.json").read_text()) == rep.final


def test_pseudo_labels_frozen(full_run, tiny_dataset):
    _, _, root = full_run
    first = json.loads((root / "iter_0" / "state.json").read_text())["state"]["pool"]
    last = json.loads((root / "iter_2" / "state.json").read_text())["state"]["pool"]
    early = {e["id"]: e["points"] for e in first if e["provenance"] == "pseudo"}
    later = {e["id"]: e["points"] for e in last if e["provenance"] == "pseudo"}
    assert early and all(later[i] == pts for i, pts in early.items())


def test_resume_matches_uninterrupted(full_run, tiny_dataset, tmp_path):
    cfg, rep, root = full_run
    other = tmp_path / "b"
    run_adaptation(tiny_dataset, cfg, other, stop_after=1)
    assert not (other / "iter_1").exists()
    resumed = run_adaptation(tiny_dataset, cfg, other, resume_run=True)
    assert resumed.rows == rep.rows and resumed.final == rep.final
    assert filecmp.cmp(root / "report.csv", other / "report.csv", shallow=False)
    for k in range(3):
        for name in ("selected.csv", "scores.csv", "metrics.csv"):
            assert filecmp.cmp(root / f"iter_{k}" / name, other / f"iter_{k}" / name, shallow=False)


def test_rerun_is_bit_identical(full_run, tiny_dataset, tmp_path):
    cfg, _, root = full_run
    run_adaptation(tiny_dataset, cfg, tmp_path / "c")
    assert filecmp.cmp(root / "report.csv", tmp_path / "c" / "report.csv", shallow=False)
    a = load_state(root, tiny_dataset)[0]
    b = load_state(tmp_path / "c", tiny_dataset)[0]
    assert state_dicts_equal(a.detector.net, b.detector.net)


def test_resume_is_idempotent(full_run, tiny_dataset):
    _, _, root = full_run
    a, b = resume(root, tiny_dataset), resume(root, tiny_dataset)
    assert a.iteration == b.iteration == 3
    assert a.history == b.history
    assert [s.id for s in a.training_pool] == [s.id for s in b.training_pool]
    assert all(x == y for x, y in zip(a.training_pool, b.training_pool))
    assert state_dicts_equal(a.discriminator.net, b.discriminator.net)


def test_resume_errors(tmp_path, full_run, tiny_dataset):
    with pytest.raises(ResumeError, match="does not exist"):
        resume(tmp_path / "nothing", tiny_dataset)
    (tmp_path / "empty").mkdir()
    with pytest.raises(ResumeError, match="no complete iteration"):
        resume(tmp_path / "empty", tiny_dataset)
    _, _, root = full_run
    broken = tmp_path / "broken"
    broken.mkdir()
    for name in ("state.json", "selected.csv", "metrics.csv", "detector.ckpt"):
        (broken / "iter_0").mkdir(exist_ok=True)
        (broken / "iter_0" / name).write_bytes((root / "iter_0" / name).read_bytes())
    with pytest.raises(ResumeError, match="discriminator.ckpt"):
        resume(broken, tiny_dataset)


def test_degenerate_loop_is_the_baseline(tiny_dataset):
    no_target = DataSet(
        {k: v for k, v in tiny_dataset.samples.items() if not k.startswith("ut")},
        {**tiny_dataset.manifest, "unlabeled-target": []},
        {k: v for k, v in tiny_dataset.shadow.items() if not k.startswith("ut")},
    )
    rep = run_adaptation(no_target, tiny_config(max_iterations=1))
    assert rep.final is None
    assert rep.adapted == rep.baseline
    assert rep.rows[0]["n_selected"] == 0


def test_fraction_th_u():
    cfg = tiny_config(th_u=0.02)
    assert cfg.selection_count(1000) == 20
    assert cfg.selection_count(10) == 1
    assert tiny_config(th_u=7).selection_count(1000) == 7


@pytest.mark.parametrize("bad", [
    dict(th_u=0), dict(th_u=2.5), dict(max_iterations=0), dict(T=0), dict(th_d=300.0),
    dict(uncertainty_metric="entropy"), dict(dropout=1.0), dict(candidate_subset=0),
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        tiny_config(**bad).validate()


def test_config_dict_round_trip():
    cfg = tiny_config(th_u=0.05, candidate_subset=40)
    assert AdaptationConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ConfigError, match="unknown"):
        AdaptationConfig.from_dict({"bogus": 1})


def test_missing_splits_rejected(tiny_dataset):
    no_labeled = DataSet(
        {k: v for k, v in tiny_dataset.samples.items() if not k.startswith("ls")},
        {**tiny_dataset.manifest, "labeled-source": []},
        tiny_dataset.shadow,
    )
    with pytest.raises(ConfigError, match="labeled-source"):
        check_dataset(no_labeled)
    with pytest.raises(ConfigError, match="labeled-source"):
        run_adaptation(no_labeled, tiny_config())
