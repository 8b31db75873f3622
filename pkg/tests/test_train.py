import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cscae.checkpoint import load_checkpoint
from cscae.data import SynthConfig, label_by_count, synth_generate
from cscae.model import CaeConfig, build_cae, build_classifier_from_cae
from cscae.sparsity import extract_detections
from cscae.tensor import Tensor, parameters_checksum
from cscae.train import (
    PlateauSchedule,
    TrainConfig,
    TrainingDiverged,
    _batches,
    auroc,
    detection_counts,
    evaluate,
    finetune_classifier,
    greedy_match,
    optimal_match,
    precision_recall,
    train,
)


@pytest.fixture(scope="module")
def small_set():
    return synth_generate(SynthConfig(seed=5), 16)


def _checksum(model):
    return parameters_checksum(model.parameters().values())


# -- config and schedule -------------------------------------------------------


def test_train_config_validation():
    assert (TrainConfig().batch_size, TrainConfig().learning_rate, TrainConfig().momentum) == (32, 0.03, 0.9)
    for bad in (dict(batch_size=1), dict(learning_rate=-0.1), dict(epochs=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_plateau_divides_after_patience():
    s = PlateauSchedule(10.0, 3, 0.01)
    lr = 0.03
    for loss in (1.0, 0.5, 0.499, 0.498, 0.497):
        lr = s.step(loss, lr)
    # three epochs without a 1% improvement after 0.5
    assert lr == pytest.approx(0.003)
    assert s.step(0.3, lr) == pytest.approx(0.003)


def test_batches_cover_everything_and_merge_singletons():
    rng = np.random.default_rng(0)
    b = _batches(65, 32, rng)
    assert [len(x) for x in b] == [32, 33]
    assert sorted(np.concatenate(b).tolist()) == list(range(65))
    assert [len(x) for x in _batches(64, 32, rng)] == [32, 32]


# -- training ------------------------------------------------------------------


def test_zero_learning_rate_changes_nothing(small_set):
    m = build_cae(CaeConfig.desk(), 0)
    before = _checksum(m)
    res = train(m, small_set, TrainConfig(batch_size=16, learning_rate=0.0, epochs=1))
    assert _checksum(m) == before
    assert len(res.history) == 1


def test_loss_on_fixed_batch_decreases_over_fifty_steps():
    m = build_cae(CaeConfig.desk(), 0)
    batch = synth_generate(SynthConfig(seed=9), 8)
    res = train(m, batch, TrainConfig(batch_size=8, epochs=50, plateau_patience=100))
    losses = res.losses
    assert len(losses) == 50
    assert np.mean(losses[-5:]) < 0.7 * np.mean(losses[:5])


def test_same_seed_same_checksum(small_set):
    sums = []
    for _ in range(2):
        m = build_cae(CaeConfig.desk(), 4)
        train(m, small_set, TrainConfig(batch_size=8, epochs=1, seed=3))
        sums.append(_checksum(m))
    assert sums[0] == sums[1]


def test_checkpoints_and_metrics_written(tmp_path, small_set):
    m = build_cae(CaeConfig.desk(), 0)
    res = train(m, small_set, TrainConfig(batch_size=8, epochs=2), out_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["epoch_000.ckpt", "epoch_001.ckpt", "epoch_002.ckpt"]
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,lr,t,sparsity" and len(lines) == 3
    assert len(res.checkpoints) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_and_keeps_checkpoints(tmp_path, small_set):
    m = build_cae(CaeConfig.desk(), 0)
    with pytest.raises(TrainingDiverged):
        train(m, small_set, TrainConfig(batch_size=8, epochs=3, learning_rate=1e12), out_dir=tmp_path)
    kept = sorted(p.name for p in tmp_path.glob("*.ckpt"))
    assert kept[0] == "epoch_000.ckpt"
    for name in kept:
        # every retained checkpoint is loadable and finite
        fresh = build_cae(CaeConfig.desk(), 1)
        load_checkpoint(tmp_path / name, fresh)
        assert all(np.all(np.isfinite(p.data)) for p in fresh.parameters().values())


def test_resume_matches_uninterrupted_run(tmp_path, small_set):
    cfg = TrainConfig(batch_size=8, epochs=2, seed=1)
    full = build_cae(CaeConfig.desk(), 2)
    ref = train(full, small_set, cfg, out_dir=tmp_path / "a")
    part = build_cae(CaeConfig.desk(), 2)
    train(part, small_set, TrainConfig(batch_size=8, epochs=1, seed=1), out_dir=tmp_path / "b")
    resumed = build_cae(CaeConfig.desk(), 7)
    res = train(resumed, small_set, cfg, out_dir=tmp_path / "b", resume_from=tmp_path / "b" / "epoch_001.ckpt")
    assert len(res.history) == 2
    assert abs(res.losses[-1] - ref.losses[-1]) <= 0.05 * ref.losses[-1]
    assert _checksum(resumed) == _checksum(full)
    assert len((tmp_path / "b" / "metrics.csv").read_text().splitlines()) == 3


def test_running_threshold_moves_during_training(small_set):
    m = build_cae(CaeConfig.desk(), 0)
    train(m, small_set, TrainConfig(batch_size=8, epochs=1))
    assert m.threshold_state().initialized


# -- matching ------------------------------------------------------------------


def brute_force_matches(dets, gts, radius):
    """Largest one-to-one matching within ``radius`` by exhaustive search."""
    best = 0
    n, m = len(dets), len(gts)
    for k in range(min(n, m), 0, -1):
        for di in itertools.combinations(range(n), k):
            for gj in itertools.permutations(range(m), k):
                if all(math.dist(dets[a], gts[b]) <= radius for a, b in zip(di, gj)):
                    return k
    return best


def test_greedy_counterexample_and_optimal_fix():
    dets = [(0.0, 0.0), (4.5, 0.0)]
    gts = [(1.0, 0.0), (-3.5, 0.0)]
    assert len(greedy_match(dets, gts, 4)) == 1
    assert len(optimal_match(dets, gts, 4)) == 2 == brute_force_matches(dets, gts, 4)


@settings(max_examples=300, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 40), st.integers(0, 40)), max_size=5),
    st.lists(st.tuples(st.floats(0, 40), st.floats(0, 40)), max_size=5),
)
def test_optimal_matcher_equals_brute_force(dets, gts):
    pairs = optimal_match(dets, gts, 4)
    assert len(pairs) == brute_force_matches(dets, gts, 4)
    assert len({i for i, _ in pairs}) == len(pairs) == len({j for _, j in pairs})
    assert all(math.dist(dets[i], gts[j]) <= 4 for i, j in pairs)
    # greedy is a valid matching, never larger than the optimum
    assert len(greedy_match(dets, gts, 4)) <= len(pairs)


def test_match_radius_is_inclusive():
    assert len(optimal_match([(4.0, 0.0)], [(0.0, 0.0)], 4)) == 1
    assert len(optimal_match([(5.0, 0.0)], [(0.0, 0.0)], 4)) == 0
    assert len(greedy_match([(0.0, 4.0)], [(0.0, 0.0)], 4)) == 1


def test_precision_recall_degenerate():
    assert precision_recall(0, 0, 5) == (0.0, 0.0, False)
    assert precision_recall(3, 4, 6) == (0.75, 0.5, True)


def test_perfect_painted_detector_scores_one():
    images = synth_generate(SynthConfig(seed=3, nuclei_per_image=(1, 3)), 50)
    stride = 4
    dets = []
    for im in images:
        d = np.zeros((10, 10))
        for x, y in im.centers:
            d[int(y) // stride, int(x) // stride] = 1.0
        dets.append(extract_detections(d, stride))
    tp, n_det, n_gt = detection_counts(dets, [im.centers for im in images], stride)
    assert precision_recall(tp, n_det, n_gt) == (1.0, 1.0, True)


def test_evaluate_with_suppressed_head_reports_zero_recall():
    m = build_cae(CaeConfig.desk(), 0)
    m.part2.blocks[-1][1].bn.beta.data[:] = -100.0
    rep = evaluate(m, synth_generate(SynthConfig(seed=1, nuclei_per_image=(1, 2)), 6))
    assert rep.detection_recall == 0 and rep.num_detections == 0
    assert rep.detection_precision == 0 and not rep.precision_defined
    assert rep.crosswise_sparsity == 0


def test_evaluate_is_bit_identical_and_restores_mode(small_set):
    m = build_cae(CaeConfig.desk(), 0)
    train(m, small_set, TrainConfig(batch_size=8, epochs=1))
    m.train()
    a = evaluate(m, small_set)
    b = evaluate(m, small_set)
    assert a.to_json() == b.to_json()
    assert m.training
    assert 0 <= a.crosswise_sparsity <= 1 and 0 <= a.detection_recall <= 1


# -- classification ------------------------------------------------------------


def test_auroc_examples():
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auroc([0.0, 0.2, 0.9, 1.0], [0, 0, 1, 1]) == 1.0
    assert auroc([0.5, 0.5], [0, 1]) == 0.5
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [1, 1])


def test_auroc_of_random_scores_is_chance():
    rng = np.random.default_rng(0)
    labels = np.repeat([0, 1], 2000)
    assert abs(auroc(rng.random(4000), labels) - 0.5) <= 0.05


def test_auroc_matches_pairwise_count():
    rng = np.random.default_rng(1)
    s, y = rng.integers(0, 5, 60).astype(float), rng.integers(0, 2, 60)
    pos, neg = s[y == 1], s[y == 0]
    pairs = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    assert auroc(s, y) == pytest.approx(pairs / (len(pos) * len(neg)))


def test_finetune_rejects_single_class():
    images = label_by_count(synth_generate(SynthConfig(seed=0, nuclei_per_image=(0, 0)), 8), 1)
    clf = build_classifier_from_cae(build_cae(CaeConfig.desk(), 0))
    with pytest.raises(ValueError, match="single class"):
        finetune_classifier(clf, images, images, TrainConfig(batch_size=4, epochs=1))


def test_finetune_warmup_freezes_copied_parts():
    images = label_by_count(synth_generate(SynthConfig(seed=0), 16), 2)
    clf = build_classifier_from_cae(build_cae(CaeConfig.desk(), 0))
    copied = {k: v.data.copy() for k, v in clf.parameters().items() if k.startswith(clf.copied_prefixes)}
    new = {k: v.data.copy() for k, v in clf.new_parameters().items()}
    res = finetune_classifier(clf, images, images, TrainConfig(batch_size=8, epochs=1, warmup_epochs=1))
    params = clf.parameters()
    assert all(params[k].data.tobytes() == v.tobytes() for k, v in copied.items())
    assert any(params[k].data.tobytes() != v.tobytes() for k, v in new.items())
    assert len(res.history) == 1 and 0 <= res.auroc <= 1
