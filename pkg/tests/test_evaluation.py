import numpy as np
import pytest
from scipy.stats import binom

from tsm.data import TaskSpec, generate
from tsm.evaluation import (
    EvalReport,
    MeanPoolBaseline,
    density_sweep,
    evaluate,
    format_confusion,
    fuse_streams,
    mean_pool_baseline,
    read_predictions,
    read_sweep,
    softmax,
    write_predictions,
    write_report,
    write_sweep,
)
from tsm.head import HeadConfig
from tsm.mapping import VideoMap, build_videomap
from tsm.training import init_parameters


def report(scores, labels):
    return EvalReport(np.array(scores, dtype=float), labels, [f"i{k}" for k in range(len(labels))])


def test_confusion_bookkeeping():
    r = report([[2, 1], [0, 3], [5, 1], [1, 0]], [0, 1, 1, 1])
    np.testing.assert_array_equal(r.confusion, [[1, 0], [2, 1]])
    assert r.confusion.sum() == 4
    assert r.accuracy == 0.5
    np.testing.assert_allclose(r.per_class_accuracy, [1.0, 1 / 3])
    assert format_confusion(r.confusion) == "1\t0\n2\t1\n"


def test_empty_dataset_is_an_error():
    model = init_parameters(HeadConfig(frames=8, features=4, widths=(2, 2, 2), attention="none"))
    with pytest.raises(ValueError):
        evaluate(model, [])


def test_untrained_model_is_near_chance():
    rng = np.random.default_rng(0)
    cfg = HeadConfig(frames=8, features=4, classes=2, widths=(2, 4, 4), attention_widths=(2, 2))
    model = init_parameters(cfg, zero_output=False)
    # labels are independent of the maps, so accuracy is Binomial(1000, 1/2) / 1000
    items = [VideoMap(rng.normal(size=(8, 4)), int(rng.integers(2))) for _ in range(1000)]
    acc = evaluate(model, items).accuracy
    lo, hi = binom.ppf([1e-6, 1 - 1e-6], 1000, 0.5) / 1000
    assert 0.4 <= lo <= acc <= hi <= 0.6


def test_separable_items_give_diagonal_confusion():
    # block means differ by class; the baseline separates them perfectly
    items = [VideoMap(np.full((6, 3), float(k)) + 0.01 * i, k) for k in range(3) for i in range(5)]
    rep, _ = mean_pool_baseline(items, items)
    assert rep.accuracy == 1.0
    np.testing.assert_array_equal(rep.confusion, np.diag([5, 5, 5]))


def test_baseline_predictions_are_permutation_invariant_bitwise():
    train, test = generate(TaskSpec("noise-frames", frames=16, features=8, classes=3, n_train=60, n_test=30, salience=2.0, amplitude=2.0, noise_sigma=0.5))
    _, baseline = mean_pool_baseline(train, test)
    rng = np.random.default_rng(1)
    shuffled = [VideoMap(build_videomap(s).matrix[rng.permutation(16)], s.label) for s in test]
    a, b = baseline.scores(test), baseline.scores(shuffled)
    assert a.tobytes() == b.tobytes()


def test_baseline_pooling_is_exact_mean_up_to_rounding():
    x = np.random.default_rng(2).normal(size=(7, 4))
    np.testing.assert_allclose(MeanPoolBaseline.pooled(x), x.mean(axis=0), rtol=1e-14)


def test_baseline_beats_nearest_centroid_floor_on_strong_signal():
    spec = TaskSpec("noise-frames", frames=32, features=16, classes=4, n_train=400, n_test=200, noise_sigma=0.5, amplitude=2.0, salience=2.0)
    train, test = generate(spec)
    rep, _ = mean_pool_baseline(train, test)
    # independent oracle: nearest class centroid of time-averaged features
    x_tr = np.stack([s.frames.mean(axis=0) for s in train])
    y_tr = np.array([s.label for s in train])
    centroids = np.stack([x_tr[y_tr == k].mean(axis=0) for k in range(4)])
    x_te = np.stack([s.frames.mean(axis=0) for s in test])
    pred = np.argmin(((x_te[:, None] - centroids[None]) ** 2).sum(-1), axis=1)
    oracle = np.mean(pred == [s.label for s in test])
    assert rep.accuracy >= 0.8
    assert rep.accuracy >= oracle - 0.05


def test_fusion_with_unit_weight_reproduces_stream_a():
    a = report([[2.0, 1.0], [0.0, 3.0], [1.0, 1.5]], [0, 1, 0])
    b = report([[0.0, 9.0], [9.0, 0.0], [9.0, 0.0]], [0, 1, 0])
    fused = fuse_streams(a, b, (1.0, 0.0))
    np.testing.assert_array_equal(fused.predictions, a.predictions)
    np.testing.assert_allclose(fused.scores, softmax(a.scores))
    assert fused.accuracy == a.accuracy


@pytest.mark.parametrize("weights", [(0.5, 0.5), (0.2, 3.0)])
def test_fusing_a_stream_with_itself_keeps_predictions(weights):
    a = report(np.random.default_rng(3).normal(size=(20, 4)), list(range(4)) * 5)
    np.testing.assert_array_equal(fuse_streams(a, a, weights).predictions, a.predictions)


def test_fusion_rejects_mismatched_items():
    a = report([[1, 0], [0, 1]], [0, 1])
    b = report([[1, 0], [0, 1]], [1, 0])
    with pytest.raises(ValueError):
        fuse_streams(a, b)
    with pytest.raises(ValueError):
        fuse_streams(a, report([[1, 0, 0]], [0]))


def test_sweep_at_native_density_equals_evaluate():
    cfg = HeadConfig(frames=8, features=4, classes=2, widths=(2, 4, 4), attention_widths=(2, 2))
    model = init_parameters(cfg, zero_output=False)
    items = [VideoMap(np.random.default_rng(i).normal(size=(8, 4)), i % 2) for i in range(20)]
    assert density_sweep(model, items, [8]) == [(8, evaluate(model, items).accuracy)]
    assert len(density_sweep(model, items, [2, 4, 8])) == 3
    with pytest.raises(ValueError):
        density_sweep(model, items, [])


def test_report_files(tmp_path):
    r = report([[2, 1], [0, 3]], [0, 1])
    write_report(tmp_path / "r.tsv", r, "abc123")
    text = (tmp_path / "r.tsv").read_text()
    assert text.startswith("# config abc123\n") and "accuracy\t1.0\n" in text
    write_predictions(tmp_path / "p.csv", r)
    back = read_predictions(tmp_path / "p.csv")
    assert back.scores.tobytes() == r.scores.tobytes() and back.ids == r.ids
    write_sweep(tmp_path / "s.csv", [(8, 0.5), (16, 0.75)], "abc123", [(8, 0.3), (16, 0.3)])
    assert read_sweep(tmp_path / "s.csv") == [(8, 0.5, 0.3), (16, 0.75, 0.3)]
