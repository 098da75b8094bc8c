import math

import numpy as np
import pytest

from tsm.data import TaskSpec, generate
from tsm.errors import DimensionError, TrainingError
from tsm.head import HeadConfig, checkpoint_bytes
from tsm.mapping import build_videomap
from tsm.tensor import Tensor
from tsm.training import (
    TrainConfig,
    init_parameters,
    lr_at,
    read_log,
    sgd_step,
    stack_dataset,
    train,
    write_log,
)

MODEL = HeadConfig(frames=16, features=8, classes=2, widths=(4, 8, 8), attention_widths=(4, 4))


def tiny_dataset(n=32, seed=0):
    train_seqs, _ = generate(TaskSpec("order", frames=16, features=8, n_train=n, n_test=2, seed=seed))
    return [build_videomap(s) for s in train_seqs]


def test_step_decay_schedule():
    cfg = TrainConfig(base_lr=0.1, decay_factor=10, decay_interval=100)
    assert lr_at(0, cfg) == 0.1
    assert lr_at(99, cfg) == 0.1
    assert lr_at(100, cfg) == pytest.approx(0.01)
    assert lr_at(250, cfg) == pytest.approx(0.001)


def test_warmup_ramps_linearly():
    cfg = TrainConfig(base_lr=0.1, decay_interval=100, warmup_iterations=4)
    assert [lr_at(i, cfg) for i in range(5)] == pytest.approx([0.025, 0.05, 0.075, 0.1, 0.1])
    assert lr_at(100, cfg) == pytest.approx(0.01)


@pytest.mark.parametrize(
    "kwargs", [dict(warmup_iterations=-1), dict(base_lr=0), dict(decay_factor=1), dict(batch_size=0), dict(momentum=1.0), dict(max_epochs=0)]
)
def test_invalid_train_config(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_single_sgd_step_by_hand():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    velocity = {}
    sgd_step(p, {"w": np.array([0.5, 1.0])}, lr=0.1, velocity=velocity, momentum=0.9)
    np.testing.assert_allclose(p["w"].data, [0.95, -2.1])
    sgd_step(p, {"w": np.array([0.5, 1.0])}, lr=0.1, velocity=velocity, momentum=0.9)
    # v = 0.9 * (-0.05, -0.1) - 0.1 * (0.5, 1.0)
    np.testing.assert_allclose(p["w"].data, [0.95 - 0.095, -2.1 - 0.19])


def test_zero_lr_leaves_parameters_unchanged():
    model = init_parameters(MODEL, zero_output=False)
    before = {n: model[n].data.copy() for n in model.names()}
    grads = {n: np.ones(model[n].shape) for n in model.names()}
    sgd_step(model, grads, lr=0.0, velocity={}, momentum=0.9)
    for n in model.names():
        assert np.array_equal(model[n].data, before[n])


def test_sgd_shape_mismatch():
    p = {"w": Tensor(np.zeros(2), requires_grad=True)}
    with pytest.raises(DimensionError):
        sgd_step(p, {"w": np.zeros(3)}, 0.1, {})


def test_init_is_he_normal_with_zero_outputs():
    cfg = HeadConfig(frames=64, features=16, widths=(16, 32, 32))
    model = init_parameters(cfg)
    w = model["conv2.w"].data
    assert w.std() == pytest.approx(math.sqrt(2 / (5 * 5 * 16)), rel=0.05)
    assert not model["fc.w"].data.any() and not model["att_fc.w"].data.any()
    assert not model["conv1.b"].data.any()
    hidden = init_parameters(cfg, zero_output=False)
    np.testing.assert_array_equal(hidden["conv3.w"].data, model["conv3.w"].data)


def test_training_reduces_loss_and_logs_every_epoch():
    cfg = TrainConfig(batch_size=8, max_epochs=4, seed=1)
    model, rows, state, _ = train(tiny_dataset(), cfg, MODEL)
    assert [r["epoch"] for r in rows] == [1, 2, 3, 4]
    assert rows[-1]["loss"] < rows[0]["loss"]
    assert state == {"iteration": 16, "epoch": 4}
    assert [r["iteration"] for r in rows] == [4, 8, 12, 16]


def test_training_is_deterministic():
    cfg = TrainConfig(batch_size=8, max_epochs=2, seed=3)
    a = train(tiny_dataset(), cfg, MODEL)
    b = train(tiny_dataset(), cfg, MODEL)
    assert checkpoint_bytes(a[0], a[2]) == checkpoint_bytes(b[0], b[2])


def test_resume_equals_uninterrupted_run():
    data = tiny_dataset()
    full = train(data, TrainConfig(batch_size=8, max_epochs=4), MODEL)
    model, rows1, state, velocity = train(data, TrainConfig(batch_size=8, max_epochs=2), MODEL)
    model, rows2, state, _ = train(data, TrainConfig(batch_size=8, max_epochs=4), model=model, state=state, velocity=velocity)
    assert rows2[0]["iteration"] > rows1[-1]["iteration"]
    assert state == full[2]
    for n in model.names():
        assert np.array_equal(model[n].data, full[0][n].data)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_raises_training_error():
    data = tiny_dataset()
    data[0].matrix[3, 2] = np.nan
    with pytest.raises(TrainingError, match="iteration"):
        train(data, TrainConfig(batch_size=64, max_epochs=1), MODEL)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_infinite_logits_are_caught():
    model = init_parameters(MODEL)
    model["fc.b"].data[:] = np.inf
    with pytest.raises(TrainingError, match="iteration 0"):
        train(tiny_dataset(), TrainConfig(batch_size=8, max_epochs=1), model=model)


def test_shape_and_label_checks():
    data = tiny_dataset()
    with pytest.raises(DimensionError):
        train(data, TrainConfig(max_epochs=1), HeadConfig(frames=8, features=8, widths=(4, 8, 8)))
    with pytest.raises(ValueError):
        train(data, TrainConfig(max_epochs=1), HeadConfig(frames=16, features=8, classes=1, widths=(4, 8, 8)))
    with pytest.raises(ValueError):
        stack_dataset([])


def test_log_round_trip(tmp_path):
    rows = [{"epoch": 1, "iteration": 4, "lr": 0.01, "loss": 0.69, "accuracy": 0.5}]
    write_log(tmp_path / "log.csv", rows, "config abc")
    assert (tmp_path / "log.csv").read_text().startswith("# config abc\n")
    assert read_log(tmp_path / "log.csv") == rows


def test_paper_schedule_values():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 0.01
    assert lr_at(cfg.decay_interval, cfg) == pytest.approx(0.001)
    assert lr_at(2 * cfg.decay_interval - 1, cfg) == pytest.approx(0.001)


def test_same_seed_gives_identical_parameters_and_zero_biases():
    a, b = init_parameters(MODEL, seed=3), init_parameters(MODEL, seed=3)
    for n in a.names():
        assert a[n].data.tobytes() == b[n].data.tobytes()
        if n.endswith(".b"):
            assert not a[n].data.any()


def test_sgd_worked_cases():
    p = {"w": Tensor(np.array([1.0]), requires_grad=True)}
    sgd_step(p, {"w": np.array([0.5])}, lr=0.1, velocity={}, momentum=0.0)
    assert p["w"].data.tolist() == [0.95]
    before = p["w"].data.copy()
    sgd_step(p, {"w": np.zeros(1)}, lr=0.1, velocity={}, momentum=0.9)
    assert p["w"].data.tobytes() == before.tobytes()


def test_sgd_minimises_a_quadratic():
    # f(w) = (w - 3)^2, minimum at 3
    p = {"w": Tensor(np.array([-4.0]), requires_grad=True)}
    velocity = {}
    for _ in range(1000):
        sgd_step(p, {"w": 2 * (p["w"].data - 3.0)}, lr=0.05, velocity=velocity, momentum=0.9)
    assert abs(p["w"].data[0] - 3.0) < 1e-6


def test_memorises_a_single_example():
    from tsm.mapping import VideoMap

    item = [VideoMap(np.random.default_rng(0).normal(size=(16, 8)), 1)]
    cfg = TrainConfig(batch_size=1, max_epochs=200, decay_interval=10**6)
    _, rows, _, _ = train(item, cfg, MODEL)
    assert rows[-1]["loss"] < 1e-3


def test_constant_versus_ramp_rows_reach_full_train_accuracy():
    from tsm.mapping import VideoMap

    rng = np.random.default_rng(1)
    items = []
    for i in range(32):
        level = rng.normal(size=4)
        ramp = np.linspace(-1, 1, 16)[:, None] * rng.uniform(0.5, 1.5, size=4)
        items.append(VideoMap(np.tile(level, (16, 1)), 0))
        items.append(VideoMap(level + ramp, 1))
    cfg = HeadConfig(frames=16, features=4, classes=2, widths=(4, 8, 8), attention_widths=(4, 4))
    model, rows, _, _ = train(items, TrainConfig(batch_size=8, max_epochs=30, decay_interval=10**6, seed=1), cfg)
    from tsm.evaluation import evaluate

    assert evaluate(model, items).accuracy == 1.0


def test_frozen_seed_gives_identical_final_loss():
    cfg = TrainConfig(batch_size=8, max_epochs=2, seed=4)
    assert train(tiny_dataset(), cfg, MODEL)[1][-1]["loss"] == train(tiny_dataset(), cfg, MODEL)[1][-1]["loss"]
