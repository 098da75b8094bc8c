"""Mini-batch SGD for the head network with a step-decay learning rate."""

import csv
import logging
from dataclasses import asdict, dataclass

import numpy as np

from tsm.errors import DimensionError, TrainingError
from tsm.head import HeadModel
from tsm.tensor import softmax_cross_entropy

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "iteration", "lr", "loss", "accuracy")


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    decay_factor: float = 10.0
    decay_interval: int = 500
    batch_size: int = 32
    max_epochs: int = 30
    momentum: float = 0.9
    weight_decay: float = 0.0
    warmup_iterations: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.base_lr <= 0 or self.decay_interval < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("learning rate, decay interval, batch size and epochs must be positive")
        if self.decay_factor <= 1:
            raise ValueError("decay_factor must exceed 1")
        if self.warmup_iterations < 0:
            raise ValueError("warmup_iterations must be >= 0")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("momentum must lie in [0, 1) and weight_decay be >= 0")

    def to_dict(self):
        return asdict(self)


def fan_in(name, shape):
    if len(shape) == 4:
        return shape[0] * shape[1] * shape[2]
    return shape[0]


OUTPUT_LAYERS = ("fc.w", "att_fc.w")


def init_parameters(config, seed=None, zero_output=True):
    """He-normal weights (std ``sqrt(2 / fan_in)``) and zero biases.

    With ``zero_output`` the classifier and attention output layers start at
    zero: logits start uniform and every gate at 0.5. Weights are drawn in
    parameter order either way, so the hidden layers do not depend on it.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    params = {}
    for name, shape in config.parameter_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
            continue
        params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in(name, shape)), size=shape)
        if zero_output and name in OUTPUT_LAYERS:
            params[name][...] = 0.0
    return HeadModel(config, params)


def lr_at(iteration, cfg):
    """``base_lr / decay_factor ** floor(iteration / decay_interval)``.

    During the first ``warmup_iterations`` steps (none by default) the rate
    ramps linearly up to that value. The ramp guards against early overshoot
    driving every attention gate towards zero, after which the head stops
    learning.
    """
    lr = cfg.base_lr / cfg.decay_factor ** (iteration // cfg.decay_interval)
    if iteration < cfg.warmup_iterations:
        lr *= (iteration + 1) / cfg.warmup_iterations
    return lr


def _param_dict(model):
    return model.params if isinstance(model, HeadModel) else model


def sgd_step(model, grads, lr, velocity, momentum=0.9, weight_decay=0.0):
    """Momentum SGD in place: ``v <- mu v - lr g``, ``theta <- theta + v``.

    ``model`` is a HeadModel or a dict of tensors; ``velocity`` is a dict of
    arrays, filled lazily with zeros.
    """
    params = _param_dict(model)
    for name, p in params.items():
        g = grads[name]
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise DimensionError(f"{name}: gradient shape {g.shape} != parameter {p.shape}")
        if weight_decay:
            g = g + weight_decay * p.data
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = momentum * v - lr * g
        velocity[name] = v
        p.data = p.data + v
    return model


def stack_dataset(dataset):
    """Turn a list of VideoMaps into ``(maps, labels)`` arrays."""
    if isinstance(dataset, tuple):
        maps, labels = dataset
        return np.asarray(maps, dtype=np.float64), np.asarray(labels, dtype=np.int64)
    if not dataset:
        raise ValueError("dataset is empty")
    shapes = {vm.matrix.shape for vm in dataset}
    if len(shapes) != 1:
        raise DimensionError(f"inconsistent VideoMap shapes: {sorted(shapes)}")
    return np.stack([vm.matrix for vm in dataset]), np.array([vm.label for vm in dataset])


def train(dataset, cfg, model_config=None, model=None, state=None, velocity=None):
    """Fit a head model; returns ``(model, log_rows, state, velocity)``.

    Pass ``model``/``state``/``velocity`` from a checkpoint to resume. The run
    is fully determined by ``cfg.seed``, the model seed and the data.
    """
    maps, labels = stack_dataset(dataset)
    if len(maps) == 0:
        raise ValueError("dataset is empty")
    if model is None:
        model = init_parameters(model_config)
    if labels.min() < 0 or labels.max() >= model.config.classes:
        raise ValueError("labels exceed the configured class count")
    mc = model.config
    if maps.shape[1:] != (mc.frames, mc.features):
        raise DimensionError(f"maps {maps.shape[1:]} do not match model {(mc.frames, mc.features)}")

    state = dict(state or {})
    velocity = dict(velocity or {})
    iteration = int(state.get("iteration", 0))
    first_epoch = int(state.get("epoch", 0))
    rows = []
    n = len(maps)
    for epoch in range(first_epoch, cfg.max_epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        total_loss, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            lr = lr_at(iteration, cfg)
            logits = model(maps[idx], train=True, rng=rng)
            loss = softmax_cross_entropy(logits, labels[idx])
            if not (loss.is_finite() and logits.is_finite()):
                raise TrainingError("loss is not finite", iteration)
            model.zero_grad()
            loss.backward()
            grads = {name: p.grad for name, p in model.params.items()}
            sgd_step(model, grads, lr, velocity, cfg.momentum, cfg.weight_decay)
            iteration += 1
            total_loss += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
        row = {
            "epoch": epoch + 1,
            "iteration": iteration,
            "lr": lr,
            "loss": total_loss / n,
            "accuracy": correct / n,
        }
        rows.append(row)
        log.debug("epoch %(epoch)d iter %(iteration)d lr %(lr).2g loss %(loss).4f acc %(accuracy).3f", row)
    model.zero_grad()
    state = {"iteration": iteration, "epoch": max(first_epoch, cfg.max_epochs)}
    return model, rows, state, velocity


def write_log(path, rows, header_comment=None):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(float(row[k])) if k in ("lr", "loss", "accuracy") else row[k]) for k in LOG_COLUMNS})


def read_log(path):
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return [
        {k: (int(v) if k in ("epoch", "iteration") else float(v)) for k, v in row.items()}
        for row in csv.DictReader(lines)
    ]

