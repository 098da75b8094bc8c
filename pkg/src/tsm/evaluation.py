"""Evaluation reports, the mean-pooling baseline, late fusion and density sweeps."""

import csv
from dataclasses import dataclass, field

import numpy as np

from tsm.head import predict_logits
from tsm.mapping import FeatureSequence, VideoMap, build_videomap, resample_temporal, sample_at_density


@dataclass
class EvalReport:
    scores: np.ndarray  # (N, K) logits or fused probabilities
    labels: np.ndarray
    ids: list
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)

    @property
    def classes(self):
        return self.scores.shape[1]

    @property
    def predictions(self):
        return self.scores.argmax(axis=1)

    @property
    def confusion(self):
        """``confusion[true, predicted]`` counts."""
        k = self.classes
        cm = np.zeros((k, k), dtype=np.int64)
        np.add.at(cm, (self.labels, self.predictions), 1)
        return cm

    @property
    def accuracy(self):
        cm = self.confusion
        return float(np.trace(cm) / cm.sum())

    @property
    def per_class_accuracy(self):
        cm = self.confusion
        totals = cm.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(totals > 0, np.diag(cm) / np.maximum(totals, 1), np.nan)


def _as_map(item):
    if isinstance(item, VideoMap):
        return item
    if isinstance(item, FeatureSequence):
        return build_videomap(item)
    return VideoMap(np.asarray(item, dtype=np.float64), -1)


def _ids(items):
    return [getattr(it, "id", None) or getattr(it, "source_id", "") or str(i) for i, it in enumerate(items)]


def score_items(model, items, frames=None):
    """Class scores ``(N, K)`` of ``model`` (a HeadModel or MeanPoolBaseline).

    ``frames`` simulates test-time sampling density: each sequence is first
    subsampled to that many frames.
    """
    if isinstance(model, MeanPoolBaseline):
        return model.scores(items, frames)
    height = model.config.frames
    maps = []
    for item in items:
        vmap = _as_map(item)
        if frames is None:
            maps.append(resample_temporal(vmap, height).matrix)
        else:
            maps.append(sample_at_density(vmap, frames, height).matrix)
    return predict_logits(np.stack(maps), model)


def evaluate(model, dataset, frames=None, **metadata):
    """Argmax-of-scores predictions over ``dataset`` with confusion bookkeeping."""
    items = list(dataset)
    if not items:
        raise ValueError("cannot evaluate an empty dataset")
    labels = [_as_map(it).label for it in items]
    scores = score_items(model, items, frames)
    meta = {"frames": frames, "model": type(model).__name__}
    meta.update(metadata)
    return EvalReport(scores, labels, _ids(items), meta)


class MeanPoolBaseline:
    """Linear softmax classifier on time-averaged frame features.

    Averaging makes the classifier blind to frame order. The average is taken
    over rows sorted per column, so its floating-point value (and hence every
    score) is bitwise independent of the row order.
    """

    def __init__(self, classes, l2=1e-3, iterations=500, lr=0.5):
        self.classes = classes
        self.l2 = l2
        self.iterations = iterations
        self.lr = lr
        self.weights = None
        self.bias = None
        self.center = None
        self.scale = None

    @staticmethod
    def pooled(frames):
        frames = np.asarray(frames, dtype=np.float64)
        return np.sort(frames, axis=0).sum(axis=0) / frames.shape[0]

    def _features(self, items, frames=None):
        rows = []
        for item in items:
            m = _as_map(item).matrix
            if frames is not None:
                m = resample_temporal(m, frames)
            rows.append(self.pooled(m))
        return np.stack(rows)

    def fit(self, items):
        x = self._features(items)
        y = np.array([_as_map(it).label for it in items])
        self.center = x.mean(axis=0)
        self.scale = x.std(axis=0) + 1e-12
        z = (x - self.center) / self.scale
        n, d = z.shape
        onehot = np.eye(self.classes)[y]
        w = np.zeros((d, self.classes))
        b = np.zeros(self.classes)
        for _ in range(self.iterations):
            logits = z @ w + b
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            g = (p - onehot) / n
            w -= self.lr * (z.T @ g + self.l2 * w)
            b -= self.lr * g.sum(axis=0)
        self.weights, self.bias = w, b
        return self

    def scores(self, items, frames=None):
        z = (self._features(items, frames) - self.center) / self.scale
        return z @ self.weights + self.bias


def mean_pool_baseline(train_items, test_items, frames=None, classes=None):
    """Fit the order-invariant baseline on ``train_items``; report on ``test_items``."""
    if classes is None:
        classes = 1 + max(_as_map(it).label for it in list(train_items) + list(test_items))
    baseline = MeanPoolBaseline(classes).fit(list(train_items))
    return evaluate(baseline, test_items, frames), baseline


def softmax(scores):
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def fuse_streams(report_a, report_b, weights=(0.5, 0.5)):
    """Late fusion: weighted sum of per-stream softmax scores."""
    if report_a.scores.shape != report_b.scores.shape:
        raise ValueError(f"stream shapes differ: {report_a.scores.shape} vs {report_b.scores.shape}")
    if list(report_a.ids) != list(report_b.ids) or not np.array_equal(report_a.labels, report_b.labels):
        raise ValueError("streams do not list the same items in the same order")
    wa, wb = weights
    fused = wa * softmax(report_a.scores) + wb * softmax(report_b.scores)
    meta = {"fused": True, "weights": [wa, wb], "frames": report_a.metadata.get("frames")}
    return EvalReport(fused, report_a.labels, list(report_a.ids), meta)


def density_sweep(model, dataset, frame_counts):
    """``[(frames, accuracy), ...]`` with one evaluation per test density."""
    frame_counts = list(frame_counts)
    if not frame_counts:
        raise ValueError("need at least one frame count")
    return [(t, evaluate(model, dataset, t).accuracy) for t in frame_counts]


# report files -----------------------------------------------------------------


def write_report(path, report, config_hash=""):
    """Summary metrics and the confusion matrix as tab-separated text."""
    with open(path, "w") as fh:
        if config_hash:
            fh.write(f"# config {config_hash}\n")
        for key in sorted(report.metadata):
            if report.metadata[key] is None:
                continue
            fh.write(f"# {key} {report.metadata[key]}\n")
        fh.write(f"accuracy\t{report.accuracy!r}\n")
        fh.write(f"items\t{len(report.labels)}\n")
        for k, acc in enumerate(report.per_class_accuracy):
            fh.write(f"class_{k}_accuracy\t{float(acc)!r}\n")
        fh.write("confusion\n")
        fh.write(format_confusion(report.confusion))


def format_confusion(cm):
    return "".join("\t".join(str(int(v)) for v in row) + "\n" for row in cm)


def write_predictions(path, report):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "prediction"] + [f"score_{k}" for k in range(report.classes)])
        for sid, label, pred, row in zip(report.ids, report.labels, report.predictions, report.scores):
            writer.writerow([sid, int(label), int(pred)] + [repr(float(v)) for v in row])


def read_predictions(path, **metadata):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    return EvalReport(
        [[float(v) for v in r[3:]] for r in body],
        [int(r[1]) for r in body],
        [r[0] for r in body],
        dict(metadata),
    )


def write_sweep(path, rows, config_hash="", baseline_rows=None):
    """One row per test density; ``baseline_rows`` adds a second accuracy column."""
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config {config_hash}\n")
        writer = csv.writer(fh)
        header = ["frames", "accuracy"]
        if baseline_rows is not None:
            header.append("baseline_accuracy")
            if [r[0] for r in baseline_rows] != [r[0] for r in rows]:
                raise ValueError("baseline sweep covers different frame counts")
        writer.writerow(header)
        for i, (frames, acc) in enumerate(rows):
            line = [frames, repr(float(acc))]
            if baseline_rows is not None:
                line.append(repr(float(baseline_rows[i][1])))
            writer.writerow(line)


def read_sweep(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    return [(int(r[0]),) + tuple(float(v) for v in r[1:]) for r in rows[1:]]

