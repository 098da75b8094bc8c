"""Synthetic feature-sequence tasks and the VMAP feature-file format.

Three generators exercise the properties the head network is built for:

* ``order``       -- class 1 is the exact time reversal of a class-0 example,
                     so every order-invariant statistic is identical per pair.
* ``noise-frames``-- a class-specific segment hides at a random position among
                     class-independent noise frames.
* ``sparse-event``-- a two-frame spike along a class direction; coarse temporal
                     sampling can miss it.

``complementary`` builds two aligned streams, each informative about half of
the classes, for late-fusion checks.

Generated values are rounded to float32 so that they survive a VMAP round trip
bit for bit.
"""

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from tsm.errors import FormatError
from tsm.mapping import FeatureSequence

TASK_KINDS = ("order", "noise-frames", "sparse-event", "complementary")


@dataclass
class TaskSpec:
    kind: str = "order"
    frames: int = 32
    features: int = 16
    classes: int = 2
    n_train: int = 400
    n_test: int = 200
    noise_sigma: float = 0.1
    amplitude: float = 1.0
    salience: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if min(self.frames, self.features, self.classes, self.n_train, self.n_test) < 1:
            raise ValueError("task sizes must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    def to_dict(self):
        return asdict(self)


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def smooth_walk(rng, n, dim, drift=None, step_sigma=1.0, width=5):
    """Cumulative sum of Gaussian steps, smoothed by a centred moving average."""
    steps = rng.normal(0.0, step_sigma, size=(n, dim))
    if drift is not None:
        steps += drift
    walk = np.cumsum(steps, axis=0)
    if width > 1 and n > 1:
        pad = width // 2
        padded = np.pad(walk, ((pad, pad), (0, 0)), mode="edge")
        kernel = np.ones(width) / width
        walk = np.stack([np.convolve(padded[:, j], kernel, mode="valid") for j in range(dim)], axis=1)
    return walk


def _split_rngs(seed):
    root = np.random.SeedSequence(seed)
    task, train, test = root.spawn(3)
    return np.random.default_rng(task), np.random.default_rng(train), np.random.default_rng(test)


def gen_order_task(spec):
    """Pairs of examples: a drifting smooth trajectory and its time reversal.

    Each trajectory rises along a random nonnegative direction from a random
    nonnegative base, plus noise; class 1 reverses the noisy class-0 rows, so
    the row multisets of a pair are identical.
    """
    if spec.classes != 2:
        raise ValueError("the order task has exactly two classes")
    _, train_rng, test_rng = _split_rngs(spec.seed)
    t, dim = spec.frames, spec.features
    drift = spec.amplitude * 3.0 / t

    def make(rng, count, split):
        out = []
        for pair in range((count + 1) // 2):
            direction = np.abs(rng.normal(size=dim))
            direction /= np.linalg.norm(direction)
            base = np.abs(rng.normal(size=dim))
            path = base + smooth_walk(rng, t, dim, drift=drift * direction, step_sigma=drift / 2)
            path = _f32(path + rng.normal(0.0, spec.noise_sigma, size=path.shape))
            for label, frames in ((0, path), (1, path[::-1].copy())):
                if len(out) < count:
                    out.append(
                        FeatureSequence(frames, label, f"order-{split}-{pair:05d}-{label}", meta={"pair": pair})
                    )
        return out

    return make(train_rng, spec.n_train, "train"), make(test_rng, spec.n_test, "test")


def _class_prototypes(rng, count, length, dim, amplitude):
    protos = []
    for _ in range(count):
        walk = smooth_walk(rng, length, dim, width=3)
        walk -= walk.mean(axis=0)
        walk += rng.normal(size=dim)
        protos.append(amplitude * walk / np.abs(walk).max())
    return protos


def _window_sequences(rng, count, split, tag, labels, protos, spec):
    t, dim = spec.frames, spec.features
    w = -(-t // 4)
    out = []
    for i in range(count):
        label = int(labels[i])
        frames = rng.normal(0.0, 1.0, size=(t, dim))
        start = int(rng.integers(0, t - w + 1))
        frames[start : start + w] = (
            spec.salience + protos[label] + rng.normal(0.0, spec.noise_sigma, size=(w, dim))
        )
        mask = np.zeros(t, dtype=bool)
        mask[start : start + w] = True
        out.append(FeatureSequence(_f32(frames), label, f"{tag}-{split}-{i:05d}", mask=mask))
    return out


def _balanced_labels(rng, count, classes):
    labels = np.arange(count) % classes
    rng.shuffle(labels)
    return labels


def gen_noise_frame_task(spec):
    """Class segment of ``ceil(T/4)`` frames amid unit-variance Gaussian frames.

    The segment holds a per-class prototype trajectory (peak magnitude
    ``amplitude``), a class-independent offset ``salience`` that makes the
    segment stand out, and ``noise_sigma`` noise. Its position is stored as the
    sequence's relevance mask.
    """
    task_rng, train_rng, test_rng = _split_rngs(spec.seed)
    w = -(-spec.frames // 4)
    protos = _class_prototypes(task_rng, spec.classes, w, spec.features, spec.amplitude)
    return tuple(
        _window_sequences(
            rng, n, split, "noise", _balanced_labels(rng, n, spec.classes), protos, spec
        )
        for rng, n, split in ((train_rng, spec.n_train, "train"), (test_rng, spec.n_test, "test"))
    )


def class_blocks(classes, dim):
    """Indicator rows marking a contiguous block of feature columns per class."""
    if classes > dim:
        raise ValueError(f"need features >= classes for disjoint spike blocks ({dim} < {classes})")
    edges = (np.arange(classes + 1) * dim) // classes
    blocks = np.zeros((classes, dim))
    for k in range(classes):
        blocks[k, edges[k] : edges[k + 1]] = 1.0
    return blocks


def gen_sparse_event_task(spec):
    """A two-frame spike of height ``amplitude`` on a class-specific feature block.

    Background frames are a per-sequence static offset (unit variance,
    class-independent) plus ``N(0, noise_sigma^2)`` frame noise. The spike
    height must be at least three frame-noise standard deviations.
    """
    if spec.amplitude < 3 * spec.noise_sigma:
        raise ValueError("spike amplitude must be at least 3x the background sigma")
    if spec.frames < 2:
        raise ValueError("sparse-event task needs at least two frames")
    _, train_rng, test_rng = _split_rngs(spec.seed)
    blocks = class_blocks(spec.classes, spec.features)
    t = spec.frames

    def make(rng, count, split):
        labels = _balanced_labels(rng, count, spec.classes)
        out = []
        for i in range(count):
            offset = rng.normal(0.0, 1.0, size=spec.features)
            frames = offset + rng.normal(0.0, spec.noise_sigma, size=(t, spec.features))
            start = int(rng.integers(0, t - 1))
            frames[start : start + 2] += spec.amplitude * blocks[labels[i]]
            mask = np.zeros(t, dtype=bool)
            mask[start : start + 2] = True
            out.append(
                FeatureSequence(
                    _f32(frames), int(labels[i]), f"event-{split}-{i:05d}", mask=mask, meta={"start": start}
                )
            )
        return out

    return make(train_rng, spec.n_train, "train"), make(test_rng, spec.n_test, "test")


def gen_complementary_task(spec):
    """Two aligned noise-frame streams, each blind to half of the classes.

    Stream ``a`` shows distinct prototypes for the first ``K/2`` classes and one
    shared prototype for the rest; stream ``b`` the other way round. Returns
    ``{"a": (train, test), "b": (train, test)}`` with identical labels and ids.
    """
    k = spec.classes
    if k < 2 or k % 2:
        raise ValueError("the complementary task needs an even number of classes")
    task_rng, train_rng, test_rng = _split_rngs(spec.seed)
    w = -(-spec.frames // 4)
    half = k // 2
    streams = {}
    for name, informative in (("a", range(half)), ("b", range(half, k))):
        distinct = _class_prototypes(task_rng, half + 1, w, spec.features, spec.amplitude)
        shared = distinct[half]
        protos, j = [], 0
        for c in range(k):
            if c in informative:
                protos.append(distinct[j])
                j += 1
            else:
                protos.append(shared)
        streams[name] = protos

    out = {"a": [], "b": []}
    for rng, n, split in ((train_rng, spec.n_train, "train"), (test_rng, spec.n_test, "test")):
        labels = _balanced_labels(rng, n, k)
        seed = int(rng.integers(2**32))
        for name in ("a", "b"):
            stream_rng = np.random.default_rng([seed, ord(name)])
            out[name].append(_window_sequences(stream_rng, n, split, "pair", labels, streams[name], spec))
    return {name: tuple(splits) for name, splits in out.items()}


GENERATORS = {
    "order": gen_order_task,
    "noise-frames": gen_noise_frame_task,
    "sparse-event": gen_sparse_event_task,
}


def generate(spec):
    if spec.kind == "complementary":
        return gen_complementary_task(spec)
    return GENERATORS[spec.kind](spec)


# VMAP files -----------------------------------------------------------------

VMAP_MAGIC = b"VMAP"
VMAP_VERSION = 1
_HEADER = struct.Struct("<4sBIII")


def feature_file_bytes(seq):
    """Encode one sequence: ``VMAP``, u8 version, u32 T, L, label, f32 rows."""
    frames = np.asarray(seq.frames)
    if frames.ndim != 2:
        raise ValueError("only vectorised (T, L) sequences can be written")
    t, dim = frames.shape
    return _HEADER.pack(VMAP_MAGIC, VMAP_VERSION, t, dim, int(seq.label)) + frames.astype("<f4").tobytes()


def parse_feature_file(blob, seq_id=""):
    if len(blob) < 4 or blob[:4] != VMAP_MAGIC:
        raise FormatError("bad magic, expected VMAP", 0)
    if len(blob) < _HEADER.size:
        raise FormatError("truncated header", len(blob))
    _, version, t, dim, label = _HEADER.unpack_from(blob)
    if version != VMAP_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if t < 1 or dim < 1:
        raise FormatError(f"empty map T={t} L={dim}", 5)
    expected = _HEADER.size + 4 * t * dim
    if len(blob) < expected:
        raise FormatError(f"truncated payload: need {expected} bytes for T={t} L={dim}", len(blob))
    if len(blob) > expected:
        raise FormatError(f"payload longer than T={t} x L={dim} floats", expected)
    frames = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).astype(np.float64).reshape(t, dim)
    return FeatureSequence(frames, int(label), seq_id)


def write_feature_file(path, seq):
    with open(path, "wb") as fh:
        fh.write(feature_file_bytes(seq))


def load_feature_file(path):
    path = Path(path)
    return parse_feature_file(path.read_bytes(), path.stem)


# dataset directories ----------------------------------------------------------

MANIFEST = "manifest.txt"


def _mask_string(mask):
    return "-" if mask is None else "".join("1" if m else "0" for m in mask)


def write_dataset(directory, splits, force=False, metadata=None):
    """Write ``{split: [FeatureSequence]}`` as VMAP files plus a manifest.

    Manifest lines are ``relative-path <TAB> split <TAB> mask`` where mask is a
    0/1 string over frames or ``-``.
    """
    directory = Path(directory)
    manifest = directory / MANIFEST
    if manifest.exists() and not force:
        raise FileExistsError(f"{directory} already holds a dataset (use force to overwrite)")
    lines = []
    for split, seqs in splits.items():
        (directory / split).mkdir(parents=True, exist_ok=True)
        for seq in seqs:
            rel = f"{split}/{seq.id}.vmap"
            write_feature_file(directory / rel, seq)
            lines.append(f"{rel}\t{split}\t{_mask_string(seq.mask)}\n")
    manifest.write_text("".join(lines))
    if metadata is not None:
        (directory / "dataset.json").write_text(json.dumps(metadata, sort_keys=True, indent=2) + "\n")
    return manifest


def load_dataset(directory):
    """Read a dataset directory back as ``{split: [FeatureSequence]}``."""
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.exists():
        raise FormatError(f"no {MANIFEST} in {directory}")
    splits = {}
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) not in (2, 3):
            raise FormatError(f"{manifest}:{lineno}: expected path, split[, mask]")
        rel, split = fields[0], fields[1]
        seq = load_feature_file(directory / rel)
        if len(fields) == 3 and fields[2] != "-":
            if len(fields[2]) != seq.length:
                raise FormatError(f"{manifest}:{lineno}: mask length != frame count")
            seq.mask = np.array([c == "1" for c in fields[2]])
        splits.setdefault(split, []).append(seq)
    return splits


def dataset_metadata(directory):
    path = Path(directory) / "dataset.json"
    return json.loads(path.read_text()) if path.exists() else {}


def list_files(directory):
    """Relative paths of every file under ``directory``, sorted."""
    directory = Path(directory)
    return sorted(str(p.relative_to(directory)) for p in directory.rglob("*") if p.is_file())

