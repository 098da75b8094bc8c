"""Head ConvNet over VideoMaps with hierarchical temporal attention.

Layout of one forward pass (temporal extents for an input of height T)::

    map (T)  -- x a0 -->  block1 (T/2) -- x a1 -->  block2 (T/4) -- x a2 -->
    block3 (T/8) -> flatten -> fully connected -> logits

Each block is conv 5x5 ("same") -> ReLU -> max pool 3x3 / stride 2. The
attention branch runs two such blocks on the map and a fully connected layer
with a sigmoid, giving one gate per frame; coarser gates are stride-2 max
pools of the finer ones so every gate vector matches the temporal extent of
the features it multiplies. All divisions above round up.
"""

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from tsm.errors import DimensionError, FormatError
from tsm.tensor import (
    Tensor,
    broadcast_multiply,
    conv2d,
    dropout,
    fully_connected,
    maxpool2d,
    no_grad,
    relu,
    sigmoid,
)

ATTENTION_VARIANTS = {
    "none": (),
    "a0": (0,),
    "a12": (1, 2),
    "a012": (0, 1, 2),
}

POOL_KERNEL = (3, 3)
POOL_STRIDE = (2, 2)
# one row of -inf padding each side makes the pooled extent ceil(n / 2)
POOL_PADDING = (1, 1)


def halve(n):
    return -(-n // 2)


@dataclass
class HeadConfig:
    frames: int = 64
    features: int = 16
    classes: int = 2
    widths: tuple = (16, 32, 32)
    attention_widths: tuple = (8, 8)
    attention: str = "a012"
    kernel: int = 5
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.attention_widths = tuple(int(w) for w in self.attention_widths)
        if self.attention not in ATTENTION_VARIANTS:
            raise ValueError(
                f"attention must be one of {sorted(ATTENTION_VARIANTS)}, got {self.attention!r}"
            )
        if len(self.widths) != 3 or len(self.attention_widths) != 2:
            raise ValueError("need three head widths and two attention widths")
        if min(self.frames, self.features, self.classes, self.kernel, *self.widths) < 1:
            raise ValueError("model dimensions must be positive")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")

    @property
    def levels(self):
        return ATTENTION_VARIANTS[self.attention]

    def extents(self):
        """Temporal and feature extents at the input and after each block."""
        t, l = [self.frames], [self.features]
        for _ in range(3):
            t.append(halve(t[-1]))
            l.append(halve(l[-1]))
        return t, l

    def parameter_shapes(self):
        k = self.kernel
        t, l = self.extents()
        c1, c2, c3 = self.widths
        shapes = {
            "conv1.w": (k, k, 1, c1),
            "conv1.b": (c1,),
            "conv2.w": (k, k, c1, c2),
            "conv2.b": (c2,),
            "conv3.w": (k, k, c2, c3),
            "conv3.b": (c3,),
            "fc.w": (t[3] * l[3] * c3, self.classes),
            "fc.b": (self.classes,),
        }
        if self.levels:
            a1, a2 = self.attention_widths
            shapes.update(
                {
                    "att_conv1.w": (k, k, 1, a1),
                    "att_conv1.b": (a1,),
                    "att_conv2.w": (k, k, a1, a2),
                    "att_conv2.b": (a2,),
                    "att_fc.w": (t[2] * l[2] * a2, self.frames),
                    "att_fc.b": (self.frames,),
                }
            )
        return shapes

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["attention_widths"] = list(self.attention_widths)
        return d


class HeadModel:
    def __init__(self, config, params):
        self.config = config
        expected = config.parameter_shapes()
        if set(params) != set(expected):
            raise DimensionError(
                f"parameter names {sorted(params)} do not match config {sorted(expected)}"
            )
        self.params = {}
        for name, shape in expected.items():
            value = params[name]
            value = value.data if isinstance(value, Tensor) else value
            value = np.array(value, dtype=np.float64)
            if value.shape != shape:
                raise DimensionError(f"{name}: shape {value.shape}, expected {shape}")
            self.params[name] = Tensor(value, requires_grad=True)

    def __getitem__(self, name):
        return self.params[name]

    def names(self):
        return list(self.params)

    def num_parameters(self):
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def copy(self):
        return HeadModel(self.config, {n: p.data.copy() for n, p in self.params.items()})

    def state_dict(self):
        return {n: p.data for n, p in self.params.items()}

    def __call__(self, maps, **kwargs):
        return head_forward(maps, self, **kwargs)


def _block(x, model, prefix):
    x = relu(conv2d(x, model[prefix + ".w"], model[prefix + ".b"], padding="same"))
    return maxpool2d(x, POOL_KERNEL, POOL_STRIDE, padding=POOL_PADDING)


def _as_batch(maps, model):
    data = maps.data if isinstance(maps, Tensor) else np.asarray(maps, dtype=np.float64)
    squeeze = data.ndim == 2
    if squeeze:
        data = data[None]
    if data.ndim != 3:
        raise DimensionError(f"input: expected (T, L) or (N, T, L), got {data.shape}")
    cfg = model.config
    if data.shape[1:] != (cfg.frames, cfg.features):
        raise DimensionError(
            f"input: map shape {data.shape[1:]} != trained shape {(cfg.frames, cfg.features)}"
        )
    if isinstance(maps, Tensor):
        return maps.reshape(data.shape + (1,)), squeeze
    return Tensor(data[..., None]), squeeze


def attention_vector(maps, model):
    """Frame gates a0 in (0, 1), shape ``(N, T)`` (or ``(T,)`` for one map)."""
    if not model.config.levels:
        raise ValueError("model has no attention branch")
    x, squeeze = _as_batch(maps, model)
    x = _block(x, model, "att_conv1")
    x = _block(x, model, "att_conv2")
    n = x.shape[0]
    a0 = sigmoid(fully_connected(x.reshape(n, -1), model["att_fc.w"], model["att_fc.b"]))
    return a0.reshape(model.config.frames) if squeeze else a0


def downsample_attention(a):
    """Stride-2 max pool of gate vectors; a lone trailing entry passes through.

    Accepts ``(n,)`` or ``(N, n)`` and returns length ``ceil(n / 2)``.
    """
    t = a if isinstance(a, Tensor) else Tensor(a)
    if t.ndim not in (1, 2) or t.shape[-1] < 1:
        raise DimensionError(f"attention vector must be non-empty (n,) or (N, n), got {t.shape}")
    single = t.ndim == 1
    rows = 1 if single else t.shape[0]
    n = t.shape[-1]
    pooled = maxpool2d(t.reshape(rows, n, 1, 1), (2, 1), (2, 1), ceil_mode=True)
    out = pooled.reshape(halve(n)) if single else pooled.reshape(rows, halve(n))
    return out if isinstance(a, Tensor) else out.data


def apply_attention(features, a):
    """Scale every temporal row ``t`` of ``features`` by ``a[t]``.

    ``features`` is ``(T, L)``, ``(T, L, C)`` or batched ``(N, T, L, C)``;
    ``a`` is ``(T,)`` or ``(N, T)`` to match.
    """
    f = features if isinstance(features, Tensor) else Tensor(features)
    g = a if isinstance(a, Tensor) else Tensor(a)
    t_axis = 1 if f.ndim == 4 else 0
    if g.shape[-1] != f.shape[t_axis]:
        raise DimensionError(
            f"attention length {g.shape[-1]} != temporal extent {f.shape[t_axis]}"
        )
    shape = list(g.shape) + [1] * (f.ndim - g.ndim)
    return broadcast_multiply(f, g.reshape(tuple(shape)))


def head_forward(maps, model, attention=None, train=False, rng=None, capture=None):
    """Class logits for one map ``(T, L)`` or a batch ``(N, T, L)``.

    ``attention`` overrides the learned a0 with a fixed gate vector, which is
    then used at every enabled level. ``capture``, if a dict, receives the
    gate vectors and the block-3 convolution activations.
    """
    cfg = model.config
    x, squeeze = _as_batch(maps, model)
    n = x.shape[0]
    levels = cfg.levels
    gates = [None, None, None]
    if levels:
        if attention is None:
            a0 = attention_vector(x.reshape(n, cfg.frames, cfg.features), model)
        else:
            a0 = attention if isinstance(attention, Tensor) else Tensor(attention)
            if a0.ndim == 1:
                a0 = Tensor(np.broadcast_to(a0.data, (n, a0.shape[0])))
            if a0.shape != (n, cfg.frames):
                raise DimensionError(f"attention: override shape {a0.shape} != {(n, cfg.frames)}")
        gates[0] = a0
        gates[1] = downsample_attention(a0)
        gates[2] = downsample_attention(gates[1])

    stages = ("conv1", "conv2", "conv3")
    for i, prefix in enumerate(stages):
        if i in levels:
            x = apply_attention(x, gates[i])
        if prefix == "conv3" and capture is not None:
            act = relu(conv2d(x, model["conv3.w"], model["conv3.b"], padding="same"))
            capture["conv3"] = act
            x = maxpool2d(act, POOL_KERNEL, POOL_STRIDE, padding=POOL_PADDING)
        else:
            x = _block(x, model, prefix)
    if capture is not None:
        capture["gates"] = gates

    flat = x.reshape(n, -1)
    if train and cfg.dropout > 0:
        flat = dropout(flat, cfg.dropout, rng if rng is not None else np.random.default_rng(cfg.seed))
    logits = fully_connected(flat, model["fc.w"], model["fc.b"])
    return logits.reshape(cfg.classes) if squeeze else logits


def predict_logits(maps, model, batch_size=256):
    """Inference-only logits ``(N, K)`` for an array of maps ``(N, T, L)``."""
    maps = np.asarray(maps, dtype=np.float64)
    out = []
    with no_grad():
        for start in range(0, len(maps), batch_size):
            out.append(head_forward(maps[start : start + batch_size], model).data)
    return np.concatenate(out) if out else np.zeros((0, model.config.classes))


def gate_vectors(maps, model, batch_size=256):
    """Learned a0 gates ``(N, T)`` for an array of maps."""
    maps = np.asarray(maps, dtype=np.float64)
    with no_grad():
        return np.concatenate(
            [attention_vector(maps[s : s + batch_size], model).data for s in range(0, len(maps), batch_size)]
        )


def temporal_response_map(vmap, model, class_index):
    """Grad-CAM over time at the block-3 convolution.

    Returns ``(coarse, upsampled)``: the nonnegative response per block-3 row
    (length ``ceil(T / 4)``) and the same stretched to ``T`` by nearest index.
    """
    cfg = model.config
    if not 0 <= class_index < cfg.classes:
        raise IndexError(f"class {class_index} out of range for {cfg.classes} classes")
    data = vmap.matrix if hasattr(vmap, "matrix") else np.asarray(vmap, dtype=np.float64)
    capture = {}
    logits = head_forward(data[None], model, capture=capture)
    act = capture["conv3"]
    seed = np.zeros(logits.shape)
    seed[0, class_index] = 1.0
    logits.backward(seed)
    grads = act.grad[0]
    model.zero_grad()

    weights = grads.mean(axis=(0, 1))
    cam = np.maximum((act.data[0] * weights).sum(axis=-1), 0.0)
    coarse = cam.mean(axis=1)
    idx = (np.arange(cfg.frames) * len(coarse)) // cfg.frames
    return coarse, coarse[idx]


# checkpoint container -------------------------------------------------------

CHECKPOINT_MAGIC = b"TSMC"
CHECKPOINT_VERSION = 1


def _canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(model, state=None, extra=None):
    """Serialise a model.

    Layout (little-endian): magic ``TSMC``, u8 version, u32-length JSON config,
    u32-length JSON training state, u32 tensor count, then per tensor a
    u16-length UTF-8 name, u8 rank, u32 extents and row-major float64 values.
    ``extra`` holds additional named arrays (optimizer buffers).
    """
    tensors = [(n, p.data) for n, p in model.params.items()]
    for name in sorted(extra or {}):
        tensors.append((name, np.asarray(extra[name], dtype=np.float64)))
    parts = [CHECKPOINT_MAGIC, struct.pack("<B", CHECKPOINT_VERSION)]
    for blob in (_canonical_json(model.config.to_dict()), _canonical_json(state or {})):
        parts += [struct.pack("<I", len(blob)), blob]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim)]
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def parse_checkpoint(blob):
    """Inverse of :func:`checkpoint_bytes`: returns ``(model, state, extra)``."""
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated checkpoint while reading {what}", pos)
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("not a head-model checkpoint", 0)
    (version,) = struct.unpack("<B", take(1, "version"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    blocks = []
    for what in ("config", "state"):
        (n,) = struct.unpack("<I", take(4, what + " length"))
        start = pos
        try:
            blocks.append(json.loads(take(n, what).decode("utf-8")))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise FormatError(f"malformed {what} block", start) from None
    config_dict, state = blocks
    try:
        config = HeadConfig(**config_dict)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"invalid config block: {exc}", 5) from None
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(8 * size, name), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(blob):
        raise FormatError("trailing bytes after last tensor", pos)
    names = config.parameter_shapes()
    params = {n: tensors.pop(n) for n in names if n in tensors}
    try:
        model = HeadModel(config, params)
    except DimensionError as exc:
        raise FormatError(f"checkpoint parameters inconsistent with config: {exc}") from None
    return model, state, tensors


def save_checkpoint(path, model, state=None, extra=None):
    blob = checkpoint_bytes(model, state, extra)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
