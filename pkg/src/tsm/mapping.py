"""Temporal-spatial mapping: per-frame features stacked into a 2-D VideoMap."""

from dataclasses import dataclass, field

import numpy as np

from tsm.errors import DimensionError


@dataclass
class FeatureSequence:
    """Ordered per-frame features of one video.

    ``frames`` is ``(T, L)`` for vectors or ``(T, h, w, c)`` for feature volumes.
    ``mask`` optionally flags the frames that carry class evidence.
    """

    frames: np.ndarray
    label: int
    id: str = ""
    mask: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim not in (2, 4) or self.frames.shape[0] < 1:
            raise DimensionError(f"frames must be (T, L) or (T, h, w, c), got {self.frames.shape}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != (self.frames.shape[0],):
                raise DimensionError("relevance mask length must equal the frame count")

    @property
    def length(self):
        return self.frames.shape[0]


@dataclass
class VideoMap:
    matrix: np.ndarray
    label: int
    source_id: str = ""

    @property
    def height(self):
        return self.matrix.shape[0]

    @property
    def width(self):
        return self.matrix.shape[1]


def vectorize_feature_maps(volume):
    """Average each channel of an ``(h, w, c)`` volume over its spatial plane."""
    volume = np.asarray(volume, dtype=np.float64)
    if volume.ndim != 3 or 0 in volume.shape:
        raise DimensionError(f"expected a non-empty (h, w, c) volume, got {volume.shape}")
    return volume.mean(axis=(0, 1))


def build_videomap(seq):
    """Stack the frame vectors of ``seq`` row by row, first frame on top.

    Feature volumes are vectorised first. Also accepts a plain list of vectors.
    """
    if isinstance(seq, FeatureSequence):
        frames, label, sid = seq.frames, seq.label, seq.id
    else:
        frames, label, sid = seq, -1, ""
    if isinstance(frames, np.ndarray) and frames.ndim == 4:
        rows = [vectorize_feature_maps(v) for v in frames]
    else:
        rows = [np.asarray(f, dtype=np.float64).reshape(-1) for f in frames]
    if not rows:
        raise DimensionError("a VideoMap needs at least one frame")
    width = rows[0].shape[0]
    for k, r in enumerate(rows):
        if r.shape[0] != width:
            raise DimensionError(f"frame {k} has length {r.shape[0]}, expected {width}")
    return VideoMap(np.stack(rows), label, sid)


def temporal_indices(n_source, n_target):
    """Nearest-index uniform sampling: ``floor(i * n_source / n_target)``."""
    if n_target < 1:
        raise ValueError(f"target height must be >= 1, got {n_target}")
    return (np.arange(n_target) * n_source) // n_target


def resample_temporal(vmap, target):
    """Resample rows of a VideoMap (or a 2-D array) to ``target`` rows.

    Downsampling keeps evenly spaced rows; upsampling repeats rows.
    """
    matrix = vmap.matrix if isinstance(vmap, VideoMap) else np.asarray(vmap)
    idx = temporal_indices(matrix.shape[0], target)
    out = matrix[idx]
    if isinstance(vmap, VideoMap):
        return VideoMap(out, vmap.label, vmap.source_id)
    return out


def sample_at_density(seq_or_map, n_test, n_fixed):
    """Simulate test-time sampling: draw ``n_test`` frames, then resize to ``n_fixed``."""
    vmap = seq_or_map if isinstance(seq_or_map, VideoMap) else build_videomap(seq_or_map)
    return resample_temporal(resample_temporal(vmap, n_test), n_fixed)
