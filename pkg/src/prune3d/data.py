"""Synthetic moving-object clips that need temporal context to classify.

Each clip shows a bright square drifting with a class-specific velocity on a
torus (it wraps around the frame edges), plus a static distractor square in a
second channel and Gaussian noise. Because the start position is uniform
over the frame and motion wraps, any single frame is distributed identically
for every class: only the motion across frames identifies the class.
"""

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .errors import UsageError
from .network import Dataset

MAX_DESK_DIMS = (2, 16, 16, 8)


@dataclass
class SyntheticDatasetSpec:
    num_classes: int = 4
    clips_per_class: int = 100
    channels: int = 2
    width: int = 16
    height: int = 16
    depth: int = 8
    noise: float = 0.3
    object_size: int = 4
    speed: float = 1.0
    seed: int = 0
    val_fraction: float = 0.2

    def validate(self):
        if self.num_classes < 2:
            raise UsageError("need at least two classes")
        if self.clips_per_class < 1:
            raise UsageError("clips_per_class must be >= 1")
        if self.channels < 1 or min(self.width, self.height, self.depth) < 1:
            raise UsageError("clip dims must be positive")
        if self.object_size < 1 or self.object_size > min(self.width, self.height):
            raise UsageError("object does not fit the frame")
        if self.noise < 0:
            raise UsageError("noise must be non-negative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise UsageError("val_fraction must lie in [0, 1)")

    @property
    def clip_shape(self):
        """``(c, d, h, w)`` array shape of one clip."""
        return (self.channels, self.depth, self.height, self.width)


def _draw_square(frame, cy, cx, size):
    h, w = frame.shape
    ys = (cy + np.arange(size)) % h
    xs = (cx + np.arange(size)) % w
    frame[np.ix_(ys, xs)] = 1.0


def class_velocity(k, num_classes, speed=1.0):
    """Per-frame ``(dy, dx)`` displacement of class ``k``: evenly spaced directions."""
    angle = 2.0 * np.pi * k / num_classes
    return speed * np.sin(angle), speed * np.cos(angle)


def synth_clips(spec):
    """Generate ``(x, y)`` with ``x`` of shape ``(n, c, d, h, w)`` (float32)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.num_classes * spec.clips_per_class
    c, d, h, w = spec.clip_shape
    x = np.zeros((n, c, d, h, w), dtype=np.float32)
    y = np.repeat(np.arange(spec.num_classes), spec.clips_per_class)
    for i in range(n):
        vy, vx = class_velocity(int(y[i]), spec.num_classes, spec.speed)
        y0 = rng.uniform(0, h)
        x0 = rng.uniform(0, w)
        for t in range(d):
            _draw_square(x[i, 0, t], int(np.floor(y0 + vy * t)), int(np.floor(x0 + vx * t)), spec.object_size)
        if c > 1:
            sy, sx = rng.integers(0, h), rng.integers(0, w)
            for t in range(d):
                _draw_square(x[i, 1, t], sy, sx, spec.object_size)
        if spec.noise > 0:
            x[i] += rng.normal(0.0, spec.noise, size=(c, d, h, w)).astype(np.float32)
    return x, y


def split_indices(n, val_fraction, seed):
    rng = np.random.default_rng(seed + 7919)
    perm = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    split = np.array(["train"] * n, dtype=object)
    split[perm[:n_val]] = "val"
    return split


def synth_data(spec, out_dir=None):
    """Build the dataset and (optionally) write it to ``out_dir``.

    Returns ``(train, val)`` :class:`~prune3d.network.Dataset` objects.
    """
    x, y = synth_clips(spec)
    split = split_indices(len(y), spec.val_fraction, spec.seed)
    if out_dir is not None:
        save_dataset(out_dir, x, y, split, spec)
    tr = split == "train"
    return (Dataset(x[tr], y[tr], spec.num_classes), Dataset(x[~tr], y[~tr], spec.num_classes))


def save_dataset(out_dir, x, y, split, spec=None):
    """Raw little-endian float32 clip blob plus a JSON index."""
    os.makedirs(out_dir, exist_ok=True)
    blob = np.ascontiguousarray(x, dtype="<f4")
    with open(os.path.join(out_dir, "clips.bin"), "wb") as fh:
        fh.write(blob.tobytes())
    index = {
        "format": "prune3d-dataset/1",
        "blob": "clips.bin",
        "count": int(len(y)),
        "clip_shape": list(x.shape[1:]),
        "labels": [int(v) for v in y],
        "split": [str(s) for s in split],
        "spec": asdict(spec) if spec is not None else None,
    }
    with open(os.path.join(out_dir, "index.json"), "w") as fh:
        json.dump(index, fh, indent=1)


def load_dataset(path, split=None):
    """Load a dataset directory. ``split`` in {None, "train", "val"}."""
    with open(os.path.join(path, "index.json")) as fh:
        index = json.load(fh)
    shape = tuple(index["clip_shape"])
    raw = np.fromfile(os.path.join(path, index["blob"]), dtype="<f4")
    if raw.size != index["count"] * int(np.prod(shape)):
        raise UsageError(f"{path}: blob size does not match index")
    x = raw.reshape((index["count"],) + shape).astype(np.float32)
    y = np.asarray(index["labels"], dtype=np.int64)
    num_classes = (index.get("spec") or {}).get("num_classes") or int(y.max()) + 1
    if split is not None:
        sel = np.array([s == split for s in index["split"]])
        x, y = x[sel], y[sel]
    return Dataset(x, y, num_classes, {"path": path, "split": split})
