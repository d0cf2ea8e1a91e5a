"""Datasets: synthetic toy sets, CIFAR-10 binary batches, event streams, LTF export."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ltf

CIFAR_RECORD = 3073


@dataclass
class Dataset:
    inputs: np.ndarray  # (n, C, H, W) or (n, T, C, H, W), float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return self.inputs.shape[1:]

    def batches(self, batch_size, rng=None):
        """Yield (inputs, labels) batches; shuffled when ``rng`` is given."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for i in range(0, len(self), batch_size):
            idx = order[i:i + batch_size]
            yield self.inputs[idx], self.labels[idx]

    def subset(self, idx, split=None):
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, split or self.split)

    def save_ltf(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        ltf.save(d / "inputs.ltf", self.inputs)
        ltf.save(d / "labels.ltf", self.labels.astype(np.float32))
        (d / "meta.txt").write_text(f"num_classes={self.num_classes}\nsplit={self.split}\n")

    @classmethod
    def load_ltf(cls, directory):
        d = Path(directory)
        meta = dict(line.split("=", 1) for line in (d / "meta.txt").read_text().split())
        labels = ltf.load(d / "labels.ltf")
        return cls(ltf.load(d / "inputs.ltf"), labels.astype(np.int64), int(meta["num_classes"]), meta["split"])


def make_toy_dataset(kind, n, seed=0, size=16, noise=0.1, split="train"):
    """Two-class 16x16 single-channel images.

    "blobs": a bright 4x4 square top-left (class 0) or bottom-right (class 1).
    "bars": a horizontal (class 0) or vertical (class 1) bar at a random offset.
    """
    if n < 2:
        raise ValueError("need at least two samples")
    if kind not in ("blobs", "bars"):
        raise ValueError(f"unknown toy dataset kind {kind!r}; expected 'blobs' or 'bars'")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 2)
    imgs = np.zeros((n, 1, size, size), dtype=np.float64)
    for i, y in enumerate(labels):
        if kind == "blobs":
            if y == 0:
                imgs[i, 0, 1:5, 1:5] = 1.0
            else:
                imgs[i, 0, size - 5:size - 1, size - 5:size - 1] = 1.0
        else:
            pos = rng.integers(2, size - 4)
            if y == 0:
                imgs[i, 0, pos:pos + 2, 2:size - 2] = 1.0
            else:
                imgs[i, 0, 2:size - 2, pos:pos + 2] = 1.0
    imgs += rng.normal(0.0, noise, size=imgs.shape)
    return Dataset(np.clip(imgs, 0.0, 1.0), labels, 2, split)


def read_cifar10_batches(paths, split="train"):
    """Read CIFAR-10 binary batch files (label byte + 3072 channel-major pixels per record)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size % CIFAR_RECORD:
            whole = raw.size // CIFAR_RECORD
            raise ValueError(f"{path}: truncated record at byte offset {whole * CIFAR_RECORD} "
                             f"({raw.size - whole * CIFAR_RECORD} of {CIFAR_RECORD} bytes)")
        rec = raw.reshape(-1, CIFAR_RECORD)
        bad = np.nonzero(rec[:, 0] >= 10)[0]
        if bad.size:
            raise ValueError(f"{path}: label {rec[bad[0], 0]} >= 10 at byte offset {bad[0] * CIFAR_RECORD}")
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    return Dataset(np.concatenate(images), np.concatenate(labels), 10, split)


# -- event streams -------------------------------------------------------------
EVENT_DTYPE = np.dtype([("t", "<u4"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])


@dataclass
class EventStream:
    events: np.ndarray  # structured EVENT_DTYPE records
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        self.events = np.asarray(self.events, dtype=EVENT_DTYPE)
        ev = self.events
        if ev.size and np.any(np.diff(ev["t"].astype(np.int64)) < 0):
            raise ValueError("event timestamps must be non-decreasing")
        if ev.size and np.any(ev["p"] > 1):
            raise ValueError("polarity must be 0 or 1")
        if self.width is not None and ev.size and ev["x"].max() >= self.width:
            raise ValueError("event x coordinate outside the sensor")
        if self.height is not None and ev.size and ev["y"].max() >= self.height:
            raise ValueError("event y coordinate outside the sensor")

    @classmethod
    def from_lists(cls, t, x, y, p, width=None, height=None):
        ev = np.zeros(len(t), dtype=EVENT_DTYPE)
        ev["t"], ev["x"], ev["y"], ev["p"] = t, x, y, p
        return cls(ev, width, height)

    def __len__(self):
        return len(self.events)


def read_events(path, width=None, height=None):
    """Little-endian records: u32 t_us, u16 x, u16 y, u8 polarity."""
    raw = Path(path).read_bytes()
    if len(raw) % EVENT_DTYPE.itemsize:
        raise ValueError(f"{path}: size {len(raw)} is not a whole number of {EVENT_DTYPE.itemsize}-byte events")
    return EventStream(np.frombuffer(raw, dtype=EVENT_DTYPE).copy(), width, height)


def write_events(path, stream: EventStream):
    Path(path).write_bytes(stream.events.astype(EVENT_DTYPE).tobytes())


def rasterize_events(stream: EventStream, T, H, W, t_range=None, counts=False):
    """Bin events into T equal time windows -> (T, 2, H, W) frames.

    Binary by default (a pixel is 1 when at least one event of that polarity
    fell into the window); ``counts=True`` keeps the per-pixel event counts.
    ``t_range`` = (start, end) fixes the time span; otherwise it is taken from
    the first and last event.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    out = np.zeros((T, 2, H, W), dtype=np.float32)
    ev = stream.events
    if ev.size == 0:
        return out
    t = ev["t"].astype(np.float64)
    t0, t1 = (t[0], t[-1]) if t_range is None else t_range
    span = t1 - t0
    if span <= 0:
        win = np.zeros(len(t), dtype=np.int64)
    else:
        win = np.floor((t - t0) * T / span).astype(np.int64)
    keep = (win >= 0) & (t <= t1) & (ev["x"] < W) & (ev["y"] < H)
    win = np.clip(win, 0, T - 1)
    np.add.at(out, (win[keep], ev["p"][keep].astype(np.int64), ev["y"][keep].astype(np.int64),
                    ev["x"][keep].astype(np.int64)), 1.0)
    return out if counts else (out > 0).astype(np.float32)
