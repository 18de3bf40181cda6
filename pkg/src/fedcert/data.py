"""Datasets: IDX image files, synthetic class blobs, and defender splits."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, InputError

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Examples in [0, 1] with integer labels.

    `images` is (N, C, H, W) for image data; synthetic blob data may use
    a flat (N, features) layout instead.  Labels are int64, >= 0.
    """

    images: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __post_init__(self):
        x = np.asarray(self.images, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim < 2:
            raise InputError(f"images need a leading example axis, got shape {x.shape}")
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise InputError(f"labels shape {y.shape} does not match {x.shape[0]} examples")
        if x.shape[0] == 0:
            raise InputError("dataset must contain at least one example")
        if not np.isfinite(x).all():
            raise InputError("images must be finite")
        if x.min() < 0.0 or x.max() > 1.0:
            raise InputError("pixel values must lie in [0, 1]")
        if y.min() < 0:
            raise InputError("labels must be non-negative")
        object.__setattr__(self, "images", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def example_shape(self) -> tuple[int, ...]:
        return self.images.shape[1:]

    def take(self, indices, name: str | None = None) -> "LabeledDataset":
        idx = np.asarray(indices)
        return LabeledDataset(self.images[idx], self.labels[idx],
                              name if name is not None else self.name)


# ---------------------------------------------------------------------------
# IDX format


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated IDX stream while reading {what}")
    return buf


def load_idx(images_path, labels_path, name: str = "") -> LabeledDataset:
    """Big-endian unsigned-byte IDX pair, pixels scaled by 1/255."""
    with open(images_path, "rb") as fh:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, "image header"))
        if magic != IDX_MAGIC_IMAGES:
            raise FormatError(f"bad image magic 0x{magic:08x}, expected 0x{IDX_MAGIC_IMAGES:08x}")
        raw = _read_exact(fh, n * rows * cols, "image payload")
        if fh.read(1):
            raise FormatError("trailing bytes after IDX image payload")
    with open(labels_path, "rb") as fh:
        magic, n_lab = struct.unpack(">II", _read_exact(fh, 8, "label header"))
        if magic != IDX_MAGIC_LABELS:
            raise FormatError(f"bad label magic 0x{magic:08x}, expected 0x{IDX_MAGIC_LABELS:08x}")
        lab = _read_exact(fh, n_lab, "label payload")
        if fh.read(1):
            raise FormatError("trailing bytes after IDX label payload")
    if n != n_lab:
        raise FormatError(f"image count {n} != label count {n_lab}")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, rows, cols) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    return LabeledDataset(images, labels, name)


def save_idx(data: LabeledDataset, images_path, labels_path) -> None:
    """Inverse of load_idx; loading then saving reproduces the byte stream."""
    x = data.images
    if x.ndim != 4 or x.shape[1] != 1:
        raise InputError(f"IDX export needs (N, 1, H, W) images, got {x.shape}")
    n, _, rows, cols = x.shape
    pixels = np.round(x * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_MAGIC_IMAGES, n, rows, cols))
        fh.write(pixels.tobytes())
    if data.labels.max() > 255:
        raise InputError("IDX labels must fit in one byte")
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_MAGIC_LABELS, n))
        fh.write(data.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# synthetic data


def synth_dataset(classes: int, per_class: int, *, image_shape: tuple[int, ...] | None = None,
                  features: int | None = None, separation: float = 1.0,
                  noise: float = 0.08, seed: int = 0, name: str = "synth") -> LabeledDataset:
    """Gaussian blobs around class-specific anchor points, clipped to [0, 1].

    Image mode places anchors at 0.5 +- 0.25*separation per pixel with a
    random sign pattern per class; flat mode spreads anchors on a circle
    in the first two feature dimensions.  Example order is shuffled once
    so that head slices mix classes.
    """
    if classes < 2:
        raise ConfigError("need at least 2 classes")
    if per_class < 1:
        raise ConfigError("per_class must be >= 1")
    if (image_shape is None) == (features is None):
        raise ConfigError("give exactly one of image_shape or features")
    rng = np.random.default_rng(seed)
    if image_shape is not None:
        shape = tuple(int(s) for s in image_shape)
        if len(shape) != 3:
            raise ConfigError(f"image_shape must be (C, H, W), got {shape}")
        anchors = []
        seen = set()
        for _ in range(classes):
            while True:
                signs = rng.choice([-1.0, 1.0], size=shape)
                key = signs.tobytes()
                if key not in seen:
                    seen.add(key)
                    break
            anchors.append(0.5 + 0.25 * separation * signs)
        anchors = np.stack(anchors)
    else:
        shape = (int(features),)
        if shape[0] < 2:
            raise ConfigError("need at least 2 features")
        angles = 2.0 * np.pi * np.arange(classes) / classes
        anchors = np.full((classes,) + shape, 0.5)
        anchors[:, 0] += 0.25 * separation * np.cos(angles)
        anchors[:, 1] += 0.25 * separation * np.sin(angles)
    xs = []
    ys = []
    for c in range(classes):
        pts = anchors[c] + noise * rng.standard_normal((per_class,) + shape)
        xs.append(pts)
        ys.append(np.full(per_class, c, dtype=np.int64))
    x = np.clip(np.concatenate(xs), 0.0, 1.0)
    y = np.concatenate(ys)
    order = rng.permutation(x.shape[0])
    return LabeledDataset(x[order], y[order], name)


# ---------------------------------------------------------------------------
# defender splits


@dataclass(frozen=True)
class DefenderSplits:
    """Certification set, validation set and the client training pool.

    Taken from the head of the training order: [0, cert_n) certifies,
    [cert_n, cert_n + val_n) validates, the remainder is the pool.
    """

    cert_set: LabeledDataset | None
    validation: LabeledDataset
    client_pool: LabeledDataset


def make_splits(data: LabeledDataset, cert_n: int, val_n: int,
                *, allow_empty_cert: bool = False) -> DefenderSplits:
    if cert_n < 0 or val_n < 1:
        raise ConfigError("cert_n must be >= 0 and val_n >= 1")
    if cert_n == 0 and not allow_empty_cert:
        raise ConfigError("empty certification set requires the gate's cert checks disabled")
    if cert_n + val_n >= len(data):
        raise ConfigError(
            f"splits ({cert_n} + {val_n}) leave no client pool from {len(data)} examples")
    cert = data.take(np.arange(cert_n), name=f"{data.name}/cert") if cert_n else None
    val = data.take(np.arange(cert_n, cert_n + val_n), name=f"{data.name}/val")
    pool = data.take(np.arange(cert_n + val_n, len(data)), name=f"{data.name}/pool")
    return DefenderSplits(cert_set=cert, validation=val, client_pool=pool)
