"""Datasets: MNIST IDX files and a seeded Gaussian-mixture generator."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    CountMismatchError,
    DataError,
    EmptyResultError,
    TruncatedStreamError,
)
from .seeding import rng_for

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
NORMALIZATIONS = ("none", "scale_255", "standardize")


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int
    normalization: str = "none"
    image_shape: tuple[int, int] | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise DataError(f"inconsistent dataset shapes X{X.shape}, y{y.shape}")
        if X.shape[0] < 1:
            raise EmptyResultError("dataset has no rows")
        if not np.all(np.isfinite(X)):
            raise DataError("dataset contains NaN or Inf")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        if self.normalization not in NORMALIZATIONS:
            raise DataError(f"unknown normalization {self.normalization!r}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.X.shape[0]

    @property
    def dim(self):
        return self.X.shape[1]


def _read_header(buf, magic, nfields, what):
    need = 4 * (1 + nfields)
    if len(buf) < need:
        raise TruncatedStreamError(f"{what}: header needs {need} bytes, got {len(buf)}")
    found = struct.unpack_from(">I", buf, 0)[0]
    if found != magic:
        raise BadMagicError(f"{what}: expected magic 0x{magic:08x}, got 0x{found:08x}")
    return struct.unpack_from(f">{nfields}I", buf, 4), need


def parse_idx(images_bytes: bytes, labels_bytes: bytes, normalization="scale_255",
              num_classes=None) -> Dataset:
    """Parse an MNIST image/label IDX pair.

    Pixels are unsigned bytes; ``scale_255`` divides by 255, ``standardize``
    centres and scales each pixel column (constant columns are left at 0).
    """
    (count, rows, cols), off = _read_header(images_bytes, IMAGES_MAGIC, 3, "images")
    (lcount,), loff = _read_header(labels_bytes, LABELS_MAGIC, 1, "labels")
    if len(images_bytes) < off + count * rows * cols:
        raise TruncatedStreamError(
            f"images: expected {count * rows * cols} pixel bytes, got {len(images_bytes) - off}"
        )
    if len(labels_bytes) < loff + lcount:
        raise TruncatedStreamError(
            f"labels: expected {lcount} label bytes, got {len(labels_bytes) - loff}"
        )
    if count != lcount:
        raise CountMismatchError(f"{count} images but {lcount} labels")
    pixels = np.frombuffer(images_bytes, dtype=np.uint8, count=count * rows * cols, offset=off)
    labels = np.frombuffer(labels_bytes, dtype=np.uint8, count=lcount, offset=loff)
    X = pixels.reshape(count, rows * cols).astype(np.float64)
    X = normalize(X, normalization)
    C = int(num_classes) if num_classes is not None else int(labels.max()) + 1 if count else 1
    return Dataset(X, labels.astype(np.int64), C, normalization, (rows, cols))


def normalize(X, normalization):
    if normalization == "none":
        return X
    if normalization == "scale_255":
        return X / 255.0
    if normalization == "standardize":
        mu = X.mean(axis=0)
        sd = X.std(axis=0)
        return (X - mu) / np.where(sd > 0, sd, 1.0)
    raise DataError(f"unknown normalization {normalization!r}")


def _read_maybe_gzip(path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def load_idx(images_path, labels_path, normalization="scale_255", num_classes=None) -> Dataset:
    return parse_idx(_read_maybe_gzip(images_path), _read_maybe_gzip(labels_path),
                     normalization, num_classes)


def serialize_idx(ds: Dataset) -> tuple[bytes, bytes]:
    """Inverse of :func:`parse_idx` for datasets with ``none``/``scale_255`` pixels."""
    if ds.image_shape is None:
        raise DataError("dataset has no image shape; cannot write IDX")
    rows, cols = ds.image_shape
    if ds.normalization == "scale_255":
        raw = ds.X * 255.0
    elif ds.normalization == "none":
        raw = ds.X
    else:
        raise DataError("standardized datasets cannot be written back to IDX")
    pix = np.rint(raw)
    if pix.min() < 0 or pix.max() > 255:
        raise DataError("pixel values out of the unsigned byte range")
    if ds.y.max() > 255:
        raise DataError("labels do not fit in unsigned bytes")
    n = len(ds)
    images = struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols) + pix.astype(np.uint8).tobytes()
    labels = struct.pack(">II", LABELS_MAGIC, n) + ds.y.astype(np.uint8).tobytes()
    return images, labels


def subsample_classes(ds: Dataset, keep, relabel=None) -> Dataset:
    """Keep rows whose label is in ``keep``; relabel to ``0..len(keep)-1``.

    ``relabel`` overrides the default (sorted order of ``keep``).
    """
    keep = sorted(set(int(k) for k in keep))
    if not keep:
        raise ValueError("keep must be non-empty")
    if relabel is None:
        relabel = {k: i for i, k in enumerate(keep)}
    mask = np.isin(ds.y, keep)
    if not mask.any():
        raise EmptyResultError(f"no rows carry labels {keep}")
    y = np.array([relabel[int(v)] for v in ds.y[mask]], dtype=np.int64)
    return Dataset(ds.X[mask], y, max(relabel.values()) + 1, ds.normalization, ds.image_shape)


def downsample(ds: Dataset, factor: int) -> Dataset:
    """Average-pool square image rows by ``factor`` (e.g. 28x28 -> 7x7 with 4)."""
    if ds.image_shape is None:
        raise DataError("downsampling needs an image shape")
    rows, cols = ds.image_shape
    if factor < 1 or rows % factor or cols % factor:
        raise DataError(f"factor {factor} does not divide image shape {ds.image_shape}")
    if factor == 1:
        return ds
    img = ds.X.reshape(len(ds), rows // factor, factor, cols // factor, factor)
    X = img.mean(axis=(2, 4)).reshape(len(ds), -1)
    return Dataset(X, ds.y, ds.num_classes, ds.normalization,
                   (rows // factor, cols // factor))


def take(ds: Dataset, count: int, seed: int | None = None) -> Dataset:
    """First ``count`` rows, or a seeded subset without replacement."""
    if count >= len(ds):
        return ds
    if seed is None:
        idx = np.arange(count)
    else:
        idx = np.sort(rng_for(seed, "subset").choice(len(ds), size=count, replace=False))
    return Dataset(ds.X[idx], ds.y[idx], ds.num_classes, ds.normalization, ds.image_shape)


def synth_gaussian_classes(d, num_classes, n_per_class, separation, seed) -> Dataset:
    """Class ``c`` is drawn from ``N(separation * e_{c mod d}, I_d)``."""
    if separation < 0:
        raise ValueError("separation must be non-negative")
    if d < 1 or num_classes < 1 or n_per_class < 1:
        raise ValueError("d, num_classes and n_per_class must be positive")
    rng = rng_for(seed, "synth")
    X = rng.standard_normal((num_classes * n_per_class, d))
    y = np.repeat(np.arange(num_classes), n_per_class)
    X[np.arange(len(y)), y % d] += separation
    return Dataset(X, y, num_classes, "none")


def save_npz(ds: Dataset, path):
    np.savez(path, X=ds.X, y=ds.y, num_classes=ds.num_classes,
             normalization=ds.normalization)


def load_npz(path) -> Dataset:
    with np.load(path, allow_pickle=False) as z:
        return Dataset(z["X"], z["y"], int(z["num_classes"]), str(z["normalization"]))
