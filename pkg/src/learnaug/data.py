"""Dataset ingestion and synthesis.

Handles big-endian IDX image/label files (gzip-transparent), generation
of a uniformly-rotated copy of an image dataset, and the 2D toy
distributions used by the invariance demo.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import warp

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Base for malformed IDX files."""


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


@dataclass
class Dataset:
    """Images (n, c, h, w) scaled to [0, 1], or feature rows (n, d)."""

    x: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str

    def __len__(self) -> int:
        return len(self.labels)

    def validate(self) -> None:
        if len(self.x) != len(self.labels):
            raise ValueError("image count != label count")
        if len(self.labels) and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise ValueError("label outside [0, num_classes)")

    def subset(self, n: int, rng: np.random.Generator) -> "Dataset":
        idx = rng.permutation(len(self))[:n]
        return Dataset(self.x[idx], self.labels[idx], self.num_classes, self.name)


def _open(path, mode):
    path = str(path)
    if path.endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def _read_exact(f, count, what):
    buf = f.read(count)
    if len(buf) != count:
        raise IdxTruncatedError(f"{what}: expected {count} bytes, got {len(buf)}")
    return buf


def load_idx(images_path, labels_path, name: str | None = None) -> Dataset:
    """Parse an IDX image/label file pair.

    Byte layout (big endian): images are i32 magic 0x803, count, rows,
    cols, then row-major u8 pixels; labels are i32 magic 0x801, count,
    then u8 labels. Pixels come back scaled to [0, 1].
    """
    with _open(images_path, "rb") as f:
        (magic,) = struct.unpack(">i", _read_exact(f, 4, "image magic"))
        if magic != IMAGE_MAGIC:
            raise IdxMagicError(f"bad image magic 0x{magic:08x} in {images_path}")
        count, rows, cols = struct.unpack(">iii", _read_exact(f, 12, "image header"))
        pixels = np.frombuffer(
            _read_exact(f, count * rows * cols, "image data"), dtype=np.uint8
        )
    with _open(labels_path, "rb") as f:
        (magic,) = struct.unpack(">i", _read_exact(f, 4, "label magic"))
        if magic != LABEL_MAGIC:
            raise IdxMagicError(f"bad label magic 0x{magic:08x} in {labels_path}")
        (lcount,) = struct.unpack(">i", _read_exact(f, 4, "label header"))
        labels = np.frombuffer(_read_exact(f, lcount, "label data"), dtype=np.uint8)
    if count != lcount:
        raise IdxCountMismatchError(f"{count} images but {lcount} labels")
    x = pixels.reshape(count, 1, rows, cols).astype(np.float64) / 255.0
    ds = Dataset(
        x=x,
        labels=labels.astype(np.int64),
        num_classes=int(labels.max()) + 1 if count else 0,
        name=name or Path(str(images_path)).name,
    )
    ds.validate()
    return ds


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Inverse of load_idx; pixel floats are quantized to u8 via round(x*255)."""
    x = dataset.x
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError("IDX export needs single-channel image data")
    n, _, rows, cols = x.shape
    pixels = np.clip(np.round(x * 255.0), 0, 255).astype(np.uint8)
    with _open(images_path, "wb") as f:
        f.write(struct.pack(">iiii", IMAGE_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with _open(labels_path, "wb") as f:
        f.write(struct.pack(">ii", LABEL_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def load_idx_dir(data_dir, name="mnist") -> tuple[Dataset, Dataset]:
    """(train, test) pair from a directory holding the four standard files."""
    d = Path(data_dir)
    train = load_idx(
        d / "train-images-idx3-ubyte.gz", d / "train-labels-idx1-ubyte.gz", f"{name}-train"
    )
    test = load_idx(
        d / "test-images-idx3-ubyte.gz", d / "test-labels-idx1-ubyte.gz", f"{name}-test"
    )
    return train, test


def make_rotated(base: Dataset, rng: np.random.Generator) -> Dataset:
    """Rotate every image once by an angle drawn uniformly from [0, 2*pi)."""
    angles = rng.uniform(0.0, 2.0 * np.pi, size=len(base))
    mats = np.stack([warp.affine_matrix("rotation", a) for a in angles])
    return Dataset(
        x=warp.warp_bilinear(base.x, mats),
        labels=base.labels.copy(),
        num_classes=base.num_classes,
        name=f"rot-{base.name}",
    )


def make_blobs2d(kind: str, n: int, rng: np.random.Generator) -> Dataset:
    """2D toy sets: 'plain' Gaussian blobs (no rotation symmetry) or
    'rotation-invariant' concentric annuli (class = radius band)."""
    if n < 2:
        raise ValueError("need n >= 2")
    labels = np.arange(n) % 2
    if kind == "plain":
        # 45 degrees apart (not antipodal), so that moderate common rotations
        # already collide the two classes
        centers = np.array([[1.0, 0.0], [np.sqrt(0.5), np.sqrt(0.5)]])
        x = centers[labels] + 0.0765 * rng.standard_normal((n, 2))
    elif kind == "rotation-invariant":
        radius = np.where(
            labels == 0,
            rng.uniform(0.5, 0.9, size=n),
            rng.uniform(1.3, 1.7, size=n),
        )
        angle = rng.uniform(0.0, 2.0 * np.pi, size=n)
        x = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    else:
        raise ValueError(f"unknown toy kind {kind!r}")
    perm = rng.permutation(n)
    return Dataset(x[perm], labels[perm].astype(np.int64), 2, f"blobs2d-{kind}")
