#!/usr/bin/env python3
"""Build the bundled MNIST subset (data/mnist/) from the `mnist` npm
package, which ships ~10k real MNIST digits as per-digit JSON arrays of
normalized pixels.

Usage: python3 tools/build_mnist_subset.py <extracted-package-dir> <out-dir>

The digits are stratified per class (90% train / 10% test), shuffled with
a fixed seed, quantized back to u8 and written as the four standard
gzipped IDX files. Rerunning reproduces the same bytes.
"""

import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np

SEED = 20240901
TRAIN_FRACTION = 0.9


def write_idx_gz(path: Path, images: np.ndarray, labels: np.ndarray) -> None:
    n, rows, cols = images.shape
    img = struct.pack(">iiii", 0x803, n, rows, cols) + images.tobytes()
    lab = struct.pack(">ii", 0x801, n) + labels.astype(np.uint8).tobytes()
    stem = str(path)
    # mtime=0 keeps the gzip output byte-stable across rebuilds
    with gzip.GzipFile(stem + "-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(img)
    with gzip.GzipFile(stem + "-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(lab)


def main() -> int:
    if len(sys.argv) != 3:
        print(__doc__)
        return 2
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(SEED)
    train_x, train_y, test_x, test_y = [], [], [], []
    for digit in range(10):
        flat = np.asarray(json.load(open(src / "src" / "digits" / f"{digit}.json"))["data"])
        imgs = np.clip(np.round(flat.reshape(-1, 28, 28) * 255.0), 0, 255).astype(np.uint8)
        perm = rng.permutation(len(imgs))
        cut = int(round(TRAIN_FRACTION * len(imgs)))
        train_x.append(imgs[perm[:cut]])
        train_y.append(np.full(cut, digit, dtype=np.uint8))
        test_x.append(imgs[perm[cut:]])
        test_y.append(np.full(len(imgs) - cut, digit, dtype=np.uint8))

    def pack(xs, ys):
        x, y = np.concatenate(xs), np.concatenate(ys)
        perm = rng.permutation(len(y))
        return x[perm], y[perm]

    tx, ty = pack(train_x, train_y)
    vx, vy = pack(test_x, test_y)
    write_idx_gz(out / "train", tx, ty)
    write_idx_gz(out / "test", vx, vy)
    print(f"wrote {len(ty)} train / {len(vy)} test images to {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
