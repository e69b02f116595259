#!/usr/bin/env python3
"""Rebuild the bundled MNIST subset fixture from the npm `mnist` package.

The npm package (https://www.npmjs.com/package/mnist, MIT) ships 10,000 real
MNIST digits as JSON, with pixels stored as value/255 rounded to three
decimals.  That rounding is reversible, so the original uint8 pixels are
recovered exactly.  The first 100 images of each class form a balanced
1000-image test split; the remaining 9000 are dealt round-robin by class so
any prefix of the train split is close to class-balanced.  Both splits are
written as gzipped IDX files with the canonical MNIST file names.

Usage: python tools/make_mnist_subset.py <npm-package-dir> <out-dir>
"""
import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np


def load_digit(pkg_dir, d):
    data = json.load(open(Path(pkg_dir) / "src" / "digits" / f"{d}.json"))["data"]
    arr = np.asarray(data, dtype=np.float64).reshape(-1, 784)
    return np.rint(arr * 255.0).astype(np.uint8)


def deal_round_robin(pools):
    """Interleave (label, image) items from per-class pools until all empty."""
    out = []
    cursors = [0] * len(pools)
    while True:
        emitted = False
        for d, pool in enumerate(pools):
            if cursors[d] < len(pool):
                out.append((d, pool[cursors[d]]))
                cursors[d] += 1
                emitted = True
        if not emitted:
            return out


def write_idx_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">iiii", 0x803, images.shape[0], 28, 28))
        f.write(np.ascontiguousarray(images).tobytes())


def write_idx_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">ii", 0x801, labels.shape[0]))
        f.write(labels.astype(np.uint8).tobytes())


def main(pkg_dir, out_dir):
    per_digit = [load_digit(pkg_dir, d) for d in range(10)]
    test_items = deal_round_robin([p[:100] for p in per_digit])
    train_items = deal_round_robin([p[100:] for p in per_digit])

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, items in (("train", train_items), ("t10k", test_items)):
        labels = np.array([d for d, _ in items], dtype=np.uint8)
        images = np.stack([img for _, img in items]).reshape(-1, 28, 28)
        prefix = "train" if name == "train" else "t10k"
        write_idx_images(out / f"{prefix}-images-idx3-ubyte.gz", images)
        write_idx_labels(out / f"{prefix}-labels-idx1-ubyte.gz", labels)
        print(f"{name}: {images.shape[0]} images")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
