"""Dataset ingestion and artifact emission.

Input is the classic IDX format (big-endian magic, dims, raw payload),
read transparently through gzip when the filename ends in ``.gz``.
Outputs are deliberately primitive: binary PGM/PPM montages and plain
CSV, both bit-exact and parseable without any imaging dependency.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ValidationError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Images in [0,1] shaped (n, c, h, w), with optional integer labels."""

    images: np.ndarray
    labels: np.ndarray | None = None
    name: str = "dataset"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValidationError(f"images must be (n, c, h, w), got {self.images.shape}")
        if self.images.size:
            lo, hi = float(self.images.min()), float(self.images.max())
            if lo < 0.0 or hi > 1.0:
                raise ValidationError(f"pixels must lie in [0, 1], got range [{lo}, {hi}]")
        if self.labels is not None and self.labels.shape[0] != self.images.shape[0]:
            raise ValidationError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    def take(self, n: int) -> "Dataset":
        return Dataset(
            images=self.images[:n],
            labels=None if self.labels is None else self.labels[:n],
            name=self.name,
        )


def _open_maybe_gz(path: str):
    if path.endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, n: int, path: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DataError(f"truncated IDX file {path}: wanted {n} bytes, got {len(buf)}")
    return buf


def load_idx(images_path: str, labels_path: str | None = None, name: str | None = None) -> Dataset:
    """Load an IDX image file (and optionally its label file).

    Pixels are scaled by 1/255 into [0,1] and given a channel axis.
    """
    if not os.path.exists(images_path):
        raise DataError(f"image file not found: {images_path}")
    with _open_maybe_gz(images_path) as f:
        magic, n, h, w = struct.unpack(">iiii", _read_exact(f, 16, images_path))
        if magic != IMAGE_MAGIC:
            raise DataError(
                f"{images_path}: expected image magic {IMAGE_MAGIC:#010x}, got {magic:#010x}"
            )
        raw = _read_exact(f, n * h * w, images_path)
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, h, w)
    images = images.astype(np.float32) / np.float32(255.0)

    labels = None
    if labels_path is not None:
        if not os.path.exists(labels_path):
            raise DataError(f"label file not found: {labels_path}")
        with _open_maybe_gz(labels_path) as f:
            magic, ln = struct.unpack(">ii", _read_exact(f, 8, labels_path))
            if magic != LABEL_MAGIC:
                raise DataError(
                    f"{labels_path}: expected label magic {LABEL_MAGIC:#010x}, got {magic:#010x}"
                )
            lraw = _read_exact(f, ln, labels_path)
        if ln != n:
            raise DataError(f"{images_path} holds {n} images but {labels_path} holds {ln} labels")
        labels = np.frombuffer(lraw, dtype=np.uint8).astype(np.int64)

    return Dataset(images=images, labels=labels,
                   name=name or os.path.basename(images_path))


def load_mnist_dir(data_dir: str, split: str = "train") -> Dataset:
    """Resolve the conventional MNIST filenames inside a directory."""
    stems = {"train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
             "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")}
    if split not in stems:
        raise ValidationError(f"split must be 'train' or 'test', got {split!r}")
    paths = []
    for stem in stems[split]:
        plain = os.path.join(data_dir, stem)
        gz = plain + ".gz"
        if os.path.exists(plain):
            paths.append(plain)
        elif os.path.exists(gz):
            paths.append(gz)
        else:
            raise DataError(f"dataset file not found: {plain}[.gz]")
    return load_idx(paths[0], paths[1], name=f"mnist-{split}")


def _lin_weights(src: int, dst: int) -> np.ndarray:
    """Row-stochastic 1-D interpolation matrix, half-pixel-centre convention."""
    scale = src / dst
    x = (np.arange(dst, dtype=np.float64) + 0.5) * scale - 0.5
    i0 = np.floor(x).astype(np.int64)
    frac = x - i0
    lo = np.clip(i0, 0, src - 1)
    hi = np.clip(i0 + 1, 0, src - 1)
    w = np.zeros((dst, src), dtype=np.float64)
    rows = np.arange(dst)
    np.add.at(w, (rows, lo), 1.0 - frac)
    np.add.at(w, (rows, hi), frac)
    return w.astype(np.float32)


def resize_bilinear(images: np.ndarray, target: int) -> np.ndarray:
    """Separable bilinear resize of square images to target x target."""
    if images.ndim != 4 or images.shape[2] != images.shape[3]:
        raise ValidationError(f"expected square (n, c, h, h) images, got {images.shape}")
    src = images.shape[2]
    if src == target:
        return images.astype(np.float32, copy=False)
    w = _lin_weights(src, target)
    out = np.einsum("oh,nchw,pw->ncop", w, images.astype(np.float32), w, optimize=True)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def batches(ds: Dataset, batch_size: int, shuffle_seed: int):
    """Yield the dataset once, in a seed-determined order, last batch partial."""
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    n = len(ds)
    order = np.random.Generator(np.random.Philox(key=shuffle_seed)).permutation(n)
    for i in range(0, n, batch_size):
        idx = order[i:i + batch_size]
        yield Dataset(
            images=ds.images[idx],
            labels=None if ds.labels is None else ds.labels[idx],
            name=ds.name,
        )


def write_montage(images: np.ndarray, cols: int, path: str) -> None:
    """Tile images row-major with 2-pixel black gutters and write PGM/PPM.

    Grayscale (c=1) emits binary P5; RGB (c=3) emits binary P6. Missing
    tiles in the last row stay black.
    """
    if images.ndim != 4 or images.shape[1] not in (1, 3):
        raise ValidationError(f"montage needs (n, 1|3, h, w) images, got {images.shape}")
    if cols < 1:
        raise ValidationError(f"cols must be >= 1, got {cols}")
    n, c, h, w = images.shape
    if n == 0:
        raise ValidationError("montage of zero images")
    lo, hi = float(images.min()), float(images.max())
    if lo < 0.0 or hi > 1.0:
        raise ValidationError(f"pixels must lie in [0, 1], got range [{lo}, {hi}]")
    gut = 2
    rows = (n + cols - 1) // cols
    canvas = np.zeros((rows * h + gut * (rows - 1), cols * w + gut * (cols - 1), c),
                      dtype=np.uint8)
    quant = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    for i in range(n):
        r, col = divmod(i, cols)
        y, x = r * (h + gut), col * (w + gut)
        canvas[y:y + h, x:x + w, :] = quant[i].transpose(1, 2, 0)
    kind = b"P5" if c == 1 else b"P6"
    header = kind + f"\n{canvas.shape[1]} {canvas.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(canvas.tobytes())


def format_cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def write_csv(rows, header: list[str], path: str) -> None:
    """Comma-separated values: header line first, floats at 6 significant
    digits, every line newline-terminated."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(format_cell(v) for v in row) + "\n")
