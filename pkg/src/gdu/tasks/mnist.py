"""MNIST in IDX format, pixel permutation, and the sequential pMNIST task.

IDX files are big-endian. An image file has magic ``0x00000803``, then the
count, rows and columns as u32, then ``count*rows*cols`` unsigned bytes. A
label file has magic ``0x00000801``, then the count, then ``count`` bytes.
Files ending in ``.gz`` are decompressed transparently.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..bptt import Batch
from ..errors import ConfigurationError, IngestionError
from ..numerics import Rng
from .base import Task, accuracy, final_outputs

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
ENV_DIR = "GDU_MNIST_DIR"
TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


@dataclass
class MnistSet:
    pixels: np.ndarray  # (n, rows*cols) uint8, in presentation order
    labels: np.ndarray  # (n,) int64
    permutation: Optional[np.ndarray] = None  # column order applied to the raw pixels

    def __len__(self):
        return len(self.labels)

    @property
    def images(self) -> np.ndarray:
        return self.pixels / 255.0

    def to_batch(self, idx=None) -> Batch:
        px = self.pixels if idx is None else self.pixels[idx]
        x = (px.T / 255.0)[:, :, None]  # (784, n, 1)
        lab = self.labels if idx is None else self.labels[idx]
        return Batch(np.ascontiguousarray(x), lab)

    def subset(self, n: int) -> "MnistSet":
        return MnistSet(self.pixels[:n], self.labels[:n], self.permutation)


def _read(path) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    try:
        with opener(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}", offset=0) from exc


def _header(buf: bytes, path, n_dims: int, magic: int):
    need = 4 * (1 + n_dims)
    if len(buf) < need:
        raise IngestionError(f"{path}: truncated header ({len(buf)} of {need} bytes)", offset=len(buf))
    fields = struct.unpack(f">{1 + n_dims}I", buf[:need])
    if fields[0] != magic:
        raise IngestionError(f"{path}: bad magic 0x{fields[0]:08x}, expected 0x{magic:08x}", offset=0)
    return fields[1:], need


def read_idx_images(path) -> np.ndarray:
    buf = _read(path)
    (count, rows, cols), off = _header(buf, path, 3, IMAGE_MAGIC)
    size = count * rows * cols
    if len(buf) - off < size:
        raise IngestionError(f"{path}: truncated body, {len(buf) - off} of {size} pixel bytes", offset=len(buf))
    if len(buf) - off > size:
        raise IngestionError(f"{path}: {len(buf) - off - size} trailing bytes after {count} images",
                             offset=off + size)
    return np.frombuffer(buf, dtype=np.uint8, count=size, offset=off).reshape(count, rows * cols).copy()


def read_idx_labels(path) -> np.ndarray:
    buf = _read(path)
    (count,), off = _header(buf, path, 1, LABEL_MAGIC)
    if len(buf) - off < count:
        raise IngestionError(f"{path}: truncated body, {len(buf) - off} of {count} labels", offset=len(buf))
    if len(buf) - off > count:
        raise IngestionError(f"{path}: {len(buf) - off - count} trailing bytes after {count} labels",
                             offset=off + count)
    labels = np.frombuffer(buf, dtype=np.uint8, count=count, offset=off).astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise IngestionError(f"{path}: label {labels[bad[0]]} out of range", offset=off + int(bad[0]))
    return labels


def load_mnist_idx(images_path, labels_path) -> MnistSet:
    pixels = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(pixels) != len(labels):
        raise IngestionError(f"{images_path} has {len(pixels)} images but {labels_path} has {len(labels)} labels",
                             offset=4)
    return MnistSet(pixels, labels)


def write_idx_images(path, pixels: np.ndarray, rows: int, cols: int) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(pixels), rows * cols)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">4I", IMAGE_MAGIC, len(pixels), rows, cols))
        fh.write(pixels.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">2I", LABEL_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def random_permutation(rng: Rng, n: int) -> np.ndarray:
    """Uniform permutation of ``range(n)`` by an explicit Fisher-Yates shuffle."""
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def permute_pixels(data: MnistSet, perm: np.ndarray) -> MnistSet:
    perm = np.asarray(perm)
    if sorted(perm.tolist()) != list(range(data.pixels.shape[1])):
        raise ConfigurationError("pixel permutation must be a permutation of all pixel indices")
    composed = perm if data.permutation is None else data.permutation[perm]
    return MnistSet(data.pixels[:, perm], data.labels, composed)


def inverse_permutation(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return inv


def find_mnist(directory: Optional[str] = None):
    """Locate the four IDX files (optionally gzipped); ``None`` if absent."""
    directory = directory or os.environ.get(ENV_DIR)
    if not directory or not os.path.isdir(directory):
        return None
    found = []
    for name in TRAIN_FILES + TEST_FILES:
        for cand in (name, name + ".gz", name.replace("-idx", ".idx")):
            path = os.path.join(directory, cand)
            if os.path.exists(path):
                found.append(path)
                break
        else:
            return None
    return found


class PMnistTask(Task):
    """Permuted pixel-by-pixel MNIST: 784 steps of one grey value each."""

    name = "pmnist"
    input_size = 1
    output_size = 10
    loss_kind = "softmax_ce_final"
    stop_rule = "none"
    default_batch_size = 100
    metric_name = "test_accuracy"

    def __init__(self, train: MnistSet, test: MnistSet, perm_seed: int = 0, train_size: Optional[int] = None,
                 test_size: Optional[int] = None, permute: bool = True):
        self.perm_seed = perm_seed
        if train_size:
            train = train.subset(train_size)
        if test_size:
            test = test.subset(test_size)
        if permute:
            perm = random_permutation(Rng(perm_seed).spawn(7), train.pixels.shape[1])
            train, test = permute_pixels(train, perm), permute_pixels(test, perm)
        self.train_data, self.test_data = train, test
        self.test = test.to_batch()

    @classmethod
    def from_dir(cls, directory: Optional[str] = None, **kw) -> "PMnistTask":
        paths = find_mnist(directory)
        if paths is None:
            raise IngestionError(f"MNIST IDX files not found (set {ENV_DIR})", offset=0)
        return cls(load_mnist_idx(paths[0], paths[1]), load_mnist_idx(paths[2], paths[3]), **kw)

    def train_batch(self, rng, batch_size):
        idx = rng.integers(0, len(self.train_data), size=batch_size)
        return self.train_data.to_batch(idx)

    def evaluate(self, params, config):
        logits = final_outputs(params, config, self.test.inputs, chunk=500)
        return {"test_metric": accuracy(logits, self.test_data.labels)}

    def describe(self):
        return {"task": self.name, "perm_seed": self.perm_seed, "train_size": len(self.train_data),
                "test_size": len(self.test_data)}
