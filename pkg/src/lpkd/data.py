"""Dataset parsing, splitting, batching and synthetic data."""

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray  # (n, *input_shape) float32
    labels: np.ndarray  # (n,) int64 class indices
    class_count: int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return self.inputs.shape[1:]

    def take(self, index, split=None):
        return Dataset(self.inputs[index], self.labels[index], self.class_count,
                       split or self.split)


def parse_idx(blob, raw=False):
    """Decode an IDX file held in memory.

    Label files (magic 0x801) become an int64 array of class indices.  Image
    files (magic 0x803) become float32 ``(n, rows, cols)`` scaled to [0, 1],
    or the raw uint8 bytes when ``raw`` is set.  Gzip input is detected and
    decompressed.
    """
    if blob[:2] == b"\x1f\x8b":
        blob = gzip.decompress(blob)
    if len(blob) < 8:
        raise IdxError(f"truncated header at byte {len(blob)}")
    (magic,) = struct.unpack_from(">I", blob, 0)
    if magic == LABELS_MAGIC:
        ndim = 1
    elif magic == IMAGES_MAGIC:
        ndim = 3
    else:
        raise IdxError(f"bad magic 0x{magic:08x} at byte 0")
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise IdxError(f"truncated dimension table at byte {len(blob)}")
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    count = int(np.prod(dims))
    if len(blob) - header < count:
        raise IdxError(f"payload truncated at byte {len(blob)}: "
                       f"dims {dims} need {count} bytes after offset {header}")
    if len(blob) - header > count:
        raise IdxError(f"dims {dims} account for {count} bytes but "
                       f"{len(blob) - header} follow offset {header}")
    data = np.frombuffer(blob, dtype=np.uint8, count=count, offset=header).reshape(dims)
    if magic == LABELS_MAGIC:
        return data.astype(np.int64)
    if raw:
        return data.copy()
    return data.astype(np.float32) / np.float32(255.0)


def to_idx(array):
    """Encode uint8 labels (1-D) or raw images (3-D) as IDX bytes."""
    arr = np.asarray(array)
    if arr.ndim == 1:
        magic = LABELS_MAGIC
    elif arr.ndim == 3:
        magic = IMAGES_MAGIC
    else:
        raise ValueError("IDX encoding supports 1-D labels or 3-D images")
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError("IDX byte payload must lie in [0, 255]")
    head = struct.pack(f">I{arr.ndim}I", magic, *arr.shape)
    return head + arr.astype(np.uint8).tobytes()


def read_idx(path, raw=False):
    return parse_idx(Path(path).read_bytes(), raw=raw)


def _find(directory, stem):
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        path = Path(directory) / name
        if path.exists():
            return path
    raise FileNotFoundError(f"no {stem}[.gz] under {directory}")


def load_mnist(directory, split="train"):
    """Load the official MNIST IDX pair as a Dataset with inputs (n, 1, 28, 28)."""
    prefix = {"train": "train", "test": "t10k"}[split]
    images = read_idx(_find(directory, f"{prefix}-images-idx3-ubyte"))
    labels = read_idx(_find(directory, f"{prefix}-labels-idx1-ubyte"))
    return Dataset(images[:, None, :, :], labels, 10, split)


def split_validation(ds, count):
    """Hold out the last ``count`` samples, in file order, for validation."""
    n = len(ds)
    if not 0 <= count < n:
        raise ValueError(f"validation count {count} must lie in [0, {n})")
    cut = n - count
    return ds.take(slice(0, cut), "train"), ds.take(slice(cut, n), "val")


@dataclass
class BatchPlan:
    seed: int = 0
    batch_size: int = 128
    drop_last: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")


def batch_indices(n, plan, epoch):
    """Index arrays of one epoch's mini-batches, from a seeded permutation."""
    if plan.batch_size > n:
        raise ValueError(f"batch size {plan.batch_size} exceeds dataset size {n}")
    perm = np.random.default_rng([plan.seed, epoch]).permutation(n)
    stop = n - n % plan.batch_size if plan.drop_last else n
    return [perm[i:i + plan.batch_size] for i in range(0, stop, plan.batch_size)]


def make_batches(ds, plan, epoch=0):
    """Yield ``(inputs, labels)`` mini-batches for ``epoch``."""
    for idx in batch_indices(len(ds), plan, epoch):
        yield ds.inputs[idx], ds.labels[idx]


def gen_blobs(classes, per_class, dim, spread, seed):
    """Isotropic Gaussian clusters around ``classes`` well-separated centers.

    Centers are drawn from ``N(0, 4 I)`` so typical center distances are
    about ``2*sqrt(2*dim)``; samples are shuffled so any file-order split
    mixes classes.
    """
    if classes < 2 or dim < 2 or not spread > 0:
        raise ValueError("need classes >= 2, dim >= 2 and spread > 0")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 2.0, size=(classes, dim))
    labels = np.repeat(np.arange(classes), per_class)
    inputs = centers[labels] + rng.normal(0.0, spread, size=(len(labels), dim))
    order = rng.permutation(len(labels))
    return Dataset(inputs[order].astype(np.float32), labels[order], classes)
