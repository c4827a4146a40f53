"""MNIST / Fashion-MNIST IDX loading, normalization and deterministic batching."""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, LengthError, ValidationError
from .rng import derive_seed, fisher_yates

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
NUM_CLASSES = 10

SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def read_idx_bytes(path) -> bytes:
    """File contents, transparently gunzipped when they start with 1F 8B."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _header(buf, path, magic, n_dims):
    need = 4 * (1 + n_dims)
    if len(buf) < need:
        raise LengthError(f"{path}: header needs {need} bytes, file has {len(buf)}", expected=need, actual=len(buf))
    (found,) = struct.unpack(">I", buf[:4])
    if found != magic:
        raise FormatError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    return struct.unpack(f">{n_dims}I", buf[4:need]), need


def parse_idx_images(buf: bytes, path="<bytes>") -> np.ndarray:
    (count, rows, cols), start = _header(buf, path, IMAGE_MAGIC, 3)
    expected = count * rows * cols
    actual = len(buf) - start
    if actual != expected:
        raise LengthError(f"{path}: expected {expected} pixel bytes, found {actual}", expected=expected, actual=actual)
    return np.frombuffer(buf, dtype=np.uint8, offset=start).reshape(count, rows, cols)


def parse_idx_labels(buf: bytes, path="<bytes>") -> np.ndarray:
    (count,), start = _header(buf, path, LABEL_MAGIC, 1)
    actual = len(buf) - start
    if actual != count:
        raise LengthError(f"{path}: expected {count} label bytes, found {actual}", expected=count, actual=actual)
    labels = np.frombuffer(buf, dtype=np.uint8, offset=start)
    bad = np.flatnonzero(labels >= NUM_CLASSES)
    if bad.size:
        offset = start + int(bad[0])
        raise FormatError(f"{path}: label byte 0x{labels[bad[0]]:02X} at offset {offset} outside [0, 9]",
                          offset=offset)
    return labels


def load_idx_images(path) -> np.ndarray:
    """Raw uint8 images [count, rows, cols] from an IDX3 file."""
    return parse_idx_images(read_idx_bytes(path), path)


def load_idx_labels(path) -> np.ndarray:
    """Labels (uint8, each in 0..9) from an IDX1 file."""
    return parse_idx_labels(read_idx_bytes(path), path)


def normalize(raw) -> np.ndarray:
    """byte / 255.0 as a float64 tensor [1, rows, cols]."""
    raw = np.asarray(raw, dtype=np.uint8)
    return (raw.astype(np.float64) / 255.0)[None]


@dataclass(frozen=True)
class SplitManifest:
    name: str
    count: int
    image_sha256: str
    label_sha256: str


@dataclass
class Example:
    id: int
    image: np.ndarray
    label: int


@dataclass
class Split:
    """A loaded split. ``ids[k]`` is the position of row ``k`` in the source file."""

    name: str
    ids: np.ndarray
    images: np.ndarray  # float32 [n, 1, rows, cols] in [0, 1]
    labels: np.ndarray  # int64 [n]
    manifest: SplitManifest | None = None

    def __len__(self):
        return len(self.ids)

    def example(self, k: int) -> Example:
        return Example(id=int(self.ids[k]), image=self.images[k], label=int(self.labels[k]))

    def head(self, n: int) -> "Split":
        """First ``n`` examples by id (the whole split when ``n`` is 0 or too large)."""
        if n <= 0 or n >= len(self):
            return self
        return Split(self.name, self.ids[:n], self.images[:n], self.labels[:n], self.manifest)


def split_from_arrays(name, raw_images, labels, dtype=np.float32) -> Split:
    raw_images = np.asarray(raw_images, dtype=np.uint8)
    labels = np.asarray(labels)
    if len(raw_images) != len(labels):
        raise ValidationError(f"{name}: {len(raw_images)} images but {len(labels)} labels")
    images = (raw_images.astype(np.float64) / 255.0).astype(dtype)[:, None]
    return Split(name, np.arange(len(labels), dtype=np.int64), images, labels.astype(np.int64))


def find_split_files(data_dir, name):
    paths = []
    for stem in SPLIT_FILES[name]:
        for candidate in (Path(data_dir) / stem, Path(data_dir) / (stem + ".gz")):
            if candidate.exists():
                paths.append(candidate)
                break
        else:
            raise FileNotFoundError(f"{data_dir}: neither {stem} nor {stem}.gz found")
    return paths


def load_split(data_dir, name: str, limit: int = 0) -> Split:
    """Load ``train`` or ``test`` from ``data_dir``; keep the first ``limit`` ids when ``limit > 0``."""
    if name not in SPLIT_FILES:
        raise ValidationError(f"unknown split {name!r}")
    image_path, label_path = find_split_files(data_dir, name)
    image_bytes, label_bytes = read_idx_bytes(image_path), read_idx_bytes(label_path)
    raw = parse_idx_images(image_bytes, image_path)
    labels = parse_idx_labels(label_bytes, label_path)
    if len(raw) != len(labels):
        raise FormatError(f"{name}: {len(raw)} images but {len(labels)} labels")
    if limit > 0:
        raw, labels = raw[:limit], labels[:limit]
    split = split_from_arrays(name, raw, labels)
    split.manifest = SplitManifest(name, len(labels), hashlib.sha256(image_bytes).hexdigest(),
                                   hashlib.sha256(label_bytes).hexdigest())
    return split


@dataclass
class Batch:
    ids: np.ndarray
    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.ids)


def epoch_permutation(n: int, epoch_index: int, seed: int) -> np.ndarray:
    return np.asarray(fisher_yates(n, derive_seed(seed, epoch_index)), dtype=np.int64)


def make_batches(split: Split, batch_size: int, epoch_index: int, seed: int) -> list[Batch]:
    """Shuffle with Fisher-Yates keyed by (seed, epoch_index) and cut into batches.

    The final short batch is kept.
    """
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    if len(split) == 0:
        raise ValidationError(f"split {split.name!r} is empty")
    perm = epoch_permutation(len(split), epoch_index, seed)
    batches = []
    for start in range(0, len(perm), batch_size):
        rows = perm[start:start + batch_size]
        batches.append(Batch(split.ids[rows], split.images[rows], split.labels[rows]))
    return batches
