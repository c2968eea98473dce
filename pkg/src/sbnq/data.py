"""Dataset loading: IDX (MNIST) files, splits, batching and input quantization."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .itensor import IntTensor

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
VALIDATION_SIZE = 5000

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DatasetFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray  # uint8, (N, C, H, W)
    labels: np.ndarray  # int64, (N,)
    num_classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.dtype != np.uint8:
            raise TypeError("images must be uint8")
        if self.images.ndim == 3:
            self.images = self.images[:, None]
        if len(self.images) != len(self.labels):
            raise DatasetFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetFormatError("label outside [0, num_classes)")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes)


def read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise DatasetFormatError(f"{path}: corrupt gzip stream") from exc
    return raw


def parse_idx(raw: bytes, expected_magic: int, source: str = "<bytes>") -> np.ndarray:
    if len(raw) < 8:
        raise DatasetFormatError(f"{source}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DatasetFormatError(f"{source}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetFormatError(f"{source}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise DatasetFormatError(f"{source}: payload has {len(raw) - header} bytes, header says {count}")
    return np.frombuffer(raw, np.uint8, count, header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10) -> LabeledDataset:
    """Parse an IDX image/label file pair (gzip accepted)."""
    images = parse_idx(read_bytes(images_path), IDX_IMAGES_MAGIC, str(images_path))
    labels = parse_idx(read_bytes(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if len(images) != len(labels):
        raise DatasetFormatError(f"{len(images)} images but {len(labels)} labels")
    return LabeledDataset(images.copy(), labels.astype(np.int64), num_classes)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX; gzip-compressed when the name ends in .gz."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    blob = struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()
    path = Path(path)
    path.write_bytes(gzip.compress(blob, mtime=0) if path.suffix == ".gz" else blob)


def _find(directory: Path, stem: str) -> Path:
    for cand in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (directory / cand).is_file():
            return directory / cand
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def load_mnist_dir(directory, split: str = "train") -> LabeledDataset:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory {directory} does not exist")
    img, lab = MNIST_FILES[split]
    return load_idx(_find(directory, img), _find(directory, lab))


def split_validation(ds: LabeledDataset, size: int = VALIDATION_SIZE) -> tuple[LabeledDataset, LabeledDataset]:
    """Hold out the last ``size`` items (a tenth when the set is smaller than 10x that)."""
    n = len(ds)
    size = min(size, n // 10)
    cut = n - size
    return ds.subset(slice(0, cut)), ds.subset(slice(cut, n))


def to_u4(images) -> IntTensor:
    """8-bit pixels to 4-bit codes by an arithmetic shift: p >> 4."""
    return IntTensor(np.asarray(images, dtype=np.int64) >> 4, "u4")


def batches(ds: LabeledDataset, batch_size: int, shuffle: bool = False, seed: int = 0):
    order = np.random.default_rng(seed).permutation(len(ds)) if shuffle else np.arange(len(ds))
    for s in range(0, len(ds), batch_size):
        idx = order[s:s + batch_size]
        yield ds.images[idx], ds.labels[idx]


def read_image(path, shape: tuple[int, ...]) -> np.ndarray:
    """Load one grayscale image file as a (1, C, H, W) uint8 array."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    if arr.shape != tuple(shape[1:]) or shape[0] != 1:
        raise DatasetFormatError(f"image is {arr.shape}, model expects {shape}")
    return arr[None, None]
