"""Datasets: MNIST IDX and CIFAR-10 binary readers, splitting, batching,
the fixed (non-learnable) baseline augmentation and a synthetic fixture."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

__all__ = [
    "Dataset",
    "SplitSpec",
    "FormatError",
    "read_idx",
    "write_idx",
    "load_mnist_idx",
    "load_cifar10_binary",
    "split",
    "baseline_augment",
    "synth_dataset",
    "iterate_batches",
    "CyclicBatches",
    "idx_from_csv",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
# digits must not be mirrored
_NO_FLIP = {"mnist", "svhn", "synth"}


class FormatError(ValueError):
    """Malformed dataset file; ``offset`` is the byte position of the problem."""

    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) ints in [0, num_classes)
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels outside [0, num_classes)")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, name or self.name)

    def astype(self, dtype) -> "Dataset":
        return Dataset(self.images.astype(dtype), self.labels, self.num_classes, self.name)


@dataclass(frozen=True)
class SplitSpec:
    validation_fraction: float = 0.10
    split_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError(f"validation_fraction must lie in (0, 1), got {self.validation_fraction}")


# ---------------------------------------------------------------- IDX
def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Parse an IDX file (optionally gzip-compressed) into an array."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError(path, len(raw), "file shorter than the 4-byte magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise FormatError(path, 0, f"magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 16 != 0:
        raise FormatError(path, 0, f"bad magic 0x{magic:08x}")
    code, ndim = (magic >> 8) & 0xFF, magic & 0xFF
    if code not in _IDX_DTYPES:
        raise FormatError(path, 2, f"unknown IDX data type 0x{code:02x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(path, len(raw), "truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = _IDX_DTYPES[code]
    need = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - header < need:
        raise FormatError(path, len(raw), f"truncated payload: {len(raw) - header} of {need} bytes present")
    return np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> Path:
    """Write an unsigned-byte IDX file (``.gz`` suffix compresses)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    payload = header + array.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)
    return path


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_mnist_idx(path, split_name: str = "train", labels_path=None) -> Dataset:
    """Load MNIST-format IDX images and labels.

    ``path`` is either a directory holding the standard file names
    (``train-images-idx3-ubyte`` / ``t10k-images-idx3-ubyte`` and matching
    label files, optionally gzipped), or the image file itself together with
    ``labels_path``.
    """
    path = Path(path)
    if path.is_dir():
        prefix = "train" if split_name == "train" else "t10k"
        img_path = _find(path, f"{prefix}-images-idx3-ubyte")
        lbl_path = _find(path, f"{prefix}-labels-idx1-ubyte")
    else:
        if labels_path is None:
            raise ValueError("labels_path is required when path is an image file")
        img_path, lbl_path = path, Path(labels_path)
    images = read_idx(img_path, IDX_IMAGES_MAGIC)
    labels = read_idx(lbl_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(lbl_path, 4, f"{labels.shape[0]} labels for {images.shape[0]} images")
    x = (images.astype(np.float64) / 255.0)[:, None, :, :]
    return Dataset(x, labels.astype(np.int64), 10, name=f"mnist-{split_name}")


def idx_from_csv(csv_path, out_dir, test_per_class: int = 100, seed: int = 0) -> Path:
    """Convert a ``pixels..., label`` CSV of 28x28 digits into train/t10k IDX files.

    Each class contributes ``test_per_class`` rows to the test files; the
    rest go to the training files.  Row order is shuffled with ``seed``.
    """
    table = np.loadtxt(csv_path, delimiter=",", dtype=np.int64)
    if table.ndim != 2 or table.shape[1] != 28 * 28 + 1:
        raise FormatError(csv_path, 0, f"expected 785 columns, got shape {table.shape}")
    rng = np.random.default_rng(seed)
    labels = table[:, -1]
    test_idx, train_idx = [], []
    for c in np.unique(labels):
        rows = rng.permutation(np.nonzero(labels == c)[0])
        test_idx.append(rows[:test_per_class])
        train_idx.append(rows[test_per_class:])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for prefix, idx in (("train", np.concatenate(train_idx)), ("t10k", np.concatenate(test_idx))):
        idx = rng.permutation(idx)
        write_idx(out / f"{prefix}-images-idx3-ubyte", table[idx, :-1].reshape(-1, 28, 28))
        write_idx(out / f"{prefix}-labels-idx1-ubyte", labels[idx])
    return out


# ---------------------------------------------------------------- CIFAR-10
def load_cifar10_binary(path, split_name: str = "train") -> Dataset:
    """Load CIFAR-10 binary batches (1 label byte + 3072 R,G,B plane bytes per record).

    ``path`` may be one batch file, a list of files, or the
    ``cifar-10-batches-bin`` directory (``split_name`` picks train or test).
    """
    if isinstance(path, (list, tuple)):
        files = [Path(p) for p in path]
    else:
        path = Path(path)
        if path.is_dir():
            names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split_name == "train" else ["test_batch.bin"]
            files = [path / n for n in names]
        else:
            files = [path]
    chunks = []
    for f in files:
        raw = f.read_bytes()
        if len(raw) % CIFAR_RECORD:
            raise FormatError(f, len(raw) - len(raw) % CIFAR_RECORD, f"size {len(raw)} is not a multiple of {CIFAR_RECORD}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    records = np.concatenate(chunks) if chunks else np.zeros((0, CIFAR_RECORD), np.uint8)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(files[0], bad * CIFAR_RECORD, f"label {labels[bad]} out of range")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images, labels, 10, name=f"cifar10-{split_name}")


# ---------------------------------------------------------------- splitting
def split(dataset: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then hold out ``round(N * fraction)`` items for validation."""
    n = len(dataset)
    n_val = int(round(n * spec.validation_fraction))
    perm = np.random.default_rng(spec.split_seed).permutation(n)
    val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    return (
        dataset.subset(train_idx, dataset.name + "-train"),
        dataset.subset(val_idx, dataset.name + "-val"),
    )


# ---------------------------------------------------------------- batching
def iterate_batches(
    dataset: Dataset, batch_size: int, rng: np.random.Generator | None = None, drop_last: bool = False
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    n = len(dataset)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if drop_last and idx.size < batch_size:
            return
        yield dataset.images[idx], dataset.labels[idx]


class CyclicBatches:
    """Endless minibatches, reshuffled every pass."""

    def __init__(self, dataset: Dataset, batch_size: int, seed: int, drop_last: bool = False):
        if len(dataset) == 0 or (drop_last and len(dataset) < batch_size):
            raise ValueError(f"CyclicBatches: {len(dataset)} items never fill a batch of {batch_size}")
        self.dataset = dataset
        self.batch_size = batch_size
        self.drop_last = drop_last
        self.rng = np.random.default_rng(seed)
        self._it = iter(())

    def __iter__(self):
        return self

    def __next__(self):
        try:
            return next(self._it)
        except StopIteration:
            self._it = iterate_batches(self.dataset, self.batch_size, self.rng, self.drop_last)
            return next(self._it)


# ---------------------------------------------------------------- baseline augmentation
def baseline_augment(batch: np.ndarray, dataset_kind: str, rng_seed=None, pad: int = 4) -> np.ndarray:
    """Zero-pad by ``pad``, random crop back to size, random horizontal flip.

    Plain numpy; never recorded on a tape.  Flipping is skipped for digit
    datasets.
    """
    rng = np.random.default_rng(rng_seed)
    b, c, h, w = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oy = rng.integers(0, 2 * pad + 1, size=b)
    ox = rng.integers(0, 2 * pad + 1, size=b)
    flip = rng.random(b) < 0.5
    out = np.empty_like(batch)
    for i in range(b):
        crop = padded[i, :, oy[i] : oy[i] + h, ox[i] : ox[i] + w]
        if flip[i] and dataset_kind not in _NO_FLIP:
            crop = crop[..., ::-1]
        out[i] = crop
    return out


# ---------------------------------------------------------------- synthetic fixture
def synth_dataset(n: int, classes: int = 4, seed: int = 0, size: int = 16, noise: float = 0.05) -> Dataset:
    """Gaussian blobs whose centre encodes the class, on 1 x size x size canvases."""
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(classes) / classes
    radius = size / 4.0
    centres = np.stack([size / 2 - 0.5 + radius * np.sin(angles), size / 2 - 0.5 + radius * np.cos(angles)], axis=1)
    labels = rng.integers(0, classes, size=n)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    jitter = rng.normal(scale=0.5, size=(n, 2))
    cy = centres[labels, 0] + jitter[:, 0]
    cx = centres[labels, 1] + jitter[:, 1]
    amp = rng.uniform(0.7, 1.0, size=n)
    d2 = (yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2
    images = amp[:, None, None] * np.exp(-d2 / (2 * 1.5**2))
    images = np.clip(images + rng.normal(scale=noise, size=images.shape), 0.0, 1.0)
    return Dataset(images[:, None], labels.astype(np.int64), classes, name="synth")
