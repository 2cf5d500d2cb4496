"""MNIST ingestion: IDX parsing, normalization and stratified partitioning."""

import gzip
import hashlib
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .defaults import KpiNames
from .errors import DataError, IdxFormatError

UBYTE = 0x08

# Element type code -> element size in bytes. Only unsigned bytes are read.
ELEMENT_SIZES: Dict[int, int] = {UBYTE: 1}

GZIP_MAGIC = b"\x1f\x8b"


class MnistFiles:
    """Accepted file names of the four MNIST IDX files."""

    TRAIN_IMAGES: List[str] = ["train-images-idx3-ubyte", "train-images.idx3-ubyte"]
    TRAIN_LABELS: List[str] = ["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"]
    TEST_IMAGES: List[str] = ["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"]
    TEST_LABELS: List[str] = ["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"]

    TRAIN_SIZE: int = 60000
    TEST_SIZE: int = 10000

    IMAGE_ROWS: int = 28
    IMAGE_COLS: int = 28

    @staticmethod
    def find(directory: Path, names: Sequence[str]) -> Path:
        """
        Locate one of ``names`` (optionally with a .gz suffix) inside ``directory``.

        Args:
            directory: Directory to search
            names: Candidate base file names

        Returns:
            Path of the first candidate that exists

        Raises:
            DataError: If no candidate exists
        """
        for name in names:
            for candidate in (directory / name, directory / f"{name}.gz"):
                if candidate.is_file():
                    return candidate
        raise DataError(f"Missing MNIST file {names[0]}[.gz] in {directory}")


@dataclass(eq=False)
class IdxTensor:
    """Raw IDX container contents."""

    element_type: int
    dims: Tuple[int, ...]
    data: bytes

    def to_array(self) -> np.ndarray:
        return np.frombuffer(self.data, dtype=np.uint8).reshape(self.dims)

    def __eq__(self, other) -> bool:
        if not isinstance(other, IdxTensor):
            return NotImplemented
        return (
            self.element_type == other.element_type
            and tuple(self.dims) == tuple(other.dims)
            and bytes(self.data) == bytes(other.data)
        )


@dataclass(eq=False)
class LabeledDataset:
    """Images normalized to [0, 1] with one class label per row."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return int(self.images.shape[1])

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(images=self.images[idx], labels=self.labels[idx])


@dataclass(eq=False)
class PartitionPlan:
    """Disjoint per-participant index sets; part i belongs to participant i."""

    n_parts: int
    parts: List[np.ndarray]
    seed: int

    @property
    def sizes(self) -> List[int]:
        return [len(p) for p in self.parts]

    def fingerprint(self) -> str:
        digest = hashlib.md5(f"{self.n_parts}:{self.seed}".encode())
        for part in self.parts:
            digest.update(np.asarray(part, dtype=np.int64).tobytes())
            digest.update(b"|")
        return digest.hexdigest()


def parse_idx(raw: bytes) -> IdxTensor:
    """
    Parse an IDX container.

    Layout: two zero bytes, element type code, dimension count, one
    big-endian 32-bit size per dimension, then the payload.

    Args:
        raw: File contents (already decompressed)

    Returns:
        Parsed tensor

    Raises:
        IdxFormatError: Bad magic, unsupported type, or payload length mismatch
    """
    if len(raw) < 4:
        raise IdxFormatError(f"IDX header truncated: {len(raw)} bytes")
    if raw[0] != 0 or raw[1] != 0:
        raise IdxFormatError(f"malformed IDX magic: leading bytes {raw[0]:#04x} {raw[1]:#04x}")
    type_code, n_dims = raw[2], raw[3]
    if type_code not in ELEMENT_SIZES:
        raise IdxFormatError(f"unsupported IDX element type {type_code:#04x}")

    header_size = 4 + 4 * n_dims
    if len(raw) < header_size:
        raise IdxFormatError(f"IDX header truncated: expected {header_size} bytes, got {len(raw)}")
    dims = struct.unpack(f">{n_dims}I", raw[4:header_size])

    expected = math.prod(dims) * ELEMENT_SIZES[type_code] if n_dims else 0
    payload = raw[header_size:]
    if len(payload) != expected:
        kind = "truncated" if len(payload) < expected else "over-long"
        raise IdxFormatError(f"IDX payload {kind}: expected {expected} bytes, got {len(payload)}")
    return IdxTensor(element_type=type_code, dims=tuple(dims), data=bytes(payload))


def serialize_idx(tensor: IdxTensor) -> bytes:
    """Inverse of ``parse_idx``."""
    header = bytes([0, 0, tensor.element_type, len(tensor.dims)])
    return header + struct.pack(f">{len(tensor.dims)}I", *tensor.dims) + bytes(tensor.data)


def read_idx_file(path: Path) -> IdxTensor:
    """
    Read and parse an IDX file, transparently gunzipping it.

    Args:
        path: File to read

    Returns:
        Parsed tensor

    Raises:
        DataError: If the file is unreadable or malformed (message names the file)
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
        if raw[:2] == GZIP_MAGIC:
            raw = gzip.decompress(raw)
    except (OSError, EOFError, zlib.error) as e:
        raise DataError(f"Cannot read {path}: {e}") from e
    try:
        return parse_idx(raw)
    except IdxFormatError as e:
        raise IdxFormatError(f"{path}: {e}") from e


def _to_dataset(images: IdxTensor, labels: IdxTensor, image_path: Path, label_path: Path) -> LabeledDataset:
    if len(images.dims) != 3:
        raise DataError(f"{image_path}: expected 3 image dimensions, got {list(images.dims)}")
    if tuple(images.dims[1:]) != (MnistFiles.IMAGE_ROWS, MnistFiles.IMAGE_COLS):
        raise DataError(
            f"{image_path}: expected {MnistFiles.IMAGE_ROWS}x{MnistFiles.IMAGE_COLS} images, "
            f"got {images.dims[1]}x{images.dims[2]}"
        )
    if len(labels.dims) != 1:
        raise DataError(f"{label_path}: expected 1 label dimension, got {list(labels.dims)}")
    if images.dims[0] != labels.dims[0]:
        raise DataError(
            f"{image_path} has {images.dims[0]} images but {label_path} has {labels.dims[0]} labels"
        )

    label_array = labels.to_array().astype(np.int64)
    if len(label_array) and label_array.max() >= KpiNames.N_CLASSES:
        raise DataError(f"{label_path}: label {label_array.max()} out of range 0..{KpiNames.N_CLASSES - 1}")

    n, rows, cols = images.dims
    pixels = images.to_array().reshape(n, rows * cols).astype(np.float32) / np.float32(255.0)
    return LabeledDataset(images=pixels, labels=label_array)


def load_split(directory, image_names: Sequence[str], label_names: Sequence[str]) -> LabeledDataset:
    """Load one images/labels pair from ``directory``."""
    directory = Path(directory)
    image_path = MnistFiles.find(directory, image_names)
    label_path = MnistFiles.find(directory, label_names)
    return _to_dataset(read_idx_file(image_path), read_idx_file(label_path), image_path, label_path)


def load_mnist(directory) -> Tuple[LabeledDataset, LabeledDataset]:
    """
    Load the MNIST train and test splits.

    Args:
        directory: Directory holding the four IDX files (optionally gzipped)

    Returns:
        Tuple of (train, test) with pixels scaled to [0, 1]

    Raises:
        DataError: Missing directory or file, malformed file, count mismatch
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"MNIST directory not found: {directory}")
    train = load_split(directory, MnistFiles.TRAIN_IMAGES, MnistFiles.TRAIN_LABELS)
    test = load_split(directory, MnistFiles.TEST_IMAGES, MnistFiles.TEST_LABELS)
    return train, test


def label_histogram(dataset: LabeledDataset, n_classes: int = KpiNames.N_CLASSES) -> List[int]:
    """Number of samples per class."""
    return np.bincount(np.asarray(dataset.labels, dtype=np.int64), minlength=n_classes).tolist()


def stratified_partition(dataset: LabeledDataset, n_parts: int, seed: int) -> PartitionPlan:
    """
    Split a dataset into ``n_parts`` label-balanced parts.

    Indices of each class are shuffled with the seeded stream and dealt
    round-robin; dealing continues where the previous class stopped, so part
    sizes differ by at most one and per-class counts differ by at most one.

    Args:
        dataset: Dataset to split
        n_parts: Number of participants
        seed: Seed of the shuffling stream

    Returns:
        Partition plan with sorted index arrays

    Raises:
        ValueError: If n_parts is 0 or exceeds the dataset size
    """
    if n_parts < 1:
        raise ValueError(f"n_parts must be >= 1, got {n_parts}")
    if n_parts > len(dataset):
        raise ValueError(f"n_parts ({n_parts}) exceeds dataset size ({len(dataset)})")

    rng = np.random.default_rng(int(seed) & ((1 << 64) - 1))
    labels = np.asarray(dataset.labels, dtype=np.int64)
    buckets: List[List[np.ndarray]] = [[] for _ in range(n_parts)]
    offset = 0
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(len(members))]
        for part in range(n_parts):
            buckets[part].append(members[(part - offset) % n_parts::n_parts])
        offset = (offset + len(members)) % n_parts

    parts = [np.sort(np.concatenate(chunks)) if chunks else np.empty(0, dtype=np.int64) for chunks in buckets]
    return PartitionPlan(n_parts=n_parts, parts=parts, seed=int(seed))
