"""File formats: tensor container, MNIST IDX, CIFAR-10 binary, PGM, CSV, config.

Tensor container layout (all integers little-endian)::

    b"PCT1"  u32 count
    repeated count times:
        u32 name_length, UTF-8 name,
        u8 dtype (0 = float64, 1 = complex as float64 (re, im) pairs),
        u8 rank, u32 dims[rank], payload
"""

from __future__ import annotations

import csv
import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, FormatError

MAGIC = b"PCT1"
DTYPE_REAL = 0
DTYPE_COMPLEX = 1
_DTYPES = {DTYPE_REAL: np.dtype("<f8"), DTYPE_COMPLEX: np.dtype("<c16")}

DATA_ENV = "PHASECOLLAPSE_DATA"

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 3073


# --------------------------------------------------------------------------
# tensor container


def write_tensors(path, tensors: dict):
    """Write named arrays to a ``PCT1`` container.

    Complex arrays are stored as float64 pairs, everything else as float64.
    """
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, array in tensors.items():
        array = np.asarray(array)
        tag = DTYPE_COMPLEX if np.iscomplexobj(array) else DTYPE_REAL
        data = np.asarray(array, dtype=_DTYPES[tag], order="C")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", tag, data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_tensors(path) -> dict:
    """Read every array of a ``PCT1`` container, preserving order."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}", offset=0)
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"truncated container: need {n} bytes", offset=pos)
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        start = pos
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not UTF-8", offset=start) from exc
        tag_pos = pos
        tag, rank = struct.unpack("<BB", take(2))
        if tag not in _DTYPES:
            raise FormatError(f"unknown dtype tag {tag}", offset=tag_pos)
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = _DTYPES[tag]
        size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        payload = take(size)
        flat = np.frombuffer(payload, dtype=dtype).astype(dtype.newbyteorder("="))
        tensors[name] = np.reshape(flat, dims)
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes", offset=pos)
    return tensors


# --------------------------------------------------------------------------
# datasets


@dataclass
class DatasetBatch:
    """Images ``(n, C, H, W)`` scaled to ``[0, 1]`` with integer labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, indices) -> "DatasetBatch":
        return DatasetBatch(self.images[indices], self.labels[indices])


def _read_maybe_gzip(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _read_idx(path, expected_magic, header_dims):
    raw = _read_maybe_gzip(path)
    header = 4 * (1 + header_dims)
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header", offset=len(raw))
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    dims = struct.unpack(f">{header_dims}I", raw[4:header])
    size = int(np.prod(dims, dtype=np.int64))
    if len(raw) < header + size:
        raise FormatError(f"{path}: truncated IDX payload, expected {size} bytes", offset=len(raw))
    if len(raw) > header + size:
        raise FormatError(f"{path}: {len(raw) - header - size} trailing bytes", offset=header + size)
    return dims, np.frombuffer(raw, dtype=np.uint8, offset=header)


def load_mnist(images_path, labels_path) -> DatasetBatch:
    """Decode an MNIST IDX image/label file pair (optionally gzipped)."""
    (n, rows, cols), pixels = _read_idx(images_path, IDX_IMAGES, 3)
    (m,), labels = _read_idx(labels_path, IDX_LABELS, 1)
    if n != m:
        raise FormatError(f"{n} images but {m} labels", offset=4)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"label {labels[bad]} out of range", offset=8 + bad)
    images = pixels.reshape(n, 1, rows, cols).astype(np.float64) / 255.0
    return DatasetBatch(images, labels.astype(np.int64))


def load_cifar10(bin_paths) -> DatasetBatch:
    """Decode CIFAR-10 binary batches of 3073-byte records into one dataset."""
    if isinstance(bin_paths, (str, os.PathLike)):
        bin_paths = [bin_paths]
    images, labels = [], []
    for path in bin_paths:
        raw = Path(path).read_bytes()
        if len(raw) % CIFAR_RECORD:
            whole = len(raw) - len(raw) % CIFAR_RECORD
            raise FormatError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}", offset=whole)
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if records.size and records[:, 0].max() > 9:
            bad = int(np.argmax(records[:, 0] > 9))
            raise FormatError(f"{path}: label {records[bad, 0]} out of range", offset=bad * CIFAR_RECORD)
        labels.append(records[:, 0].astype(np.int64))
        images.append(records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    if not images:
        return DatasetBatch(np.zeros((0, 3, 32, 32)), np.zeros(0, np.int64))
    return DatasetBatch(np.concatenate(images), np.concatenate(labels))


def data_root(root=None) -> Path:
    """Dataset root from the argument, else ``$PHASECOLLAPSE_DATA``, else ``./data``."""
    return Path(root or os.environ.get(DATA_ENV) or "data")


def _first_existing(candidates):
    for c in candidates:
        if c.exists():
            return c
    return candidates[0]


def mnist_paths(root=None, split="train"):
    base = data_root(root)
    prefix = "train" if split == "train" else "t10k"
    out = []
    for kind in ("images-idx3-ubyte", "labels-idx1-ubyte"):
        names = [f"{prefix}-{kind}", f"{prefix}-{kind}.gz"]
        out.append(_first_existing([d / n for d in (base / "mnist", base) for n in names]))
    return tuple(out)


def cifar10_paths(root=None, split="train"):
    base = data_root(root)
    folder = _first_existing([base / "cifar-10-batches-bin", base / "cifar10", base])
    if split == "train":
        return [folder / f"data_batch_{i}.bin" for i in range(1, 6)]
    return [folder / "test_batch.bin"]


def load_dataset(name, split="train", root=None) -> DatasetBatch:
    if name == "mnist":
        return load_mnist(*mnist_paths(root, split))
    if name == "cifar10":
        return load_cifar10(cifar10_paths(root, split))
    raise ConfigError(f"unknown dataset {name!r}")


def dataset_available(name, root=None) -> bool:
    if name == "mnist":
        paths = [*mnist_paths(root, "train"), *mnist_paths(root, "test")]
    else:
        paths = cifar10_paths(root, "train") + cifar10_paths(root, "test")
    return all(Path(p).exists() for p in paths)


# --------------------------------------------------------------------------
# images


def to_bytes(a) -> np.ndarray:
    """Max-normalize a real 2-D array to 8 bits.

    Nonnegative arrays map ``[0, max]`` to ``[0, 255]``; signed arrays map
    ``[-max|a|, max|a|]`` to ``[0, 255]`` so that zero is mid-grey.
    """
    a = np.asarray(a, dtype=float)
    peak = np.max(np.abs(a)) if a.size else 0.0
    if peak == 0:
        return np.zeros(a.shape, np.uint8)
    scaled = 255 * a / peak if a.min() >= 0 else 127.5 * (1 + a / peak)
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def write_pgm(path, a):
    """Write a real 2-D array as a binary (P5) PGM, max-normalized."""
    data = to_bytes(a)
    H, W = data.shape
    Path(path).write_bytes(f"P5\n{W} {H}\n255\n".encode() + data.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) into ``(C, H, W)`` floats in ``[0, 1]``."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header", offset=pos)
        tokens.append(raw[start:pos])
    pos += 1
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported magic {magic!r}", offset=0)
    W, H, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise FormatError(f"{path}: 16-bit images are not supported", offset=pos)
    C = 1 if magic == b"P5" else 3
    need = W * H * C
    if len(raw) - pos < need:
        raise FormatError(f"{path}: truncated pixel data", offset=len(raw))
    pixels = np.frombuffer(raw, np.uint8, count=need, offset=pos).reshape(H, W, C)
    return pixels.transpose(2, 0, 1).astype(np.float64) / maxval


# --------------------------------------------------------------------------
# CSV and config


def append_csv(path, header, row):
    """Append one row, writing the header first if the file is new or empty."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(header)
        writer.writerow(row)


def _bool(text):
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text):
    text = text.strip()
    if text.lower() in ("", "none"):
        return ()
    return tuple(int(t) for t in text.replace(",", " ").split())


def _optional_int(text):
    return None if text.strip().lower() == "none" else int(text)


CONFIG_KEYS = {
    # network
    "depth": int,
    "widths": _ints,
    "L": int,
    "nonlin": str,
    "skip": _bool,
    "subsample_period": int,
    "seed": int,
    "learned": _bool,
    "in_channels": int,
    "image_size": int,
    "grid": _optional_int,
    # training
    "dataset": str,
    "n_train": _optional_int,
    "n_test": _optional_int,
    "lr": float,
    "momentum": float,
    "weight_decay": float,
    "batch_size": int,
    "epochs": int,
    "lr_period": _optional_int,
    "augment": _bool,
    "dtype": str,
    "checkpoint_every": int,
}

NETWORK_KEYS = ("depth", "widths", "L", "nonlin", "skip", "subsample_period", "seed",
                "learned", "in_channels", "image_size", "grid")


def parse_config(text: str) -> dict:
    """Parse ``key = value`` lines with ``#`` comments into typed values.

    Unknown keys, duplicate keys and malformed lines raise :class:`ConfigError`
    naming the line number.
    """
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = CONFIG_KEYS[key](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return values


def read_config(path) -> dict:
    return parse_config(Path(path).read_text())


def format_config(values: dict) -> str:
    lines = []
    for key, value in values.items():
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value) or "none"
        elif isinstance(value, bool):
            value = "yes" if value else "no"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
