"""IDX (MNIST-style) and CSV ingestion."""
from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from flsim.data.dataset import Dataset
from flsim.errors import FormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


def _read_header(buf: bytes, magic: int, ndims: int, what: str):
    header_len = 4 + 4 * ndims
    if len(buf) < header_len:
        raise FormatError(f"{what} file truncated in header", offset=len(buf))
    (found,) = struct.unpack(">I", buf[:4])
    if found != magic:
        raise FormatError(f"{what} file has magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    dims = struct.unpack(f">{ndims}I", buf[4:header_len])
    return dims, header_len


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    img = Path(images_path).read_bytes()
    lab = Path(labels_path).read_bytes()
    (count, rows, cols), off = _read_header(img, IMAGES_MAGIC, 3, "image")
    expected = off + count * rows * cols
    if len(img) != expected:
        raise FormatError(f"image payload has {len(img) - off} bytes, expected {count * rows * cols}",
                          offset=min(len(img), expected))
    (nlab,), loff = _read_header(lab, LABELS_MAGIC, 1, "label")
    if nlab != count:
        raise FormatError(f"label count {nlab} != image count {count}", offset=4)
    if len(lab) != loff + nlab:
        raise FormatError(f"label payload has {len(lab) - loff} bytes, expected {nlab}",
                          offset=min(len(lab), loff + nlab))
    pixels = np.frombuffer(img, dtype=np.uint8, offset=off).reshape(count, rows * cols)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=loff).astype(np.int64)
    C = num_classes if num_classes is not None else int(labels.max()) + 1 if count else 1
    return Dataset(pixels.astype(np.float64) / 255.0, labels, max(C, 2))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path):
    """Inverse of :func:`load_idx` for uint8 images shaped (count, rows, cols)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    count, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGES_MAGIC, count, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABELS_MAGIC, len(labels)) + labels.tobytes())


def load_csv(path, label_column: int, header: bool = False, num_classes: int | None = None) -> Dataset:
    features, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for rowno, row in enumerate(reader, start=1):
            if header and rowno == 1:
                continue
            if not row:
                continue
            try:
                values = [float(v) for v in row]
            except ValueError as exc:
                raise FormatError(f"non-numeric field: {exc}", row=rowno) from None
            if not -len(values) <= label_column < len(values):
                raise FormatError(f"label column {label_column} out of range", row=rowno)
            label = values.pop(label_column)
            if label != int(label) or label < 0:
                raise FormatError(f"label {label} is not a non-negative integer", row=rowno)
            if features and len(values) != len(features[0]):
                raise FormatError("inconsistent number of fields", row=rowno)
            features.append(values)
            labels.append(int(label))
    y = np.array(labels, dtype=np.int64)
    C = num_classes if num_classes is not None else (int(y.max()) + 1 if len(y) else 2)
    X = np.array(features, dtype=np.float64).reshape(len(labels), -1)
    return Dataset(X, y, max(C, 2))
