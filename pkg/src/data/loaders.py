import gzip
import struct

import numpy as np
import pandas as pd

from src.model import Batch
from src.utils import FormatError



IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
IDX_NUM_CLASSES = 10


def _read_bytes(path):
    opener = gzip.open if str(path).endswith('.gz') else open
    try:
        with opener(path, 'rb') as f:
            return f.read()
    except OSError as err:
        raise FormatError(f"{path}: cannot read ({err})") from err


def _read_header(raw, path, n_fields):
    # big-endian unsigned 32-bit fields
    if len(raw) < 4 * n_fields:
        raise FormatError(f"{path}: truncated header")
    return struct.unpack('>' + 'I' * n_fields, raw[:4 * n_fields])


def load_idx_images(images_path, labels_path):
    """
    Read an IDX image/label file pair.

    Args:
        images_path:    IDX3 file, header (magic 0x803, count, rows, cols) then u8 pixels
        labels_path:    IDX1 file, header (magic 0x801, count) then u8 labels

    Returns:
        batch:          Flattened images scaled to [0, 1] with labels in [0, 10)
    """
    raw_images = _read_bytes(images_path)
    magic, count, rows, cols = _read_header(raw_images, images_path, 4)
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{images_path}: bad magic number 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    pixels = np.frombuffer(raw_images, dtype=np.uint8, offset=16)
    if pixels.size != count * rows * cols:
        raise FormatError(f"{images_path}: expected {count * rows * cols} pixels, found {pixels.size}")

    raw_labels = _read_bytes(labels_path)
    magic, n_labels = _read_header(raw_labels, labels_path, 2)
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"{labels_path}: bad magic number 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    labels = np.frombuffer(raw_labels, dtype=np.uint8, offset=8)
    if labels.size != n_labels:
        raise FormatError(f"{labels_path}: expected {n_labels} labels, found {labels.size}")
    if n_labels != count:
        raise FormatError(f"image count {count} does not match label count {n_labels}")
    if labels.size and labels.max() >= IDX_NUM_CLASSES:
        raise FormatError(f"{labels_path}: label {labels.max()} outside [0, {IDX_NUM_CLASSES})")

    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.
    return Batch(features, labels.astype(np.int64))


def load_csv(path, label_column='label'):
    """
    Read a numeric CSV with a header row.

    Args:
        path:           CSV file (comma-separated, UTF-8)
        label_column:   Column holding integer labels; all others are features, in header order

    Returns:
        batch:          Features and labels
    """
    try:
        df = pd.read_csv(path, encoding='utf-8', float_precision='round_trip')
    except pd.errors.EmptyDataError as err:
        raise FormatError(f"{path}: empty file") from err
    except (OSError, UnicodeDecodeError, pd.errors.ParserError) as err:
        raise FormatError(f"{path}: {err}") from err
    if label_column not in df.columns:
        raise FormatError(f"{path}: missing label column '{label_column}'")
    if df.empty:
        raise FormatError(f"{path}: no data rows")
    try:
        df = df.apply(pd.to_numeric, errors='raise')
    except (ValueError, TypeError) as err:
        raise FormatError(f"{path}: non-numeric cell ({err})") from err
    if df.isna().any().any():
        raise FormatError(f"{path}: missing cell")
    labels = df[label_column].to_numpy(dtype=np.float64)
    if np.any(labels != np.round(labels)) or np.any(labels < 0):
        raise FormatError(f"{path}: labels must be non-negative integers")
    features = df.drop(columns=[label_column]).to_numpy(dtype=np.float64)
    return Batch(features, labels.astype(np.int64))
