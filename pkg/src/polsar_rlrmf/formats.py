"""Fixed-layout binary formats.

PFC raster:  b"PFC1" | u32 H | u32 W | u32 D | H*W*D float32, pixel-major then band
PLM labels:  b"PLM1" | u32 H | u32 W | u16 C | H*W u16 labels

All integers and floats are little-endian. ``render_ppm`` writes a binary
P6 image with a fixed 16-colour palette indexed by label.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .data import FeatureImage, LabelMap

PFC_MAGIC = b"PFC1"
PLM_MAGIC = b"PLM1"
_PFC_HEADER = struct.Struct("<4sIII")
_PLM_HEADER = struct.Struct("<4sIIH")
# guard against headers that would make us allocate absurd buffers
MAX_ELEMENTS = 1 << 31


class FormatError(Exception):
    """Base class for malformed raster/label/checkpoint files."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class DimensionError(FormatError):
    pass


def _read(path) -> bytes:
    return Path(path).read_bytes()


def _check_dims(*dims):
    n = 1
    for d in dims:
        if d < 1:
            raise DimensionError(f"non-positive dimension in header: {dims}")
        n *= d
    if n > MAX_ELEMENTS:
        raise DimensionError(f"dimensions {dims} exceed the {MAX_ELEMENTS}-element limit")
    return n


def save_raster(img: FeatureImage, path) -> None:
    h, w, d = img.data.shape
    payload = np.ascontiguousarray(img.data, dtype="<f4").tobytes()
    Path(path).write_bytes(_PFC_HEADER.pack(PFC_MAGIC, h, w, d) + payload)


def load_raster(path) -> FeatureImage:
    buf = _read(path)
    if len(buf) < 4 or buf[:4] != PFC_MAGIC:
        raise BadMagicError(f"{path}: bad magic, expected {PFC_MAGIC!r}")
    if len(buf) < _PFC_HEADER.size:
        raise TruncatedError(f"{path}: truncated header")
    _, h, w, d = _PFC_HEADER.unpack_from(buf)
    n = _check_dims(h, w, d)
    need = _PFC_HEADER.size + 4 * n
    if len(buf) < need:
        raise TruncatedError(f"{path}: payload has {len(buf) - _PFC_HEADER.size} bytes, need {4 * n}")
    if len(buf) > need:
        raise FormatError(f"{path}: {len(buf) - need} trailing bytes")
    a = np.frombuffer(buf, dtype="<f4", count=n, offset=_PFC_HEADER.size)
    return FeatureImage(a.reshape(h, w, d).astype(np.float64))


def save_labels(lm: LabelMap, path) -> None:
    h, w = lm.labels.shape
    payload = np.ascontiguousarray(lm.labels, dtype="<u2").tobytes()
    Path(path).write_bytes(_PLM_HEADER.pack(PLM_MAGIC, h, w, lm.num_classes) + payload)


def load_labels(path) -> LabelMap:
    buf = _read(path)
    if len(buf) < 4 or buf[:4] != PLM_MAGIC:
        raise BadMagicError(f"{path}: bad magic, expected {PLM_MAGIC!r}")
    if len(buf) < _PLM_HEADER.size:
        raise TruncatedError(f"{path}: truncated header")
    _, h, w, c = _PLM_HEADER.unpack_from(buf)
    n = _check_dims(h, w)
    if c < 1:
        raise DimensionError(f"{path}: class count must be >= 1")
    need = _PLM_HEADER.size + 2 * n
    if len(buf) < need:
        raise TruncatedError(f"{path}: payload has {len(buf) - _PLM_HEADER.size} bytes, need {2 * n}")
    if len(buf) > need:
        raise FormatError(f"{path}: {len(buf) - need} trailing bytes")
    a = np.frombuffer(buf, dtype="<u2", count=n, offset=_PLM_HEADER.size)
    a = a.reshape(h, w).astype(np.int64)
    if a.max() > c:
        raise FormatError(f"{path}: label {a.max()} exceeds class count {c}")
    return LabelMap(a, c)


PALETTE = np.array([
    [0, 0, 0], [230, 25, 75], [60, 180, 75], [255, 225, 25],
    [0, 130, 200], [245, 130, 48], [145, 30, 180], [70, 240, 240],
    [240, 50, 230], [210, 245, 60], [250, 190, 212], [0, 128, 128],
    [220, 190, 255], [170, 110, 40], [255, 250, 200], [128, 0, 0],
], dtype=np.uint8)


def render_ppm(lm: LabelMap, path) -> None:
    """Write labels as a binary PPM; label 0 is black, colours wrap after 15."""
    idx = np.where(lm.labels == 0, 0, (lm.labels - 1) % 15 + 1)
    rgb = PALETTE[idx]
    h, w = lm.labels.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    buf = _read(path)
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P6":
        raise BadMagicError(f"{path}: not a binary PPM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)
