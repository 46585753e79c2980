"""FGRID raster container and image export.

FGRID is the on-disk raster format used by every pipeline stage. Layout,
all little-endian:

    offset  size  field
    0       4     magic ``FGRD``
    4       4     format version (u32, currently 1)
    8       4     width  (u32, pixels)
    12      4     height (u32, pixels)
    16      4     channels (u32)
    20      1     dtype code (u8): 0 = float32, 1 = uint8
    21      8     resolution (f64, meters per pixel)
    29      -     payload, row-major, channel-last

In memory rasters are channel-first (C, H, W); read/write transposes. A
round trip is bit-exact.

Level maps export to binary PPM, grayscale maps to binary PGM; PPM/PGM was
chosen over PNG so the writers stay dependency-free and byte-stable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"FGRD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIBd")

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype(np.uint8)}

# Residue level palette, index 0..4 = none, low, moderate, heavy, ponding:
# dark brown, tan, orange, red-brown, yellow.
LEVEL_COLORS = (
    (62, 42, 20),
    (210, 180, 140),
    (232, 133, 28),
    (139, 58, 30),
    (245, 216, 0),
)


class FgridError(ValueError):
    """Malformed FGRID bytes: bad magic, bad sizes, unknown codes."""


@dataclass
class Raster:
    """Channel-first grid with a physical pixel size in meters."""

    data: np.ndarray
    resolution: float = 1.0

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data)
        if self.data.ndim == 2:
            self.data = self.data[None]
        if self.data.ndim != 3:
            raise ValueError(f"raster data must be (C, H, W), got shape {self.data.shape}")
        if self.data.dtype not in _DTYPE_CODES:
            raise ValueError(f"raster dtype must be float32 or uint8, got {self.data.dtype}")
        if self.data.size == 0:
            raise ValueError("empty rasters are not allowed")
        self.resolution = float(self.resolution)
        if not np.isfinite(self.resolution) or self.resolution <= 0:
            raise ValueError(f"resolution must be a positive finite number, got {self.resolution}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def write_fgrid(path, raster: Raster) -> None:
    header = _HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        raster.width,
        raster.height,
        raster.channels,
        _DTYPE_CODES[raster.data.dtype],
        raster.resolution,
    )
    payload = np.ascontiguousarray(raster.data.transpose(1, 2, 0))
    if payload.dtype == np.float32:
        payload = payload.astype("<f4", copy=False)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_fgrid(path) -> Raster:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FgridError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, width, height, channels, code, resolution = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FgridError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FgridError(f"{path}: unsupported format version {version}")
    if code not in _CODE_DTYPES:
        raise FgridError(f"{path}: unknown dtype code {code}")
    if width == 0 or height == 0 or channels == 0:
        raise FgridError(f"{path}: zero-extent raster {width}x{height}x{channels}")
    dtype = _CODE_DTYPES[code]
    expected = width * height * channels * dtype.itemsize
    got = len(blob) - _HEADER.size
    if got < expected:
        raise FgridError(f"{path}: truncated payload, expected {expected} bytes, got {got}")
    if got > expected:
        raise FgridError(f"{path}: oversized payload, expected {expected} bytes, got {got}")
    flat = np.frombuffer(blob, dtype=dtype, offset=_HEADER.size)
    data = flat.reshape(height, width, channels).transpose(2, 0, 1)
    if dtype == np.dtype("<f4"):
        data = data.astype(np.float32, copy=False)
    return Raster(data=np.ascontiguousarray(data), resolution=resolution)


# ---- preview images ----


def write_level_ppm(path, levels: np.ndarray) -> None:
    """Render a (H, W) residue level map to binary PPM with LEVEL_COLORS."""
    levels = np.asarray(levels)
    if levels.ndim != 2:
        raise ValueError(f"level map must be 2-D, got shape {levels.shape}")
    if not np.issubdtype(levels.dtype, np.integer):
        raise ValueError("level map must be an integer array")
    if levels.min() < 0 or levels.max() >= len(LEVEL_COLORS):
        raise ValueError(f"level values must lie in [0, {len(LEVEL_COLORS)})")
    lut = np.asarray(LEVEL_COLORS, dtype=np.uint8)
    rgb = lut[levels]
    h, w = levels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def write_gray_pgm(path, values: np.ndarray) -> None:
    """Render a (H, W) map of [0, 1] values (or booleans) to binary PGM."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError(f"grayscale map must be 2-D, got shape {values.shape}")
    if values.dtype == bool:
        gray = np.where(values, np.uint8(255), np.uint8(0))
    else:
        gray = np.round(np.clip(values.astype(np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())
