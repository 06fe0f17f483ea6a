"""Raw float32 array and PNG image serialization.

The raw format is a 16-byte header (magic ``P4DF``, then u32 height, width,
channels, little-endian) followed by the row-major float32 payload. It is
used for depth maps (1 channel), flow fields (2 channels) and weight maps.
PNG is used for 8-bit RGB images, with values mapped from [0, 1].
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ManifestError

MAGIC = b"P4DF"
_HEADER = struct.Struct("<4sIII")


def save_raw(path: str | Path, array: np.ndarray) -> None:
    """Write a (H, W) or (H, W, C) float array in the raw P4DF format."""
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected a 2D or 3D array, got shape {array.shape}")
    h, w, c = arr.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, h, w, c))
        fh.write(arr.tobytes(order="C"))


def load_raw(path: str | Path) -> np.ndarray:
    """Read a P4DF raw array; returns (H, W) for 1 channel, else (H, W, C)."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise ManifestError(f"{path}: truncated header", offset=len(blob))
    magic, h, w, c = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ManifestError(f"{path}: bad magic {magic!r}", offset=0)
    expected = _HEADER.size + h * w * c * 4
    if len(blob) != expected:
        raise ManifestError(
            f"{path}: payload is {len(blob) - _HEADER.size} bytes, "
            f"expected {expected - _HEADER.size}",
            offset=min(len(blob), expected),
        )
    arr = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(h, w, c)
    if c == 1:
        return np.ascontiguousarray(arr[:, :, 0])
    return np.ascontiguousarray(arr)


def save_png(path: str | Path, image: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] as 8-bit RGB PNG."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    quantized = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(quantized, mode="RGB").save(Path(path))


def load_png(path: str | Path) -> np.ndarray:
    """Read an RGB PNG as an (H, W, 3) float32 image in [0, 1]."""
    with Image.open(Path(path)) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float32)
    return rgb / np.float32(255.0)
