"""Image and array serialization: binary PPM (P6) and the packed container.

Images live in memory as float64 arrays of shape (C, H, W) with values in
[0, 1]. PPM is the interchange format for individual images (8-bit,
maxval 255). Batches and feature matrices use the packed raw container:

    magic 'TSSL' | u32 count | u32 H | u32 W | u32 C | payload

with the payload stored row-major as float64 in (count, C, H, W) order.
Feature matrices of shape (N, D) are stored with H = W = 1 and C = D.
All integers are little-endian.
"""

import struct

import numpy as np

PACKED_MAGIC = b"TSSL"


class FormatError(ValueError):
    """Raised for malformed or unsupported on-disk payloads."""


def write_ppm(path, image: np.ndarray) -> None:
    """Write a (3, H, W) float image in [0, 1] as binary PPM."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise FormatError(f"write_ppm: expected (3, H, W) image, got {image.shape}")
    _, h, w = image.shape
    quantized = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    raster = quantized.transpose(1, 2, 0).tobytes()
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(raster)


def _read_token(f) -> bytes:
    """Read one whitespace-delimited header token, skipping '#' comments."""
    token = b""
    while True:
        ch = f.read(1)
        if ch == b"":
            raise FormatError("ppm: truncated header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM (P6, maxval 255) into a (3, H, W) float64 image."""
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic != b"P6":
            raise FormatError(f"ppm: unsupported magic {magic!r}, only binary P6 is read")
        try:
            w = int(_read_token(f))
            h = int(_read_token(f))
            maxval = int(_read_token(f))
        except ValueError as e:
            raise FormatError(f"ppm: malformed header ({e})") from None
        if w <= 0 or h <= 0:
            raise FormatError(f"ppm: malformed header (dimensions {w}x{h})")
        if maxval != 255:
            raise FormatError(f"ppm: unsupported maxval {maxval}, only 255 is handled")
        raster = f.read(w * h * 3)
        if len(raster) != w * h * 3:
            raise FormatError(
                f"ppm: truncated payload, expected {w * h * 3} bytes got {len(raster)}"
            )
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_packed(path, array: np.ndarray) -> None:
    """Write an image batch (N, C, H, W) or feature matrix (N, D) packed."""
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim == 2:
        n, d = arr.shape
        header = (n, 1, 1, d)
        payload = arr
    elif arr.ndim == 4:
        n, c, h, w = arr.shape
        header = (n, h, w, c)
        payload = arr
    else:
        raise FormatError(f"write_packed: expected 2-d or 4-d array, got {arr.shape}")
    with open(path, "wb") as f:
        f.write(PACKED_MAGIC)
        f.write(struct.pack("<4I", *header))
        f.write(np.ascontiguousarray(payload).tobytes())


def read_packed(path) -> np.ndarray:
    """Read a packed container; (N, 1*1*D) payloads come back as (N, D)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != PACKED_MAGIC:
            raise FormatError(f"packed: bad magic {magic!r}")
        head = f.read(16)
        if len(head) != 16:
            raise FormatError("packed: truncated header")
        n, h, w, c = struct.unpack("<4I", head)
        count = n * c * h * w
        payload = f.read(count * 8)
        if len(payload) != count * 8:
            raise FormatError(
                f"packed: truncated payload, expected {count * 8} bytes got {len(payload)}"
            )
    arr = np.frombuffer(payload, dtype="<f8").reshape(n, c, h, w)
    if h == 1 and w == 1:
        return arr.reshape(n, c).copy()
    return arr.copy()
