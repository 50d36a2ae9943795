"""Minimal deterministic PNG writer/reader for 8-bit RGB images.

Only what the package needs: filter-0 rows, fixed zlib level, no ancillary
chunks.  Encoding the same pixels always yields the same bytes, which is what
keeps committed golden images stable; the reader accepts exactly the subset
the writer emits.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

__all__ = ["PngFormatError", "encode_png", "decode_png", "write_png", "read_png", "latent_to_rgb8"]

_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class PngFormatError(ValueError):
    """Data is not a PNG this codec can handle."""


def _chunk(kind: bytes, payload: bytes) -> bytes:
    return (
        struct.pack(">I", len(payload))
        + kind
        + payload
        + struct.pack(">I", zlib.crc32(kind + payload) & 0xFFFFFFFF)
    )


def encode_png(pixels: np.ndarray) -> bytes:
    """Encode an [h, w, 3] uint8 array."""
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise PngFormatError(f"expected [h, w, 3] uint8, got {pixels.shape} {pixels.dtype}")
    h, w = pixels.shape[:2]
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)  # 8-bit RGB, no interlace
    raw = b"".join(b"\x00" + pixels[row].tobytes() for row in range(h))
    return (
        _SIGNATURE
        + _chunk(b"IHDR", ihdr)
        + _chunk(b"IDAT", zlib.compress(raw, 6))
        + _chunk(b"IEND", b"")
    )


def decode_png(data: bytes) -> np.ndarray:
    """Decode bytes produced by encode_png back to [h, w, 3] uint8."""
    if data[:8] != _SIGNATURE:
        raise PngFormatError("bad PNG signature")
    pos = 8
    width = height = None
    idat = b""
    while pos < len(data):
        if pos + 8 > len(data):
            raise PngFormatError("truncated chunk header")
        (length,) = struct.unpack(">I", data[pos : pos + 4])
        kind = data[pos + 4 : pos + 8]
        payload = data[pos + 8 : pos + 8 + length]
        if len(payload) != length:
            raise PngFormatError("truncated chunk payload")
        pos += 12 + length
        if kind == b"IHDR":
            width, height, depth, ctype, comp, filt, interlace = struct.unpack(">IIBBBBB", payload)
            if (depth, ctype, comp, filt, interlace) != (8, 2, 0, 0, 0):
                raise PngFormatError("unsupported PNG flavour (need plain 8-bit RGB)")
        elif kind == b"IDAT":
            idat += payload
        elif kind == b"IEND":
            break
    if width is None:
        raise PngFormatError("missing IHDR")
    raw = zlib.decompress(idat)
    stride = 1 + 3 * width
    if len(raw) != stride * height:
        raise PngFormatError("pixel payload size mismatch")
    rows = []
    for r in range(height):
        line = raw[r * stride : (r + 1) * stride]
        if line[0] != 0:
            raise PngFormatError(f"unsupported row filter {line[0]}")
        rows.append(np.frombuffer(line[1:], dtype=np.uint8).reshape(width, 3))
    return np.stack(rows, axis=0)


def write_png(path, pixels: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_png(pixels))


def read_png(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_png(fh.read())


def latent_to_rgb8(arr: np.ndarray) -> np.ndarray:
    """First three channels of a [c,h,w] float map in [0,1] as [h,w,3] uint8."""
    if arr.ndim != 3 or arr.shape[0] < 3:
        raise PngFormatError(f"need at least 3 channels, got {arr.shape}")
    rgb = np.clip(arr[:3], 0.0, 1.0).transpose(1, 2, 0)
    return np.rint(rgb * 255.0).astype(np.uint8)
