"""Image file I/O: dependency-free PPM/PGM (P2/P3/P5/P6) plus 8-bit PNG via Pillow.

Decoded images are float32 arrays of shape (C, H, W) scaled to [0, 1].
"""

from __future__ import annotations

import io
import os
from pathlib import Path

import numpy as np

from .exceptions import DecodeError

PNM_MAGIC = {b"P2": (1, False), b"P3": (3, False), b"P5": (1, True), b"P6": (3, True)}
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _read_header_tokens(buf: bytes, count: int, path) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    tokens: list[bytes] = []
    pos = 0
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise DecodeError("truncated PNM header", offset=pos, path=path)
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        tokens.append(buf[start:pos])
    return tokens, pos


def decode_pnm(buf: bytes, path=None) -> np.ndarray:
    magic = buf[:2]
    if magic not in PNM_MAGIC:
        raise DecodeError(f"not a PPM/PGM file (magic {magic!r})", offset=0, path=path)
    channels, binary = PNM_MAGIC[magic]
    tokens, pos = _read_header_tokens(buf, 4, path)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DecodeError(f"malformed PNM header {tokens!r}", offset=pos, path=path) from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise DecodeError(f"invalid PNM dimensions/maxval {width}x{height}/{maxval}", offset=pos, path=path)
    count = width * height * channels
    if binary:
        pos += 1  # single whitespace byte ends the header
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
        need = count * dtype.itemsize
        if len(buf) - pos < need:
            raise DecodeError(
                f"truncated pixel data: need {need} bytes, found {max(len(buf) - pos, 0)}",
                offset=len(buf),
                path=path,
            )
        raw = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
    else:
        values = buf[pos:].split()
        if len(values) < count:
            raise DecodeError(f"truncated ASCII pixel data: need {count} values, found {len(values)}", offset=len(buf), path=path)
        try:
            raw = np.array([int(v) for v in values[:count]], dtype=np.int64)
        except ValueError:
            raise DecodeError("non-integer ASCII pixel value", offset=pos, path=path) from None
    if raw.max(initial=0) > maxval:
        raise DecodeError(f"pixel value exceeds maxval {maxval}", offset=pos, path=path)
    img = raw.astype(np.float32).reshape(height, width, channels) / np.float32(maxval)
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def decode_png(buf: bytes, path=None) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(io.BytesIO(buf)) as im:
            im.load()
            if im.mode in ("L", "LA", "1"):
                arr = np.asarray(im.convert("L"), dtype=np.float32)[None]
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"corrupt PNG: {exc}", offset=None, path=path) from None
    return np.ascontiguousarray(arr / 255.0, dtype=np.float32)


def decode_image(path) -> np.ndarray:
    """Decode a PPM/PGM/PNG file to a (C, H, W) float32 array in [0, 1]."""
    buf = Path(path).read_bytes()
    if buf.startswith(PNG_SIGNATURE):
        return decode_png(buf, path)
    return decode_pnm(buf, path)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Float [0, 1] (or uint8) (C, H, W) / (H, W) array -> uint8 (H, W, C)."""
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    return arr.transpose(1, 2, 0)


def encode_pnm(img: np.ndarray) -> bytes:
    hwc = to_uint8(img)
    h, w, c = hwc.shape
    if c not in (1, 3):
        raise ValueError(f"PNM supports 1 or 3 channels, got {c}")
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode() + hwc.tobytes()


def encode_image(path, img: np.ndarray) -> None:
    """Write an image; the extension picks the format (.pgm/.ppm/.png)."""
    path = Path(path)
    ext = path.suffix.lower()
    if ext in (".pgm", ".ppm", ".pnm"):
        data = encode_pnm(img)
        if ext == ".pgm" and data[:2] != b"P5" or ext == ".ppm" and data[:2] != b"P6":
            raise ValueError(f"channel count does not match extension {ext}")
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, path)
    elif ext == ".png":
        from PIL import Image

        hwc = to_uint8(img)
        Image.fromarray(hwc[..., 0] if hwc.shape[2] == 1 else hwc).save(path, format="PNG")
    else:
        raise ValueError(f"unsupported image extension {ext!r}")


IMAGE_EXTENSIONS = (".ppm", ".pgm", ".png")
