"""Binary PPM (P6, maxval 255) reader and writer for float RGB images."""

from __future__ import annotations

import os

import numpy as np


class PPMError(ValueError):
    pass


def encode_ppm(image: np.ndarray) -> bytes:
    """(3, h, w) floats in [0, 1] -> P6 bytes, rounding half up."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise PPMError(f"expected a (3, h, w) image, got shape {image.shape}")
    _, h, w = image.shape
    q = np.floor(np.clip(image.astype(np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(q.transpose(1, 2, 0)).tobytes()


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """First ``count`` whitespace-separated header tokens, skipping # comments."""
    tokens, pos, n = [], 0, len(data)
    while len(tokens) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PPMError("truncated PPM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    if pos >= n or not data[pos : pos + 1].isspace():
        raise PPMError("malformed PPM header: missing separator before raster")
    return tokens, pos + 1


def decode_ppm(data: bytes) -> np.ndarray:
    tokens, offset = _tokens(data, 4)
    if tokens[0] != b"P6":
        raise PPMError(f"unsupported magic {tokens[0]!r}; only binary P6 is supported")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PPMError(f"malformed PPM header fields {tokens[1:]}") from None
    if w <= 0 or h <= 0:
        raise PPMError(f"invalid PPM dimensions {w}x{h}")
    if maxval != 255:
        raise PPMError(f"unsupported maxval {maxval}; expected 255")
    need = w * h * 3
    payload = data[offset : offset + need]
    if len(payload) < need:
        raise PPMError(f"truncated PPM payload: expected {need} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return (arr.transpose(2, 0, 1).astype(np.float32)) / np.float32(255.0)


def write_image(path: str | os.PathLike, image) -> None:
    data = image.data if hasattr(image, "data") and not isinstance(image, np.ndarray) else image
    with open(path, "wb") as fh:
        fh.write(encode_ppm(np.asarray(data)))


def read_image(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return decode_ppm(data)
    except PPMError as e:
        raise PPMError(f"{path}: {e}") from None
