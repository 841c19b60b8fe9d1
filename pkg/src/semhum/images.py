"""Binary PPM (P6) / PGM (P5) encode and decode.

Color images quantize as round(255 * clamp(v, 0, 1)).  Grayscale maps
(masks, labels, alpha) store raw integer values with an explicit maxval;
label maps use maxval = L - 1.  The decoder validates sizes and reports
truncation with the byte offset where data ran out.
"""
from __future__ import annotations

import numpy as np

from .errors import ValidationError


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValidationError(f"ppm: expected (H,W,3) image, got {rgb.shape}")
    h, w = rgb.shape[:2]
    q = np.rint(255.0 * np.clip(rgb, 0.0, 1.0)).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def write_ppm(path, rgb: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(rgb))


def encode_pgm(gray: np.ndarray, maxval: int = 255) -> bytes:
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValidationError(f"pgm: expected (H,W) image, got {gray.shape}")
    if not 1 <= maxval <= 255:
        raise ValidationError(f"pgm: maxval {maxval} outside [1, 255]")
    vals = np.rint(np.asarray(gray, dtype=np.float64)).astype(np.int64)
    if vals.min() < 0 or vals.max() > maxval:
        raise ValidationError(
            f"pgm: values [{vals.min()}, {vals.max()}] exceed maxval {maxval}"
        )
    h, w = gray.shape
    return f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + vals.astype(np.uint8).tobytes()


def write_pgm(path, gray: np.ndarray, maxval: int = 255) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(gray, maxval))


def _parse_header(raw: bytes, path) -> tuple:
    """Returns (magic, width, height, maxval, payload_offset)."""
    if len(raw) < 2 or raw[:1] != b"P":
        raise ValidationError(f"{path}: not a PNM file (missing magic)")
    magic = raw[:2].decode("ascii", "replace")
    pos = 2
    fields = []
    while len(fields) < 3:
        # skip whitespace and comments
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            nl = raw.find(b"\n", pos)
            if nl < 0:
                raise ValidationError(f"{path}: unterminated comment at offset {pos}")
            pos = nl + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        token = raw[start:pos]
        if not token:
            raise ValidationError(
                f"{path}: header ended early at offset {start} "
                f"(have {len(fields)} of 3 header fields)"
            )
        try:
            fields.append(int(token))
        except ValueError:
            raise ValidationError(
                f"{path}: bad header token {token!r} at offset {start}"
            ) from None
    if pos >= len(raw):
        raise ValidationError(f"{path}: missing pixel data after header")
    pos += 1  # single whitespace byte separates header from payload
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise ValidationError(f"{path}: bad dimensions {width}x{height}")
    if not 1 <= maxval <= 255:
        raise ValidationError(f"{path}: unsupported maxval {maxval} (8-bit only)")
    return magic, width, height, maxval, pos


def read_ppm(path) -> tuple[np.ndarray, int]:
    """Returns (uint8 (H,W,3) array, maxval)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, w, h, maxval, pos = _parse_header(raw, path)
    if magic != "P6":
        raise ValidationError(f"{path}: expected P6 (binary ppm), got {magic}")
    need = w * h * 3
    have = len(raw) - pos
    if have < need:
        raise ValidationError(
            f"{path}: truncated pixel data: need {need} bytes at offset {pos}, "
            f"file ends after {have}"
        )
    img = np.frombuffer(raw[pos : pos + need], dtype=np.uint8).reshape(h, w, 3)
    return img.copy(), maxval


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Returns (uint8 (H,W) array, maxval)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, w, h, maxval, pos = _parse_header(raw, path)
    if magic != "P5":
        raise ValidationError(f"{path}: expected P5 (binary pgm), got {magic}")
    need = w * h
    have = len(raw) - pos
    if have < need:
        raise ValidationError(
            f"{path}: truncated pixel data: need {need} bytes at offset {pos}, "
            f"file ends after {have}"
        )
    img = np.frombuffer(raw[pos : pos + need], dtype=np.uint8).reshape(h, w)
    return img.copy(), maxval


def to_float(img_u8: np.ndarray, maxval: int = 255) -> np.ndarray:
    return np.asarray(img_u8, dtype=np.float64) / float(maxval)
