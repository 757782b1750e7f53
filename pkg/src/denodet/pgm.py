"""Binary 16-bit PGM (P5) reading and writing."""

from __future__ import annotations

import os

import numpy as np


class PGMError(ValueError):
    pass


def write_pgm16(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write ``image`` rounded and clamped to [0, 65535], big-endian samples."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise PGMError(f"expected a 2-D image, got shape {img.shape}")
    data = np.clip(np.rint(img), 0, 65535).astype(">u2")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    out, i = [], 0
    while len(out) < count:
        while i < len(buf) and buf[i : i + 1].isspace():
            i += 1
        if buf[i : i + 1] == b"#":
            while i < len(buf) and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j : j + 1].isspace():
            j += 1
        if j == i:
            raise PGMError("truncated PGM header")
        out.append(buf[i:j])
        i = j
    # exactly one whitespace byte separates the header from the raster
    return out, i + 1


def read_pgm16(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    toks, start = _tokens(buf, 4)
    if toks[0] != b"P5":
        raise PGMError(f"{path}: not a binary PGM (magic {toks[0]!r})")
    try:
        w, h, maxval = (int(t) for t in toks[1:])
    except ValueError as exc:
        raise PGMError(f"{path}: malformed header") from exc
    dtype = ">u2" if maxval > 255 else "u1"
    nbytes = w * h * np.dtype(dtype).itemsize
    raster = buf[start : start + nbytes]
    if len(raster) != nbytes:
        raise PGMError(f"{path}: truncated raster")
    return np.frombuffer(raster, dtype=dtype).reshape(h, w).astype(np.int64)
