"""Binary PGM (P5) image files.

Images are 8-bit (intensity = raw / 255); depth maps are 16-bit big-endian
with a fixed scale (depth = raw / 10000), which covers the whole camera
sphere (max representable depth 6.5535) at 0.1 mm-equivalent resolution.
"""

from __future__ import annotations

import numpy as np

DEPTH_SCALE = 10000.0


class PgmFormatError(ValueError):
    """Not a PGM we understand (magic bytes or maxval)."""


class PgmTruncatedError(PgmFormatError):
    """Header or payload ends early."""


def write_pgm8(path, image: np.ndarray) -> None:
    """Intensities in [0, 1] -> 8-bit binary PGM."""
    raw = np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = raw.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(raw.tobytes())


def write_pgm16(path, depth: np.ndarray) -> None:
    """Depth in length units -> 16-bit big-endian binary PGM (raw = depth * 10000)."""
    raw = np.round(np.asarray(depth, dtype=np.float64) * DEPTH_SCALE)
    if raw.min() < 0 or raw.max() > 65535:
        raise ValueError("depth out of representable range")
    raw = raw.astype(">u2")
    h, w = raw.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode())
        fh.write(raw.tobytes())


def _read_header(fh) -> tuple[int, int, int]:
    # P5, then width/height/maxval separated by whitespace; '#' starts a comment
    def tokens():
        while True:
            line = fh.readline()
            if not line:
                raise PgmTruncatedError("truncated PGM header")
            line = line.split(b"#", 1)[0]
            yield from line.split()

    t = tokens()
    magic = next(t)
    if magic != b"P5":
        raise PgmFormatError(f"not a binary PGM: magic {magic!r}")
    w = int(next(t))
    h = int(next(t))
    maxval = int(next(t))
    return w, h, maxval


def read_pgm(path) -> np.ndarray:
    """8-bit PGM -> float32 in [0, 1]; 16-bit PGM -> float32 depth (raw / 10000)."""
    with open(path, "rb") as fh:
        w, h, maxval = _read_header(fh)
        if maxval == 255:
            raw = np.frombuffer(fh.read(w * h), dtype=np.uint8)
            if len(raw) != w * h:
                raise PgmTruncatedError("truncated PGM payload")
            return (raw.reshape(h, w).astype(np.float32)) / 255.0
        if maxval == 65535:
            raw = np.frombuffer(fh.read(2 * w * h), dtype=">u2")
            if len(raw) != w * h:
                raise PgmTruncatedError("truncated PGM payload")
            return raw.reshape(h, w).astype(np.float32) / DEPTH_SCALE
        raise PgmFormatError(f"unsupported maxval {maxval}")
