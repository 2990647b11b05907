"""Binary PGM (P5, maxval 255) reading and writing."""

import numpy as np


def write_pgm(array, path):
    """Write a (H, W) uint8 array as binary PGM."""
    array = np.asarray(array)
    if array.ndim != 2:
        raise ValueError("PGM images must be 2-d")
    if array.dtype != np.uint8:
        if array.min() < 0 or array.max() > 255:
            raise ValueError("PGM values must fit in [0, 255]")
        array = array.astype(np.uint8)
    h, w = array.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(array.tobytes())


def read_pgm(path):
    """Read a binary PGM into a (H, W) uint8 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=pos)
    if data.size < h * w:
        raise ValueError(f"{path}: truncated pixel data")
    return data.reshape(h, w).copy()
