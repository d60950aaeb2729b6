"""Gate-map files and plain-CSV feature matrices."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .tensor import as_matrix

GATE_CSV_HEADER = ("token", "gate")


def quantize_gate(G) -> np.ndarray:
    """round(255 * G), half-up, as uint8."""
    g = np.asarray(G, dtype=np.float64).ravel()
    return np.floor(255.0 * g + 0.5).clip(0, 255).astype(np.uint8)


def square_side(n: int) -> int | None:
    side = math.isqrt(n)
    return side if side * side == n else None


def write_gate_csv(path, G) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(GATE_CSV_HEADER)
        for i, g in enumerate(np.asarray(G).ravel()):
            writer.writerow((i, repr(float(g))))
    return path


def pgm_bytes(G) -> bytes:
    """Binary P5 image of the gate map reshaped row-major to side x side."""
    q = quantize_gate(G)
    side = square_side(q.size)
    if side is None:
        raise ValueError(f"gate map of length {q.size} is not a perfect square")
    return f"P5\n{side} {side}\n255\n".encode("ascii") + q.tobytes()


def write_gate_pgm(path, G) -> Path:
    path = Path(path)
    path.write_bytes(pgm_bytes(G))
    return path


def read_pgm(path) -> tuple[int, int, int, np.ndarray]:
    """Parse a binary P5 file: (width, height, maxval, pixels)."""
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos].decode("ascii"))
    pos += 1  # single whitespace byte before the raster
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic != "P5":
        raise ValueError(f"not a binary PGM (magic {magic!r})")
    pixels = np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w)
    return w, h, maxval, pixels


def read_matrix_csv(path) -> np.ndarray:
    """Load a headerless numeric CSV, one token per row."""
    with Path(path).open(newline="") as fh:
        rows = [[float(x) for x in row] for row in csv.reader(fh) if row]
    if not rows:
        raise ValueError(f"{path}: no rows")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError(f"{path}: ragged rows (widths {sorted(widths)})")
    m = as_matrix(rows, str(path))
    if not np.isfinite(m).all():
        raise ValueError(f"{path}: non-finite values")
    return m


def write_matrix_csv(path, m) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows([repr(float(v)) for v in row] for row in m)
    return path
