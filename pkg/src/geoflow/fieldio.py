"""File formats for fields.

Two formats cover the needs here:

* PGM (P2 or P5) for 8-bit viewing; grey levels are mapped to [0, 1]
  by dividing by maxval, and an N-pixel axis gets spacing 1/N so every
  image lives on the unit torus.
* a raw float32 container for exact data: one ASCII header line
  `GEOF1 <dim> <shape...> <spacing...>` followed by little-endian
  IEEE-754 32-bit values in row-major order. A vector field appends
  one such value block per component after the same header; readers
  tell the two apart by the payload length.

Writers are byte-deterministic: same field in, same bytes out.
"""

from __future__ import annotations

import numpy as np

from .fields import Grid, ScalarField, VectorField

__all__ = [
    "read_pgm",
    "write_pgm",
    "read_field",
    "write_field",
    "unit_grid",
]

_MAGIC = "GEOF1"


def unit_grid(shape) -> Grid:
    """Grid over the unit torus: an N-node axis has spacing 1/N."""
    shape = tuple(int(n) for n in shape)
    return Grid(shape, tuple(1.0 / n for n in shape))


def _pgm_tokens(raw: bytes):
    """Header tokens of a PGM, skipping # comments; returns (tokens, offset)
    where offset is the index of the first data byte (for P5)."""
    tokens = []
    i = 0
    while len(tokens) < 4:
        if i >= len(raw):
            raise ValueError("truncated PGM header")
        c = raw[i : i + 1]
        if c == b"#":
            while i < len(raw) and raw[i : i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(raw) and not raw[j : j + 1].isspace() and raw[j : j + 1] != b"#":
                j += 1
            tokens.append(raw[i:j].decode("ascii"))
            i = j
    # exactly one whitespace byte separates maxval from binary data
    return tokens, i + 1


def read_pgm(path) -> ScalarField:
    """Read a P2/P5 PGM into [0, 1] on the unit torus."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, off = _pgm_tokens(raw)
    magic = tokens[0]
    if magic not in ("P2", "P5"):
        raise ValueError(f"not a PGM file (magic {magic!r})")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval < 1 or maxval > 65535:
        raise ValueError(f"bad PGM maxval {maxval}")
    count = width * height
    if magic == "P2":
        text = b"\n".join(
            line.split(b"#", 1)[0] for line in raw.split(b"\n")
        )
        toks = text.split()[4:]
        if len(toks) < count:
            raise ValueError("truncated P2 pixel data")
        data = np.array(toks[:count], dtype=float)
    else:
        dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        data = np.frombuffer(raw, dtype=dt, count=count, offset=off).astype(float)
    # PGM is row-major with rows = height; axis 0 of a field is the
    # x coordinate, so transpose to (width, height)
    values = (data.reshape(height, width).T) / float(maxval)
    return ScalarField(unit_grid((width, height)), values)


def write_pgm(path, field: ScalarField, maxval: int = 255, binary: bool = True) -> None:
    """Write a scalar field as PGM, clipping to [0, 1] first."""
    if maxval < 1 or maxval > 255:
        raise ValueError("writer supports maxval 1..255")
    vals = np.clip(field.values, 0.0, 1.0)
    pix = np.rint(vals.T * maxval).astype(np.uint8)  # back to (height, width)
    height, width = pix.shape
    header = f"{'P5' if binary else 'P2'}\n{width} {height}\n{maxval}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(pix.tobytes(order="C"))
        else:
            for row in pix:
                fh.write((" ".join(str(int(v)) for v in row) + "\n").encode("ascii"))


def _header_line(grid: Grid) -> bytes:
    parts = [_MAGIC, str(grid.dim)]
    parts += [str(n) for n in grid.shape]
    parts += [repr(h) for h in grid.spacing]
    return (" ".join(parts) + "\n").encode("ascii")


def write_field(path, field) -> None:
    """Write a ScalarField or VectorField to the raw float32 format."""
    if isinstance(field, ScalarField):
        blocks = [field.values]
    elif isinstance(field, VectorField):
        blocks = list(field.values)
    else:
        raise TypeError(f"cannot write a {type(field).__name__}")
    with open(path, "wb") as fh:
        fh.write(_header_line(field.grid))
        for block in blocks:
            fh.write(np.asarray(block, dtype="<f4").tobytes(order="C"))


def read_field(path):
    """Read the raw float32 format; the payload length decides whether
    the result is a ScalarField or a VectorField."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        payload = fh.read()
    if not header or header[0] != _MAGIC:
        raise ValueError("not a raw field file (bad magic)")
    dim = int(header[1])
    if len(header) != 2 + 2 * dim:
        raise ValueError("malformed raw field header")
    shape = tuple(int(n) for n in header[2 : 2 + dim])
    spacing = tuple(float(s) for s in header[2 + dim :])
    grid = Grid(shape, spacing)
    data = np.frombuffer(payload, dtype="<f4").astype(float)
    n = int(np.prod(shape))
    if data.size == n:
        return ScalarField(grid, data.reshape(shape))
    if data.size == dim * n:
        return VectorField(grid, data.reshape((dim, *shape)))
    raise ValueError(f"payload holds {data.size} values, expected {n} or {dim * n}")
