"""Binary mesh/field container ("GTMF")."""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ParseError, ValidationError
from .meshgraph import Mesh

MAGIC = b"GTMF"
VERSION = 1
_HEADER = struct.Struct("<8I")


@dataclass(eq=False)
class MeshFieldFile:
    """Mesh plus ``T`` frames of node fields and per-frame globals.

    ``frames`` is ``[T, N, c]``; ``globals_`` is ``[T, l + 1]`` with the frame
    time in the last column.
    """

    mesh: Mesh
    frames: np.ndarray
    globals_: np.ndarray

    def __post_init__(self):
        n = self.mesh.num_nodes
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3 or self.frames.shape[1] != n:
            raise ValidationError(f"frames must be [T, {n}, c], got {self.frames.shape}")
        g = np.asarray(self.globals_, dtype=np.float32)
        self.globals_ = g if g.ndim == 2 else g.reshape(self.frames.shape[0], -1)
        if self.globals_.shape[0] != self.frames.shape[0]:
            raise ValidationError(f"{self.globals_.shape[0]} global rows for {self.frames.shape[0]} frames")
        if self.globals_.shape[1] < 1:
            raise ValidationError("globals need at least the time column")

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def channels(self):
        return self.frames.shape[2]

    def __eq__(self, other):
        if not isinstance(other, MeshFieldFile):
            return NotImplemented
        a, b = self.mesh, other.mesh
        return (np.array_equal(a.coords, b.coords) and np.array_equal(a.cells, b.cells)
                and np.array_equal(a.node_type, b.node_type)
                and np.array_equal(a.boundary_mask, b.boundary_mask)
                and self.frames.shape == other.frames.shape
                and self.frames.tobytes() == other.frames.tobytes()
                and self.globals_.tobytes() == other.globals_.tobytes())


def encode_meshfield(mf):
    m = mf.mesh
    arity = m.cells.shape[1] if m.cells.size else 3
    T, n, c = mf.frames.shape
    l = mf.globals_.shape[1] - 1
    parts = [MAGIC, _HEADER.pack(VERSION, m.dim, n, arity, m.cells.shape[0], c, T, l),
             m.coords.astype("<f4").tobytes(), m.cells.astype("<i4").tobytes(),
             m.node_type.astype("<i4").tobytes(), mf.frames.astype("<f4").tobytes(),
             mf.globals_.astype("<f4").tobytes()]
    return b"".join(parts)


def decode_meshfield(buf):
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise ParseError("bad magic, expected GTMF", 0)
    if len(buf) < 4 + _HEADER.size:
        raise ParseError("truncated header", len(buf))
    version, d, n, arity, n_cells, c, T, l = _HEADER.unpack_from(buf, 4)
    if version != VERSION:
        raise ParseError(f"unsupported version {version}", 4)
    offset = 4 + _HEADER.size

    def block(dtype, count, what):
        nonlocal offset
        nbytes = 4 * count
        if offset + nbytes > len(buf):
            raise ParseError(f"truncated {what} block: need {nbytes} bytes, have {len(buf) - offset}",
                             offset)
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).copy()
        offset += nbytes
        return arr

    coords = block("<f4", n * d, "coords").reshape(n, d)
    cells = block("<i4", n_cells * arity, "cells").reshape(n_cells, arity)
    node_type = block("<i4", n, "node_type")
    frames = block("<f4", T * n * c, "frames").reshape(T, n, c)
    glob = block("<f4", T * (l + 1), "globals").reshape(T, l + 1)
    if offset != len(buf):
        raise ParseError(f"{len(buf) - offset} trailing bytes after declared blocks", offset)
    try:
        mesh = Mesh(coords.astype(np.float64), cells.astype(np.int64), node_type.astype(np.int64))
    except ValidationError as exc:
        raise ParseError(f"invalid mesh content: {exc}", 4 + _HEADER.size) from exc
    return MeshFieldFile(mesh, frames, glob)


def write_meshfield(path, mf):
    try:
        with open(path, "wb") as fh:
            fh.write(encode_meshfield(mf))
    except OSError as exc:
        raise OSError(f"cannot write mesh field file {path}: {exc}") from exc


def read_meshfield(path):
    with open(path, "rb") as fh:
        return decode_meshfield(fh.read())
