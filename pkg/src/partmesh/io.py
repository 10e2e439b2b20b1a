"""Chunked checkpoints (map-after-read) and legacy ASCII VTK output.

Checkpoint layout, all little-endian::

    header   "PMCKPT01" | version u32 | D u32 | kind u8 | schema_len u32 | schema JSON
             | low D*f64 | high D*f64 | bc D*u8 | global size u64
             | nodes D*u64 (grids only) | saved ranks u32
    chunks   one per saving rank, contiguous, in rank order
             rank u32 | count u64 | payload
               particles: positions count*D*f64 | gids count*i64 | columns
               grids:     nblocks u32 | per block: origin D*i64 | extents D*i64 | columns
    footer   nchunks u32 | per chunk: offset u64 | length u64 | crc32c u32
    trailer  footer offset u64 | "PMCKEND1"

Columns follow the schema order; list columns store u64 element counts
followed by the packed records.
"""
from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass

import numpy as np
from crc32c import crc32c

from .decomposition import Decomposition
from .errors import CheckpointError, CorruptCheckpoint, IncompatibleSchema
from .geometry import Box
from .mesh import DistributedGrid
from .particles import ParticleSet
from .schema import ARRAY, SCALAR, VECTOR, Schema, pack_column, unpack_column
from .transport import World

log = logging.getLogger(__name__)

MAGIC = b"PMCKPT01"
END_MAGIC = b"PMCKEND1"
VERSION = 1
KIND_PARTICLES = 0
KIND_GRID = 1
_TRAILER = struct.Struct("<Q8s")
_FOOTER_ENTRY = struct.Struct("<QQI")


@dataclass
class Header:
    dim: int
    kind: int
    schema: Schema
    domain: Box
    bc: tuple
    global_size: int
    nodes: tuple
    nranks: int

    def encode(self) -> bytes:
        js = self.schema.to_json().encode()
        d = self.dim
        parts = [MAGIC, struct.pack("<IIBI", VERSION, d, self.kind, len(js)), js,
                 struct.pack(f"<{d}d", *self.domain.low), struct.pack(f"<{d}d", *self.domain.high),
                 struct.pack(f"<{d}B", *[int(b) for b in self.bc]),
                 struct.pack("<Q", self.global_size)]
        if self.kind == KIND_GRID:
            parts.append(struct.pack(f"<{d}Q", *self.nodes))
        parts.append(struct.pack("<I", self.nranks))
        return b"".join(parts)

    @classmethod
    def decode(cls, buf: bytes) -> "Header":
        try:
            if buf[:8] != MAGIC:
                raise CorruptCheckpoint("not a checkpoint file (bad magic)")
            version, d, kind, n = struct.unpack_from("<IIBI", buf, 8)
            if version != VERSION:
                raise IncompatibleSchema(f"unsupported checkpoint version {version}")
            off = 8 + 13
            schema = Schema.from_json(buf[off:off + n].decode())
            off += n
            low = struct.unpack_from(f"<{d}d", buf, off)
            high = struct.unpack_from(f"<{d}d", buf, off + 8 * d)
            off += 16 * d
            bc = struct.unpack_from(f"<{d}B", buf, off)
            off += d
            (size,) = struct.unpack_from("<Q", buf, off)
            off += 8
            nodes = ()
            if kind == KIND_GRID:
                nodes = struct.unpack_from(f"<{d}Q", buf, off)
                off += 8 * d
            (nranks,) = struct.unpack_from("<I", buf, off)
        except (struct.error, UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
            raise CorruptCheckpoint(f"unreadable checkpoint header: {exc}") from exc
        return cls(d, kind, schema, Box(low, high), tuple(bc), size, tuple(nodes), nranks)


# -------------------------------------------------------------------- chunks

def _particle_chunk(pset: ParticleSet) -> tuple[int, bytes]:
    n = pset.n_owned
    idx = np.arange(n)
    parts = [np.ascontiguousarray(pset.pos[:n], dtype="<f8").tobytes(),
             np.ascontiguousarray(pset.gid[:n], dtype="<i8").tobytes()]
    for p in pset.schema:
        parts.append(pack_column(p, pset.props[p.name], idx, pset.dim))
    return n, b"".join(parts)


def _grid_chunk(grid: DistributedGrid) -> tuple[int, bytes]:
    d = grid.dim
    parts = [struct.pack("<I", len(grid.blocks))]
    count = 0
    for b in grid.blocks:
        parts.append(struct.pack(f"<{d}q", *b.lo.tolist()))
        parts.append(struct.pack(f"<{d}q", *(b.hi - b.lo).tolist()))
        for p in grid.schema:
            parts.append(np.ascontiguousarray(b.view(p.name), dtype="<" + p.dtype).tobytes())
        count += int(np.prod(b.hi - b.lo))
    return count, b"".join(parts)


def _collective_ok(world: World, err: Exception | None):
    """Raise the first rank's error on every rank so no rank is left waiting."""
    errs = world.allgather_obj(None if err is None else (type(err).__name__, str(err)))
    for e in errs:
        if e is None:
            continue
        if err is not None:
            raise err
        name, msg = e
        cls = {"CorruptCheckpoint": CorruptCheckpoint,
               "IncompatibleSchema": IncompatibleSchema}.get(name, CheckpointError)
        raise cls(msg)


def checkpoint_save(obj: ParticleSet | DistributedGrid, path: str) -> None:
    """Write one chunk per rank into a single file; rank 0 adds header and footer."""
    world = obj.world
    dec = obj.dec
    if isinstance(obj, ParticleSet):
        kind, nodes = KIND_PARTICLES, ()
        count, body = _particle_chunk(obj)
    elif isinstance(obj, DistributedGrid):
        kind, nodes = KIND_GRID, tuple(int(n) for n in obj.nodes)
        count, body = _grid_chunk(obj)
    else:
        raise TypeError(f"cannot checkpoint {type(obj).__name__}")
    chunk = struct.pack("<IQ", world.rank, count) + body
    counts_lens = world.allgather_obj((count, len(chunk), crc32c(chunk)))
    total = sum(c for c, _, _ in counts_lens)
    header = Header(obj.dim, kind, obj.schema, dec.domain, dec.bc, total, nodes, world.size).encode()
    offsets = np.cumsum([len(header)] + [ln for _, ln, _ in counts_lens]).tolist()
    err = None
    if world.rank == 0:
        try:
            with open(path, "wb") as fh:
                fh.write(header)
        except OSError as exc:
            err = CheckpointError(f"rank 0: cannot create {path}: {exc}")
    _collective_ok(world, err)
    try:
        with open(path, "r+b") as fh:
            fh.seek(offsets[world.rank])
            fh.write(chunk)
    except OSError as exc:
        err = CheckpointError(f"rank {world.rank}: writing chunk to {path} failed: {exc}")
    _collective_ok(world, err)
    if world.rank == 0:
        footer = [struct.pack("<I", world.size)]
        for r, (_, ln, crc) in enumerate(counts_lens):
            footer.append(_FOOTER_ENTRY.pack(offsets[r], ln, crc))
        try:
            with open(path, "r+b") as fh:
                fh.seek(offsets[-1])
                fh.write(b"".join(footer) + _TRAILER.pack(offsets[-1], END_MAGIC))
                fh.truncate()
        except OSError as exc:
            err = CheckpointError(f"rank 0: writing footer to {path} failed: {exc}")
    _collective_ok(world, err)


@dataclass
class CheckpointIndex:
    header: Header
    chunks: list          # (offset, length, crc)


def read_index(path: str) -> CheckpointIndex:
    try:
        size = os.path.getsize(path)
        with open(path, "rb") as fh:
            if size < len(MAGIC) + _TRAILER.size:
                raise CorruptCheckpoint(f"{path}: file too short ({size} bytes)")
            fh.seek(size - _TRAILER.size)
            foot_off, end = _TRAILER.unpack(fh.read(_TRAILER.size))
            if end != END_MAGIC or foot_off >= size:
                raise CorruptCheckpoint(f"{path}: missing footer (incomplete or truncated file)")
            fh.seek(0)
            head = fh.read(foot_off)
            header = Header.decode(head)
            fh.seek(foot_off)
            foot = fh.read(size - _TRAILER.size - foot_off)
    except CheckpointError:
        raise
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    try:
        (n,) = struct.unpack_from("<I", foot, 0)
        chunks = [_FOOTER_ENTRY.unpack_from(foot, 4 + k * _FOOTER_ENTRY.size) for k in range(n)]
    except struct.error as exc:
        raise CorruptCheckpoint(f"{path}: malformed footer") from exc
    if 4 + n * _FOOTER_ENTRY.size != len(foot) or n != header.nranks:
        raise CorruptCheckpoint(f"{path}: footer lists {n} chunks, header expects {header.nranks}")
    for k, (off, ln, _) in enumerate(chunks):
        if off + ln > foot_off:
            raise CorruptCheckpoint(f"{path}: chunk {k} extends past the footer")
    return CheckpointIndex(header, chunks)


def _read_chunk(path: str, k: int, entry) -> memoryview:
    off, ln, crc = entry
    with open(path, "rb") as fh:
        fh.seek(off)
        data = fh.read(ln)
    if len(data) != ln or crc32c(data) != crc:
        raise CorruptCheckpoint(f"{path}: checksum mismatch in chunk {k}")
    return memoryview(data)


def _check_compat(h: Header, dec: Decomposition, schema: Schema | None, path: str):
    if h.kind not in (KIND_PARTICLES, KIND_GRID):
        raise IncompatibleSchema(f"{path}: unknown entity kind {h.kind}")
    if h.dim != dec.dim:
        raise IncompatibleSchema(f"{path} is {h.dim}-dimensional, decomposition is {dec.dim}-dimensional")
    if h.domain != dec.domain or tuple(int(b) for b in h.bc) != tuple(int(b) for b in dec.bc):
        raise IncompatibleSchema(f"{path}: saved domain/boundary conditions differ from the decomposition")
    if schema is not None and schema != h.schema:
        raise IncompatibleSchema(f"{path}: schema {h.schema.names} does not match expected {schema.names}")


def checkpoint_load(path: str, world: World, decomposition: Decomposition,
                    schema: Schema | None = None):
    """Read a checkpoint on any rank count: chunks round-robin to readers, then map.

    Returns a ParticleSet or a DistributedGrid on ``decomposition``.
    """
    err = None
    index = None
    try:
        index = read_index(path)
    except CheckpointError as exc:
        err = exc
    _collective_ok(world, err)
    h = index.header
    try:
        _check_compat(h, decomposition, schema, path)
    except CheckpointError as exc:
        err = exc
    _collective_ok(world, err)
    mine = list(range(world.rank, len(index.chunks), world.size))
    parsed = []
    total = 0
    try:
        for k in mine:
            buf = _read_chunk(path, k, index.chunks[k])
            item, n = _parse_chunk(h, buf, k, path)
            parsed.append(item)
            total += n
    except CheckpointError as exc:
        err = exc
    _collective_ok(world, err)
    if world.allreduce_sum(total) != h.global_size:
        raise CorruptCheckpoint(f"{path}: chunk counts do not add up to the global size {h.global_size}")
    if h.kind == KIND_PARTICLES:
        ps = ParticleSet(decomposition, h.schema, world)
        for pos, gid, cols in parsed:
            ps.add(pos, gid, **cols)
        ps.map_global()
        return ps
    grid = DistributedGrid(h.nodes, decomposition, h.schema, world)
    grid.load_blocks([blk for blocks in parsed for blk in blocks])
    return grid


def _parse_chunk(h: Header, buf: memoryview, k: int, path: str):
    d = h.dim
    try:
        rank, count = struct.unpack_from("<IQ", buf, 0)
        off = 12
        if h.kind == KIND_PARTICLES:
            pos = np.frombuffer(buf, dtype="<f8", count=count * d, offset=off).reshape(count, d).copy()
            off += 8 * d * count
            gid = np.frombuffer(buf, dtype="<i8", count=count, offset=off).astype(np.int64)
            off += 8 * count
            cols = {}
            for p in h.schema:
                cols[p.name], off = unpack_column(p, buf, off, count, d)
            item = (pos, gid, cols)
        else:
            (nb,) = struct.unpack_from("<I", buf, off)
            off += 4
            item = []
            for _ in range(nb):
                lo = np.array(struct.unpack_from(f"<{d}q", buf, off), dtype=np.int64)
                ext = np.array(struct.unpack_from(f"<{d}q", buf, off + 8 * d), dtype=np.int64)
                off += 16 * d
                vals = {}
                for p in h.schema:
                    shp = tuple(ext.tolist()) + p.shape(d)
                    cnt = int(np.prod(shp))
                    vals[p.name] = np.frombuffer(buf, dtype="<" + p.dtype, count=cnt,
                                                 offset=off).reshape(shp).astype(p.dtype)
                    off += 8 * cnt
                item.append((lo, lo + ext, vals))
            if sum(int(np.prod(hi - lo)) for lo, hi, _ in item) != count:
                raise ValueError("block sizes disagree with chunk count")
    except (struct.error, ValueError) as exc:
        raise CorruptCheckpoint(f"{path}: chunk {k} is malformed ({exc})") from exc
    if off != len(buf):
        raise CorruptCheckpoint(f"{path}: chunk {k} has {len(buf) - off} trailing bytes")
    return item, count


# ----------------------------------------------------------------------- VTK

def _fmt(v) -> str:
    s = repr(float(v))
    return s[:-2] if s.endswith(".0") else s


def _rows(arr: np.ndarray) -> str:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1:
        return "".join(_fmt(v) + "\n" for v in arr)
    return "".join(" ".join(_fmt(v) for v in row) + "\n" for row in arr)


def _vtk_type(dtype: str) -> str:
    return "double" if dtype == "f8" else "long"


def _point_data(schema: Schema, names, columns: dict, n: int, dim: int) -> list[str]:
    out = [f"POINT_DATA {n}\n"]
    for name in names:
        p = schema[name]
        col = columns[name]
        if p.kind == SCALAR:
            out.append(f"SCALARS {name} {_vtk_type(p.dtype)} 1\nLOOKUP_TABLE default\n")
            out.append(_rows(np.asarray(col).reshape(n)))
        elif p.kind == VECTOR:
            if dim > 3:
                log.warning("skipping vector property %r: VTK vectors have at most 3 components", name)
                continue
            v = np.zeros((n, 3))
            v[:, :dim] = np.asarray(col).reshape(n, dim)
            out.append(f"VECTORS {name} {_vtk_type(p.dtype)}\n")
            out.append(_rows(v))
        elif p.kind == ARRAY and p.size <= 4:
            out.append(f"SCALARS {name} {_vtk_type(p.dtype)} {p.size}\nLOOKUP_TABLE default\n")
            out.append(_rows(np.asarray(col).reshape(n, p.size)))
        else:
            log.warning("skipping property %r: no legacy VTK representation", name)
    return out


def vtk_write_particles(pset: ParticleSet, path: str, props=None) -> str:
    """Write this rank's owned particles to ``<path>.<rank>.vtk`` (POLYDATA)."""
    n = pset.n_owned
    d = pset.dim
    names = pset.schema.names if props is None else list(props)
    pts = np.zeros((n, 3))
    k = min(d, 3)
    pts[:, :k] = pset.pos[:n, :k]
    if d > 3:
        log.warning("positions have %d components; writing the first three", d)
    out = ["# vtk DataFile Version 3.0\n", "partmesh particles\n", "ASCII\n", "DATASET POLYDATA\n",
           f"POINTS {n} double\n", _rows(pts), f"VERTICES {n} {2 * n}\n",
           "".join(f"1 {i}\n" for i in range(n))]
    cols = {name: pset.props[name][:n] for name in names}
    out += _point_data(pset.schema, names, cols, n, d)
    fname = f"{path}.{pset.rank}.vtk"
    with open(fname, "w") as fh:
        fh.write("".join(out))
    return fname


def vtk_write_grid(grid: DistributedGrid, path: str, props=None) -> list[str]:
    """One STRUCTURED_POINTS file per local block.

    A rank with a single block writes ``<path>.<rank>.vtk``; with several,
    ``<path>.<rank>.<block>.vtk``.
    """
    if grid.dim > 3:
        raise CheckpointError("STRUCTURED_POINTS output supports at most 3 dimensions")
    names = grid.schema.names if props is None else list(props)
    files = []
    for k, b in enumerate(grid.blocks):
        dims = list(b.shape) + [1] * (3 - grid.dim)
        origin = list(grid.node_position(b.lo)) + [0.0] * (3 - grid.dim)
        spacing = list(grid.spacing) + [1.0] * (3 - grid.dim)
        n = int(np.prod(b.shape))
        out = ["# vtk DataFile Version 3.0\n", "partmesh grid\n", "ASCII\n",
               "DATASET STRUCTURED_POINTS\n", "DIMENSIONS " + " ".join(map(str, dims)) + "\n",
               "ORIGIN " + " ".join(_fmt(v) for v in origin) + "\n",
               "SPACING " + " ".join(_fmt(v) for v in spacing) + "\n"]
        cols = {}
        for name in names:
            v = b.view(name)
            # x-fastest point order
            flat = v.reshape((n,) + v.shape[grid.dim:], order="F") if v.ndim == grid.dim else \
                np.stack([v[..., c].reshape(n, order="F") for c in range(v.shape[-1])], axis=1)
            cols[name] = flat
        out += _point_data(grid.schema, names, cols, n, grid.dim)
        fname = f"{path}.{grid.rank}.vtk" if len(grid.blocks) == 1 else f"{path}.{grid.rank}.{k}.vtk"
        with open(fname, "w") as fh:
            fh.write("".join(out))
        files.append(fname)
    return files
