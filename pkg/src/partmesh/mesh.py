"""Distributed regular Cartesian grids.

Node ``i`` on axis ``d`` sits at ``low[d] + i * h[d]`` with
``h = extent / nodes``.  Each local sub-domain owns a dense block of nodes,
stored with a frame of ``g[d]`` ghost layers on every side.  Arrays are
indexed ``[k_0, k_1, ..., component]``.
"""
from __future__ import annotations

import itertools
import pickle
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .decomposition import Decomposition, SubDomain
from .errors import UsageError
from .geometry import PERIODIC
from .schema import LIST, Prop, Schema
from .transport import World, serial_world


@dataclass
class Block:
    sub_id: int                 # global sub-domain id in the decomposition
    lo: np.ndarray              # first owned node key
    hi: np.ndarray              # one past the last owned node key
    frame: np.ndarray           # ghost layers per axis
    data: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(v) for v in self.hi - self.lo)

    @property
    def owned(self) -> tuple[slice, ...]:
        return tuple(slice(int(g), int(g + n)) for g, n in zip(self.frame, self.hi - self.lo))

    def view(self, prop: str) -> np.ndarray:
        return self.data[prop][self.owned]

    def local_slices(self, lo, hi) -> tuple[slice, ...]:
        """Storage slices for the global key range [lo, hi)."""
        off = self.frame - self.lo
        return tuple(slice(int(a + o), int(b + o)) for a, b, o in zip(lo, hi, off))

    def owns(self, key) -> bool:
        return bool(np.all(key >= self.lo) and np.all(key < self.hi))

    def holds(self, key) -> bool:
        return bool(np.all(key >= self.lo - self.frame) and np.all(key < self.hi + self.frame))


@dataclass(frozen=True)
class _Copy:
    """Nodes [lo, hi) of sub-domain ``src_sub`` land at [lo+shift, hi+shift) in ``dst_sub``'s frame."""
    src_rank: int
    src_sub: int
    dst_rank: int
    dst_sub: int
    lo: tuple[int, ...]
    hi: tuple[int, ...]
    shift: tuple[int, ...]


class DistributedGrid:
    def __init__(self, nodes_per_axis: Sequence[int], decomposition: Decomposition,
                 schema: Schema | Iterable[Prop], world: World | None = None):
        self.dec = decomposition
        self.dim = decomposition.dim
        self.schema = schema if isinstance(schema, Schema) else Schema(schema)
        for p in self.schema:
            if p.kind == LIST:
                raise UsageError(f"grid property {p.name!r}: list properties are not supported on grids")
        self.world = world if world is not None else serial_world()
        if self.world.size != decomposition.nranks:
            raise UsageError(f"decomposition has {decomposition.nranks} ranks, world has "
                             f"{self.world.size}")
        nodes = np.asarray([int(n) for n in nodes_per_axis], dtype=np.int64)
        if len(nodes) != self.dim or np.any(nodes < 1):
            raise UsageError("nodes_per_axis must hold one positive count per dimension")
        cells = np.asarray(decomposition.grid.cells_per_axis, dtype=np.int64)
        if np.any(nodes % cells):
            raise UsageError(f"grid of {tuple(nodes)} nodes does not align with the "
                             f"{tuple(cells)} sub-sub-domain cells: node counts must be "
                             f"divisible by the cell counts per axis")
        self.nodes = nodes
        self.per_cell = nodes // cells
        dom = decomposition.domain
        self.low = np.asarray(dom.low)
        self.spacing = np.asarray(dom.extent) / nodes
        self.periodic = np.array([b == PERIODIC for b in decomposition.bc])
        self.frame = np.array([decomposition.ghost.node_width(h) for h in self.spacing], dtype=np.int64)
        self.blocks: list[Block] = []
        for sid in decomposition.local_ids(self.rank):
            self.blocks.append(self._new_block(sid))
        self._plan: list[_Copy] | None = None

    # -- layout

    @property
    def rank(self) -> int:
        return self.world.rank

    def sub_range(self, sid: int) -> tuple[np.ndarray, np.ndarray]:
        s: SubDomain = self.dec.flat[sid]
        return (np.asarray(s.lo, dtype=np.int64) * self.per_cell,
                np.asarray(s.hi, dtype=np.int64) * self.per_cell)

    def _new_block(self, sid: int) -> Block:
        lo, hi = self.sub_range(sid)
        b = Block(sid, lo, hi, self.frame.copy())
        full = tuple(int(n) for n in hi - lo + 2 * self.frame)
        for p in self.schema:
            b.data[p.name] = np.zeros(full + p.shape(self.dim), dtype=np.dtype(p.dtype))
        return b

    def block_of(self, sid: int) -> Block:
        for b in self.blocks:
            if b.sub_id == sid:
                return b
        raise UsageError(f"sub-domain {sid} is not local to rank {self.rank}")

    def n_owned(self) -> int:
        return int(sum(np.prod(b.hi - b.lo) for b in self.blocks))

    def node_position(self, key) -> np.ndarray:
        return self.low + np.asarray(key) * self.spacing

    def node_positions(self, block: Block) -> list[np.ndarray]:
        """Per-axis coordinates of the block's storage (frame included)."""
        return [self.low[d] + np.arange(block.lo[d] - block.frame[d], block.hi[d] + block.frame[d])
                * self.spacing[d] for d in range(self.dim)]

    # -- element access

    def _resolve(self, key, owned_only: bool) -> Block:
        key = np.asarray(key, dtype=np.int64)
        if key.shape != (self.dim,):
            raise UsageError(f"grid key must have {self.dim} components")
        for b in self.blocks:
            if b.owns(key):
                return b
        if not owned_only:
            for b in self.blocks:
                if b.holds(key):
                    return b
        where = "owned region" if owned_only else "owned or ghost region"
        raise UsageError(f"key {tuple(key)} is outside the {where} of rank {self.rank}")

    def get(self, key, prop: str):
        b = self._resolve(key, owned_only=False)
        idx = tuple(int(k - lo + g) for k, lo, g in zip(key, b.lo, b.frame))
        return b.data[prop][idx].copy() if b.data[prop].ndim > self.dim else b.data[prop][idx]

    def set(self, key, prop: str, value):
        b = self._resolve(key, owned_only=True)
        idx = tuple(int(k - lo + g) for k, lo, g in zip(key, b.lo, b.frame))
        b.data[prop][idx] = value

    def fill(self, prop: str, fn):
        """Set owned nodes from ``fn(*coordinate_arrays)`` evaluated on node positions."""
        for b in self.blocks:
            axes = [self.low[d] + np.arange(b.lo[d], b.hi[d]) * self.spacing[d]
                    for d in range(self.dim)]
            mesh = np.meshgrid(*axes, indexing="ij")
            b.view(prop)[...] = fn(*mesh)

    # -- ghost exchange

    def ghost_plan(self) -> list[_Copy]:
        """All frame copies in the world, computed identically on every rank."""
        if self._plan is not None:
            return self._plan
        plan = []
        if np.any(self.frame > 0):
            shifts = itertools.product(*[(-int(n), 0, int(n)) if p else (0,)
                                         for n, p in zip(self.nodes, self.periodic)])
            shifts = [np.asarray(s, dtype=np.int64) for s in shifts]
            ranges = [self.sub_range(i) for i in range(len(self.dec.flat))]
            for dst, (dlo, dhi) in enumerate(ranges):
                flo, fhi = dlo - self.frame, dhi + self.frame
                for src, (slo, shi) in enumerate(ranges):
                    for s in shifts:
                        if src == dst and not s.any():
                            continue
                        lo = np.maximum(flo - s, slo)
                        hi = np.minimum(fhi - s, shi)
                        if np.any(lo >= hi):
                            continue
                        plan.append(_Copy(self.dec.flat[src].rank, src, self.dec.flat[dst].rank, dst,
                                          tuple(lo.tolist()), tuple(hi.tolist()), tuple(s.tolist())))
        self._plan = plan
        return plan

    def ghost_get(self, props: Iterable[str] | None = None):
        """Copy owner values into every ghost frame (periodic axes wrap)."""
        names = [p.name for p in self.schema.select(None if props is None else list(props))]
        plan = self.ghost_plan()
        me = self.rank
        outgoing: dict[int, list] = {}
        for c in plan:
            if c.src_rank != me:
                continue
            sb = self.block_of(c.src_sub)
            sl = sb.local_slices(c.lo, c.hi)
            vals = [sb.data[n][sl] for n in names]
            if c.dst_rank == me:
                self._write_frame(c, names, vals)
            else:
                outgoing.setdefault(c.dst_rank, []).append([np.ascontiguousarray(v) for v in vals])
        sources = sorted({c.src_rank for c in plan if c.dst_rank == me and c.src_rank != me})
        received = self.world.exchange({r: pickle.dumps(v) for r, v in outgoing.items()}, sources)
        for src in sources:
            items = iter(pickle.loads(received[src]))
            for c in plan:
                if c.src_rank == src and c.dst_rank == me:
                    self._write_frame(c, names, next(items))

    def _write_frame(self, c: _Copy, names, vals):
        db = self.block_of(c.dst_sub)
        lo = np.asarray(c.lo) + c.shift
        hi = np.asarray(c.hi) + c.shift
        sl = db.local_slices(lo, hi)
        for n, v in zip(names, vals):
            db.data[n][sl] = v

    def ghost_put(self, props: Iterable[str] | None = None):
        """Add frame values onto their owners (SUM), then zero the frames."""
        names = [p.name for p in self.schema.select(None if props is None else list(props))]
        plan = self.ghost_plan()
        me = self.rank
        outgoing: dict[int, list] = {}
        local = []
        for c in plan:
            if c.dst_rank != me:
                continue
            db = self.block_of(c.dst_sub)
            sl = db.local_slices(np.asarray(c.lo) + c.shift, np.asarray(c.hi) + c.shift)
            vals = [db.data[n][sl].copy() for n in names]
            if c.src_rank == me:
                local.append((c, vals))
            else:
                outgoing.setdefault(c.src_rank, []).append(vals)
        sources = sorted({c.dst_rank for c in plan if c.src_rank == me and c.dst_rank != me})
        received = self.world.exchange({r: pickle.dumps(v) for r, v in outgoing.items()}, sources)
        self.zero_frames(names)
        contributions = list(local)
        for src in sources:
            items = iter(pickle.loads(received[src]))
            for c in plan:
                if c.dst_rank == src and c.src_rank == me:
                    contributions.append((c, next(items)))
        # fixed fold order: by (destination sub-domain, shift), whatever the rank count
        contributions.sort(key=lambda cv: (cv[0].dst_sub, cv[0].shift, cv[0].src_sub))
        for c, vals in contributions:
            sb = self.block_of(c.src_sub)
            sl = sb.local_slices(c.lo, c.hi)
            for n, v in zip(names, vals):
                sb.data[n][sl] += v

    def zero_frames(self, names: Iterable[str] | None = None):
        names = self.schema.names if names is None else list(names)
        for b in self.blocks:
            for n in names:
                arr = b.data[n]
                keep = arr[b.owned].copy()
                arr[...] = 0
                arr[b.owned] = keep

    # -- gather / redistribute

    def owned_blocks(self, names: Iterable[str] | None = None) -> list[tuple]:
        names = self.schema.names if names is None else list(names)
        return [(b.lo.copy(), b.hi.copy(), {n: b.view(n).copy() for n in names}) for b in self.blocks]

    def gather(self, props: Iterable[str] | None = None) -> dict[str, np.ndarray]:
        """Global arrays of the owned values, replicated on every rank."""
        names = self.schema.names if props is None else list(props)
        out = {n: np.zeros(tuple(self.nodes) + self.schema[n].shape(self.dim),
                           dtype=np.dtype(self.schema[n].dtype)) for n in names}
        covered = np.zeros(tuple(self.nodes), dtype=np.int64)
        for part in self.world.allgather_obj(self.owned_blocks(names)):
            for lo, hi, vals in part:
                sl = tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))
                covered[sl] += 1
                for n in names:
                    out[n][sl] = vals[n]
        if np.any(covered != 1):
            raise UsageError("grid blocks do not tile the node range")
        return out

    def load_blocks(self, blocks: Sequence[tuple]):
        """Scatter arbitrary owned blocks ``(lo, hi, {prop: values})`` onto this grid."""
        ranges = [(i, *self.sub_range(i)) for i in range(len(self.dec.flat))]
        outgoing: dict[int, list] = {}
        for lo, hi, vals in blocks:
            lo = np.asarray(lo)
            hi = np.asarray(hi)
            for sid, slo, shi in ranges:
                a = np.maximum(lo, slo)
                z = np.minimum(hi, shi)
                if np.any(a >= z):
                    continue
                sl = tuple(slice(int(p - q), int(r - q)) for p, r, q in zip(a, z, lo))
                piece = (sid, a, z, {n: np.ascontiguousarray(v[sl]) for n, v in vals.items()})
                outgoing.setdefault(self.dec.flat[sid].rank, []).append(piece)
        received = self.world.nbx_exchange({r: pickle.dumps(v) for r, v in outgoing.items()})
        for src in sorted(received):
            for sid, a, z, vals in pickle.loads(received[src]):
                b = self.block_of(sid)
                sl = b.local_slices(a, z)
                for n, v in vals.items():
                    b.data[n][sl] = v


def grid_create(nodes_per_axis: Sequence[int], decomposition: Decomposition, schema,
                world: World | None = None) -> DistributedGrid:
    return DistributedGrid(nodes_per_axis, decomposition, schema, world)


def grid_redistribute(grid: DistributedGrid, new_decomposition: Decomposition) -> DistributedGrid:
    """Move all owned node values onto ``new_decomposition``; frames start at zero."""
    if new_decomposition.domain != grid.dec.domain or new_decomposition.bc != grid.dec.bc:
        raise UsageError("new decomposition covers a different domain or boundary conditions")
    new = DistributedGrid(grid.nodes, new_decomposition, grid.schema, grid.world)
    new.load_blocks(grid.owned_blocks())
    return new


# ------------------------------------------------------------------- stencils

def star_stencil(dim: int) -> list[tuple[int, ...]]:
    """Centre first, then -/+ neighbours along each axis."""
    out = [tuple([0] * dim)]
    for d in range(dim):
        for s in (-1, 1):
            off = [0] * dim
            off[d] = s
            out.append(tuple(off))
    return out


def _check_stencil(grid: DistributedGrid, stencil) -> np.ndarray:
    st = np.asarray(stencil, dtype=np.int64).reshape(-1, grid.dim)
    reach = np.abs(st).max(axis=0) if len(st) else np.zeros(grid.dim, dtype=np.int64)
    if np.any(reach > grid.frame):
        raise UsageError(f"stencil reaches {tuple(reach)} nodes, ghost frame is {tuple(grid.frame)}")
    return st


def stencil_views(grid: DistributedGrid, block: Block, prop: str, stencil) -> list[np.ndarray]:
    """One array view per offset, each aligned with the owned nodes of ``block``."""
    st = _check_stencil(grid, stencil)
    arr = block.data[prop]
    out = []
    for off in st:
        sl = tuple(slice(int(g + o), int(g + o + n)) for g, o, n in zip(block.frame, off, block.shape))
        out.append(arr[sl])
    return out


def stencil_iterate(grid: DistributedGrid, stencil) -> Iterator[tuple]:
    """Yield ``(key, block, [storage index per offset])`` for every owned node."""
    st = _check_stencil(grid, stencil)
    for b in grid.blocks:
        base = b.frame
        for local in itertools.product(*[range(n) for n in b.shape]):
            centre = np.asarray(local) + base
            key = tuple(int(v) for v in np.asarray(local) + b.lo)
            yield key, b, [tuple(int(v) for v in centre + o) for o in st]
