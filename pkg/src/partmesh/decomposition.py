"""Domain decomposition: sub-sub-domain grid, cost graph, rank assignment,
greedy merging into cuboid sub-domains and ghost-overlap tables.

Cells are numbered x-fastest.  Every tie is broken towards the lowest cell
index so that all ranks compute identical results from identical inputs.
"""
from __future__ import annotations

import math
import pickle
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import UsageError
from .geometry import (BC, PERIODIC, Box, Ghost, as_bc, box_enlarge, box_intersect,
                       hilbert_index, periodic_shifts, periodic_wrap)

DEFAULT_GRANULARITY = 16


@dataclass(frozen=True)
class SubSubGrid:
    domain: Box
    cells_per_axis: tuple[int, ...]

    def __post_init__(self):
        cells = tuple(int(c) for c in self.cells_per_axis)
        if len(cells) != self.domain.dim or any(c < 1 for c in cells):
            raise UsageError(f"invalid cells_per_axis {self.cells_per_axis}")
        object.__setattr__(self, "cells_per_axis", cells)

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def ncells(self) -> int:
        return int(np.prod(self.cells_per_axis))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.cells_per_axis

    @property
    def cell_size(self) -> np.ndarray:
        return self.domain.extent / np.asarray(self.cells_per_axis)

    @property
    def edges(self) -> list[np.ndarray]:
        """Cell boundaries per axis; the last edge is the domain's high corner exactly."""
        out = []
        for d, c in enumerate(self.cells_per_axis):
            lo, hi = self.domain.low[d], self.domain.high[d]
            e = lo + np.arange(c + 1) * ((hi - lo) / c)
            e[-1] = hi
            out.append(e)
        return out

    def keys(self) -> np.ndarray:
        """(ncells, D) integer keys in linear (x-fastest) order."""
        idx = np.arange(self.ncells)
        return np.stack(np.unravel_index(idx, self.shape, order="F"), axis=1)

    def linear(self, keys) -> np.ndarray:
        keys = np.asarray(keys).reshape(-1, self.dim)
        return np.ravel_multi_index(tuple(keys.T), self.shape, order="F")

    def cell_box(self, idx: int) -> Box:
        key = np.unravel_index(int(idx), self.shape, order="F")
        edges = self.edges
        return Box(tuple(edges[d][k] for d, k in enumerate(key)),
                   tuple(edges[d][k + 1] for d, k in enumerate(key)))

    def range_box(self, lo: Sequence[int], hi: Sequence[int]) -> Box:
        edges = self.edges
        return Box(tuple(edges[d][lo[d]] for d in range(self.dim)),
                   tuple(edges[d][hi[d]] for d in range(self.dim)))

    def cell_keys_of_points(self, pos: np.ndarray) -> np.ndarray:
        """Cell key per point under the half-open cell boxes; -1 rows for points outside."""
        pos = np.asarray(pos, dtype=np.float64).reshape(-1, self.dim)
        keys = np.empty(pos.shape, dtype=np.int64)
        outside = np.zeros(len(pos), dtype=bool)
        for d, e in enumerate(self.edges):
            c = self.cells_per_axis[d]
            x = pos[:, d]
            k = np.floor((x - e[0]) * (c / (e[-1] - e[0]))).astype(np.int64)
            np.clip(k, 0, c - 1, out=k)
            # agree exactly with the edge array
            k -= (x < e[k]) & (k > 0)
            k += (x >= e[k + 1]) & (k < c - 1)
            outside |= (x < e[0]) | (x >= e[-1]) | ~np.isfinite(x)
            keys[:, d] = k
        keys[outside] = -1
        return keys

    def cell_of_points(self, pos: np.ndarray) -> np.ndarray:
        keys = self.cell_keys_of_points(pos)
        out = np.full(len(keys), -1, dtype=np.int64)
        ok = keys[:, 0] >= 0
        if np.any(ok):
            out[ok] = self.linear(keys[ok])
        return out


def create_sub_sub_grid(domain: Box, nranks: int, granularity: int | None = None,
                        cells_per_axis: Sequence[int] | None = None) -> SubSubGrid:
    """Power-of-two cell counts per axis, refined along the axis with the
    largest cell extent until there are at least ``granularity * nranks`` cells.
    """
    if nranks < 1:
        raise UsageError("nranks must be >= 1")
    ext = domain.extent
    if np.any(ext <= 0):
        raise UsageError(f"degenerate domain with extents {tuple(ext)}")
    if cells_per_axis is not None:
        grid = SubSubGrid(domain, tuple(cells_per_axis))
        if grid.ncells < nranks:
            raise UsageError(f"{grid.ncells} cells cannot serve {nranks} ranks")
        return grid
    g = DEFAULT_GRANULARITY if granularity is None else int(granularity)
    target = max(g * nranks, nranks)
    cells = [1] * domain.dim
    while math.prod(cells) < target:
        size = [ext[d] / cells[d] for d in range(domain.dim)]
        d = int(np.argmax(size))  # first maximum wins ties
        cells[d] *= 2
    return SubSubGrid(domain, tuple(cells))


@dataclass
class DecompositionGraph:
    vertex_cost: np.ndarray
    edges: np.ndarray  # (E, 2) with edges[:, 0] < edges[:, 1]
    edge_weight: np.ndarray

    @property
    def nvertices(self) -> int:
        return len(self.vertex_cost)

    def weight(self, i: int, j: int) -> float:
        a, b = min(i, j), max(i, j)
        hit = np.nonzero((self.edges[:, 0] == a) & (self.edges[:, 1] == b))[0]
        return float(self.edge_weight[hit[0]]) if len(hit) else 0.0

    def edge_cut(self, owner: np.ndarray) -> float:
        owner = np.asarray(owner)
        cut = owner[self.edges[:, 0]] != owner[self.edges[:, 1]]
        return float(self.edge_weight[cut].sum())


def build_graph(grid: SubSubGrid, costs, bc: Sequence[BC], ghost: Ghost | float) -> DecompositionGraph:
    """Cells are vertices weighted by ``costs``; face-adjacent cells are joined by
    an edge of weight shared-face area x ghost width.  Periodic wrap edges are
    included and duplicate edges between the same pair are summed.
    """
    width = ghost.width if isinstance(ghost, Ghost) else float(ghost)
    bc = as_bc(bc, grid.dim)
    costs = np.asarray(costs, dtype=np.float64).reshape(-1)
    if len(costs) != grid.ncells:
        raise UsageError(f"expected {grid.ncells} costs, got {len(costs)}")
    if np.any(costs < 0) or not np.all(np.isfinite(costs)):
        raise UsageError("vertex costs must be finite and nonnegative")
    keys = grid.keys()
    size = grid.cell_size
    acc: dict[tuple[int, int], float] = {}
    for d in range(grid.dim):
        c = grid.cells_per_axis[d]
        face = float(np.prod(np.delete(size, d)))
        w = face * width
        nb = keys.copy()
        nb[:, d] += 1
        if bc[d] == PERIODIC:
            nb[:, d] %= c
            valid = np.ones(len(keys), dtype=bool)
        else:
            valid = nb[:, d] < c
        src = np.nonzero(valid)[0]
        dst = grid.linear(nb[valid])
        for i, j in zip(src.tolist(), dst.tolist()):
            if i == j:
                continue
            key = (i, j) if i < j else (j, i)
            acc[key] = acc.get(key, 0.0) + w
    if acc:
        items = sorted(acc.items())
        edges = np.array([k for k, _ in items], dtype=np.int64)
        weights = np.array([v for _, v in items], dtype=np.float64)
    else:
        edges = np.zeros((0, 2), dtype=np.int64)
        weights = np.zeros(0)
    return DecompositionGraph(costs.copy(), edges, weights)


def hilbert_order(grid: SubSubGrid) -> np.ndarray:
    """Cell indices sorted along the Hilbert curve."""
    order = max(int(math.ceil(math.log2(c))) if c > 1 else 0 for c in grid.cells_per_axis)
    keys = grid.keys()
    h = np.array([hilbert_index(k, order) for k in keys.tolist()], dtype=np.int64)
    return np.argsort(h, kind="stable")


def partition_sfc(graph: DecompositionGraph, grid: SubSubGrid, nranks: int) -> np.ndarray:
    """Cut the Hilbert-ordered cells into ``nranks`` contiguous runs.

    Each cut is placed where the running cost is closest to the ideal
    cumulative share (earliest position on ties).
    """
    if any(c & (c - 1) for c in grid.cells_per_axis):
        raise UsageError("space-filling-curve partitioning needs power-of-two cells per axis")
    n = grid.ncells
    owner = np.zeros(n, dtype=np.int64)
    if nranks == 1:
        return owner
    seq = hilbert_order(grid)
    cost = graph.vertex_cost[seq]
    prefix = np.cumsum(cost)
    total = prefix[-1] if n else 0.0
    cuts = []
    prev = 0
    for r in range(1, nranks):
        target = total * r / nranks
        # cut position p means cells seq[:p] go to ranks < r
        lo = prev + 1 if n >= nranks else prev
        hi = n - (nranks - r) if n >= nranks else n
        lo, hi = min(lo, hi), hi
        cand = np.arange(lo, hi + 1)
        before = np.where(cand > 0, prefix[np.maximum(cand - 1, 0)], 0.0)
        p = int(cand[np.argmin(np.abs(before - target))])
        cuts.append(p)
        prev = p
    bounds = [0] + cuts + [n]
    for r in range(nranks):
        owner[seq[bounds[r]:bounds[r + 1]]] = r
    return owner


def refine_objective(graph: DecompositionGraph, owner: np.ndarray, nranks: int, seed: np.ndarray,
                     migration: np.ndarray | None, discount: float, alpha: float, beta: float) -> float:
    loads = np.bincount(owner, weights=graph.vertex_cost, minlength=nranks)
    mean = loads.mean() if loads.sum() > 0 else 1.0
    imbalance = float(np.sum(((loads - mean) / mean) ** 2))
    moved = 0.0
    if migration is not None:
        moved = float(np.sum(migration[owner != seed]))
    return alpha * imbalance + beta * graph.edge_cut(owner) + discount * moved


def partition_graph_refine(graph: DecompositionGraph, nranks: int, seed,
                           migration=None, discount: float = 1.0, alpha: float | None = None,
                           beta: float = 1.0, max_moves: int | None = None) -> np.ndarray:
    """Steepest-descent boundary refinement of an assignment.

    Minimises ``alpha * sum_r ((L_r - mean) / mean)^2 + beta * edge_cut
    + discount * sum(migration[moved])``.  Each iteration evaluates every
    single-vertex move to a neighbouring rank and every swap across a cut edge,
    applies the best strictly improving one (lowest index on ties) and stops
    when none improves or after ``max_moves`` moves.
    """
    seed = np.asarray(seed, dtype=np.int64).copy()
    owner = seed.copy()
    n = graph.nvertices
    if nranks == 1 or n == 0 or len(graph.edges) == 0:
        return owner
    cost = graph.vertex_cost
    if alpha is None:
        alpha = (cost.mean() if n else 1.0) * nranks
    mig = np.zeros(n) if migration is None else np.asarray(migration, dtype=np.float64) * discount
    if max_moves is None:
        max_moves = 4 * n
    e0, e1 = graph.edges[:, 0], graph.edges[:, 1]
    w = graph.edge_weight
    total = cost.sum()
    mean = total / nranks if total > 0 else 1.0
    scale = alpha / mean ** 2
    loads = np.bincount(owner, weights=cost, minlength=nranks).astype(np.float64)
    counts = np.bincount(owner, minlength=nranks)
    tol = 1e-12 * max(1.0, alpha, float(w.sum()), float(mig.sum()))

    def mig_delta(v, old, new):
        return mig[v] * ((new != seed[v]).astype(float) - (old != seed[v]).astype(float))

    for _ in range(max_moves):
        # W[v, r]: edge weight from v to cells owned by r
        W = np.zeros((n, nranks))
        np.add.at(W, (e0, owner[e1]), w)
        np.add.at(W, (e1, owner[e0]), w)
        best = (0.0, None)

        # single moves of boundary vertices
        cut = owner[e0] != owner[e1]
        cv = np.concatenate([e0[cut], e1[cut]])
        cr = np.concatenate([owner[e1[cut]], owner[e0[cut]]])
        if len(cv):
            pairs = np.unique(np.stack([cv, cr], axis=1), axis=0)
            v, b = pairs[:, 0], pairs[:, 1]
            a = owner[v]
            c = cost[v]
            d_imb = scale * (2 * c * c - 2 * c * (loads[a] - loads[b]))
            d_cut = beta * (W[v, a] - W[v, b])
            d = d_imb + d_cut + mig_delta(v, a, b)
            d[counts[a] <= 1] = np.inf  # keep every rank nonempty
            k = int(np.argmin(d))
            if d[k] < -tol:
                best = (float(d[k]), ("move", int(v[k]), int(b[k])))

            # swaps across cut edges
            u, x = e0[cut], e1[cut]
            wu = w[cut]
            a, b = owner[u], owner[x]
            dc = cost[u] - cost[x]
            d_imb = scale * (2 * dc * dc - 2 * dc * (loads[a] - loads[b]))
            d_cut = beta * ((W[u, a] - W[u, b]) + (W[x, b] - W[x, a]) + 2 * wu)
            d = d_imb + d_cut + mig_delta(u, a, b) + mig_delta(x, b, a)
            if len(d):
                k = int(np.argmin(d))
                if d[k] < -tol and d[k] < best[0]:
                    best = (float(d[k]), ("swap", int(u[k]), int(x[k])))
        if best[1] is None:
            break
        kind, p, q = best[1]
        if kind == "move":
            a = owner[p]
            loads[a] -= cost[p]
            loads[q] += cost[p]
            counts[a] -= 1
            counts[q] += 1
            owner[p] = q
        else:
            a, b = owner[p], owner[q]
            loads[a] += cost[q] - cost[p]
            loads[b] += cost[p] - cost[q]
            owner[p], owner[q] = b, a
    return owner


@dataclass(frozen=True)
class SubDomain:
    box: Box
    lo: tuple[int, ...]  # first cell key (inclusive)
    hi: tuple[int, ...]  # last cell key + 1 (exclusive)
    rank: int

    @property
    def ncells(self) -> int:
        return int(np.prod(np.subtract(self.hi, self.lo)))

    def cells(self, grid: SubSubGrid) -> np.ndarray:
        # stride arithmetic rather than meshgrid, which caps the dimension at 32
        idx = np.zeros(1, dtype=np.int64)
        stride = 1
        for a, b, n in zip(self.lo, self.hi, grid.shape):
            idx = (idx[:, None] + np.arange(a, b, dtype=np.int64)[None, :] * stride).ravel()
            stride *= n
        return np.sort(idx)


def merge_sub_domains(assignment, grid: SubSubGrid, rank: int) -> list[SubDomain]:
    """Greedy cuboid merging of the cells owned by ``rank``.

    A seed cell grows by one cell layer at a time in the order +x, +y, ...,
    -x, -y, ...; a layer is accepted only if all its cells are owned by
    ``rank`` and unconsumed.  Rounds repeat until no face can move.  The next
    seed is the lowest-index free owned cell touching the last cuboid, else
    the lowest-index free owned cell overall.
    """
    owner = np.asarray(assignment).reshape(-1)
    shape = grid.shape
    D = grid.dim
    free = (owner == rank).reshape(shape, order="F").copy()
    out: list[SubDomain] = []
    last: tuple[list[int], list[int]] | None = None

    def lowest(mask: np.ndarray) -> int | None:
        flat = np.nonzero(mask.ravel(order="F"))[0]
        return int(flat[0]) if len(flat) else None

    while free.any():
        seed = None
        if last is not None:
            lo, hi = last
            border = np.zeros(shape, dtype=bool)
            for d in range(D):
                for pos in (lo[d] - 1, hi[d]):
                    if 0 <= pos < shape[d]:
                        sl = [slice(lo[k], hi[k]) for k in range(D)]
                        sl[d] = slice(pos, pos + 1)
                        border[tuple(sl)] = True
            seed = lowest(border & free)
        if seed is None:
            seed = lowest(free)
        key = np.unravel_index(seed, shape, order="F")
        lo = [int(k) for k in key]
        hi = [int(k) + 1 for k in key]
        grown = True
        while grown:
            grown = False
            for direction in [(d, +1) for d in range(D)] + [(d, -1) for d in range(D)]:
                d, s = direction
                pos = hi[d] if s > 0 else lo[d] - 1
                if not 0 <= pos < shape[d]:
                    continue
                sl = [slice(lo[k], hi[k]) for k in range(D)]
                sl[d] = slice(pos, pos + 1)
                if free[tuple(sl)].all():
                    if s > 0:
                        hi[d] += 1
                    else:
                        lo[d] -= 1
                    grown = True
        free[tuple(slice(a, b) for a, b in zip(lo, hi))] = False
        out.append(SubDomain(grid.range_box(lo, hi), tuple(lo), tuple(hi), rank))
        last = (lo, hi)
    return out


@dataclass(frozen=True)
class GhostBox:
    box: Box                # region in the coordinates of the data holder
    peer: int               # remote rank (source for external, target for internal)
    shift: tuple[float, ...]  # added to source coordinates to land in the receiver's frame
    local_sub: int          # global id of this rank's sub-domain involved
    remote_sub: int         # global id of the peer's sub-domain involved


@dataclass
class GhostOverlapTable:
    external: list[GhostBox] = field(default_factory=list)
    internal: list[GhostBox] = field(default_factory=list)


def check_ghost(domain: Box, bc: Sequence[BC], ghost: Ghost):
    ext = domain.extent
    for d, b in enumerate(bc):
        if b == PERIODIC and ghost.width > ext[d] / 2:
            raise UsageError(f"ghost width {ghost.width} exceeds half the periodic extent "
                             f"{ext[d]} on axis {d}")


def compute_ghost_overlaps(all_subdomains: Sequence[Sequence[SubDomain]], ghost: Ghost,
                           domain: Box, bc: Sequence[BC]) -> list[GhostOverlapTable]:
    """External/internal ghost boxes for every rank.

    For each sub-domain S of rank A and each sub-domain T of rank B, including
    periodic images T + s, the overlap of the enlarged S with T + s becomes an
    external box on A and its preimage an internal box on B.  Same-rank pairs
    are skipped unless the image is shifted.
    """
    bc = as_bc(bc, domain.dim)
    ghost = ghost if isinstance(ghost, Ghost) else Ghost(float(ghost))
    check_ghost(domain, bc, ghost)
    nranks = len(all_subdomains)
    tables = [GhostOverlapTable() for _ in range(nranks)]
    if ghost.width == 0:
        return tables
    flat = [s for subs in all_subdomains for s in subs]
    shifts = periodic_shifts(domain, bc)
    zero = tuple(0.0 for _ in range(domain.dim))
    for i, S in enumerate(flat):
        big = box_enlarge(S.box, ghost)
        for j, T in enumerate(flat):
            for s in shifts:
                if S.rank == T.rank and s == zero:
                    continue
                pre = box_intersect(big.shifted(tuple(-v for v in s)), T.box)
                if pre is None:
                    continue
                ext = pre.shifted(s)
                tables[S.rank].external.append(GhostBox(ext, T.rank, s, i, j))
                tables[T.rank].internal.append(GhostBox(pre, S.rank, s, j, i))
    for t in tables:
        t.internal.sort(key=lambda g: (g.peer, g.remote_sub, g.local_sub, g.shift))
        t.external.sort(key=lambda g: (g.peer, g.remote_sub, g.local_sub, g.shift))
    return tables


class Decomposition:
    """Replicated decomposition state: every rank holds the full tables."""

    def __init__(self, domain: Box, bc: Sequence[BC], ghost: Ghost, grid: SubSubGrid,
                 owner: np.ndarray, subdomains: list[list[SubDomain]]):
        self.domain = domain
        self.bc = as_bc(bc, domain.dim)
        self.ghost = ghost if isinstance(ghost, Ghost) else Ghost(float(ghost))
        check_ghost(domain, self.bc, self.ghost)
        self.grid = grid
        self.owner = np.asarray(owner, dtype=np.int64)
        self.nranks = len(subdomains)
        self.subdomains = subdomains
        self.flat = [s for subs in subdomains for s in subs]
        self.cell_sub = np.full(grid.ncells, -1, dtype=np.int64)
        for i, s in enumerate(self.flat):
            self.cell_sub[s.cells(grid)] = i
        if np.any(self.cell_sub < 0):
            raise UsageError("sub-domains do not cover the domain")
        self.overlaps = compute_ghost_overlaps(subdomains, self.ghost, domain, self.bc)

    @property
    def dim(self) -> int:
        return self.domain.dim

    @classmethod
    def build(cls, domain: Box, bc, ghost, nranks: int, costs=None, method: str = "sfc",
              granularity: int | None = None, cells_per_axis=None, world=None) -> "Decomposition":
        ghost = ghost if isinstance(ghost, Ghost) else Ghost(float(ghost))
        bc = as_bc(bc, domain.dim)
        check_ghost(domain, bc, ghost)
        grid = create_sub_sub_grid(domain, nranks, granularity, cells_per_axis)
        if costs is None:
            costs = np.ones(grid.ncells)
        graph = build_graph(grid, costs, bc, ghost)
        owner = partition_sfc(graph, grid, nranks)
        if method == "graph":
            owner = partition_graph_refine(graph, nranks, owner)
        elif method != "sfc":
            raise UsageError(f"unknown partitioning method {method!r}")
        return cls.from_assignment(domain, bc, ghost, grid, owner, nranks, world)

    @classmethod
    def from_assignment(cls, domain, bc, ghost, grid, owner, nranks, world=None) -> "Decomposition":
        owner = np.asarray(owner, dtype=np.int64)
        if world is None:
            subs = [merge_sub_domains(owner, grid, r) for r in range(nranks)]
        else:
            if world.size != nranks:
                raise UsageError(f"decomposition for {nranks} ranks used in a world of {world.size}")
            mine = merge_sub_domains(owner, grid, world.rank)
            subs = [pickle.loads(b) for b in world.allgather(pickle.dumps(mine))]
        return cls(domain, bc, ghost, grid, owner, subs)

    def with_assignment(self, owner, world=None) -> "Decomposition":
        return Decomposition.from_assignment(self.domain, self.bc, self.ghost, self.grid, owner,
                                             self.nranks, world)

    def graph(self, costs=None) -> DecompositionGraph:
        if costs is None:
            costs = np.ones(self.grid.ncells)
        return build_graph(self.grid, costs, self.bc, self.ghost)

    def wrap(self, pos: np.ndarray) -> np.ndarray:
        return periodic_wrap(pos, self.domain, self.bc)

    def owner_of(self, pos: np.ndarray) -> np.ndarray:
        """Owning rank of each (already wrapped) position; -1 outside the domain."""
        cells = self.grid.cell_of_points(pos)
        out = np.full(len(cells), -1, dtype=np.int64)
        ok = cells >= 0
        out[ok] = self.owner[cells[ok]]
        return out

    def subdomain_of(self, pos: np.ndarray) -> np.ndarray:
        cells = self.grid.cell_of_points(pos)
        out = np.full(len(cells), -1, dtype=np.int64)
        ok = cells >= 0
        out[ok] = self.cell_sub[cells[ok]]
        return out

    def local(self, rank: int) -> list[SubDomain]:
        return self.subdomains[rank]

    def local_ids(self, rank: int) -> list[int]:
        return [i for i, s in enumerate(self.flat) if s.rank == rank]

    def neighbors(self, rank: int) -> list[int]:
        t = self.overlaps[rank]
        return sorted({g.peer for g in t.external} | {g.peer for g in t.internal})

    def compatible(self, other: "Decomposition") -> bool:
        return (self.domain == other.domain and self.bc == other.bc
                and self.grid.cells_per_axis == other.grid.cells_per_axis)
