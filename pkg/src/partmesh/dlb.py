"""Dynamic load balancing: cost ledger, Stop-At-Rise trigger and refinement-based rebalancing."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .decomposition import Decomposition, partition_graph_refine
from .mesh import DistributedGrid, grid_redistribute
from .particles import ParticleSet
from .transport import World


@dataclass
class CostLedger:
    """Per sub-sub-domain compute cost ``c`` and migration cost ``m``; per-step rank times."""

    compute: np.ndarray
    migration: np.ndarray
    rank_times: list = field(default_factory=list)

    @classmethod
    def zeros(cls, ncells: int) -> "CostLedger":
        return cls(np.zeros(ncells), np.zeros(ncells))

    def set_costs(self, compute, migration=None):
        c = np.asarray(compute, dtype=np.float64)
        if np.any(c < 0):
            raise ValueError("costs must be nonnegative")
        self.compute = c.copy()
        if migration is not None:
            m = np.asarray(migration, dtype=np.float64)
            if np.any(m < 0):
                raise ValueError("migration costs must be nonnegative")
            self.migration = m.copy()

    def gather(self, world: World, local_compute, local_migration) -> None:
        """Sum per-rank partial cost arrays into the replicated ledger."""
        self.set_costs(world.allreduce_sum(np.asarray(local_compute, dtype=np.float64)),
                       world.allreduce_sum(np.asarray(local_migration, dtype=np.float64)))


@dataclass
class SARState:
    C: float = 0.0
    n: int = 0
    sum_delta: float = 0.0
    last_W: float = math.inf
    W: float = math.inf
    fired: bool = False
    deltas: list = field(default_factory=list)

    def reset(self, C: float | None = None):
        if C is not None:
            self.C = float(C)
        self.n = 0
        self.sum_delta = 0.0
        self.last_W = math.inf
        self.W = math.inf
        self.fired = False
        self.deltas = []


def degradation(per_rank_times: Sequence[float]) -> float:
    t = np.asarray(per_rank_times, dtype=np.float64)
    return float(t.max() - t.mean())


def record_step(ledger: CostLedger | None, sar: SARState, per_rank_times: Sequence[float]) -> float:
    d = degradation(per_rank_times)
    if ledger is not None:
        ledger.rank_times.append(list(map(float, per_rank_times)))
    sar.deltas.append(d)
    sar.sum_delta += d
    sar.n += 1
    return d


def sar_decide(sar: SARState) -> bool:
    """True on the first rise of W(n) = (C + sum of degradations) / n since the last reset."""
    if sar.n < 1:
        raise ValueError("sar_decide needs at least one recorded step")
    sar.last_W = sar.W
    sar.W = (sar.C + sar.sum_delta) / sar.n
    rise = sar.W > sar.last_W and not sar.fired
    if rise:
        sar.fired = True
    return rise


def rebalance(decomposition: Decomposition, ledger: CostLedger, sar: SARState,
              world: World | None = None, psets: Sequence[ParticleSet] = (),
              grids: Sequence[DistributedGrid] = (), rebalance_cost: float | None = None,
              alpha: float | None = None, beta: float = 1.0):
    """Refine the assignment from the current one and migrate the data.

    Migration costs are discounted by ``1 / max(1, n)``.  Returns the new
    decomposition and the redistributed grids; particle sets are mapped in
    place.  The SAR state is reset with ``C`` set to ``rebalance_cost`` or,
    if not given, to the measured wall time (max over ranks).
    """
    t0 = time.perf_counter()
    graph = decomposition.graph(ledger.compute)
    discount = 1.0 / max(1, sar.n)
    owner = partition_graph_refine(graph, decomposition.nranks, decomposition.owner,
                                   migration=ledger.migration, discount=discount,
                                   alpha=alpha, beta=beta)
    if np.array_equal(owner, decomposition.owner):
        new_dec = decomposition
        new_grids = list(grids)
    else:
        new_dec = decomposition.with_assignment(owner, world)
        new_grids = [grid_redistribute(g, new_dec) for g in grids]
    # map even when nothing moved: callers rebuild ghosts next, and those
    # assume every particle sits inside its owner's boxes
    for ps in psets:
        ps.dec = new_dec
        ps.map_global()
    elapsed = time.perf_counter() - t0
    if rebalance_cost is None:
        rebalance_cost = world.allreduce_max(elapsed) if world is not None else elapsed
    sar.reset(rebalance_cost)
    return new_dec, new_grids


class TraceWriter:
    """CSV trace: step, per-rank times (';'-joined), delta, W, rebalanced."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(["step", "rank_times", "delta", "W", "rebalanced"])

    def row(self, step: int, times: Sequence[float], delta: float, W: float, rebalanced: bool):
        self._w.writerow([step, ";".join(f"{t:.9g}" for t in times), f"{delta:.9g}",
                          f"{W:.9g}", int(bool(rebalanced))])
        self._fh.flush()

    def close(self):
        self._fh.close()


# ------------------------------------------------------- synthetic workload

def hotspot_costs(grid_shape: Sequence[int], step: int, steps: int, amplitude: float = 20.0,
                  width: float = 0.12, base: float = 1.0) -> np.ndarray:
    """Gaussian cost bump moving along the diagonal of the unit square.

    Returned in x-fastest linear order of the sub-sub grid.
    """
    shape = tuple(int(s) for s in grid_shape)
    centres = [(np.arange(n) + 0.5) / n for n in shape]
    mesh = np.meshgrid(*centres, indexing="ij")
    frac = step / max(1, steps - 1)
    c = 0.15 + 0.7 * frac
    r2 = sum((m - c) ** 2 for m in mesh)
    cost = base + amplitude * np.exp(-r2 / (2 * width ** 2))
    return cost.ravel(order="F")


@dataclass
class HotspotResult:
    sum_delta: float
    deltas: list
    rebalances: list
    preserved: bool


def run_hotspot(world: World, dlb: bool, steps: int = 200, cells: int = 16,
                migration_per_cell: float = 0.5, prior_cost: float = 5.0,
                trace_path: str | None = None, payload: bool = True) -> HotspotResult:
    """Synthetic moving-hotspot workload on a ``cells x cells`` sub-sub grid.

    The per-rank step time is the summed cost of owned cells.  The rebalance
    cost charged to SAR is the migrated cost volume.  With ``payload`` a grid
    and a particle set ride along and are checked for bitwise preservation
    after every rebalance.
    """
    from .geometry import Box, Ghost, NON_PERIODIC
    from .schema import scalar

    shape = (cells, cells)
    dec = Decomposition.build(Box((0.0, 0.0), (1.0, 1.0)), (NON_PERIODIC, NON_PERIODIC),
                              Ghost(1.0 / cells), world.size, cells_per_axis=shape, world=world)
    ledger = CostLedger.zeros(dec.grid.ncells)
    sar = SARState(C=prior_cost)
    trace = TraceWriter(trace_path) if trace_path and world.rank == 0 else None
    grids, psets = [], []
    preserved = True
    if payload:
        g = DistributedGrid((2 * cells, 2 * cells), dec, [scalar("val")], world)
        g.fill("val", lambda x, y: np.sin(13 * x) * np.cos(7 * y) + x / 3)
        grids.append(g)
        ps = ParticleSet(dec, [scalar("mass")], world)
        if world.rank == 0:
            rng = np.random.default_rng(4)
            pos = rng.random((500, 2))
            ps.add(pos, np.arange(500), mass=rng.random(500))
        ps.map_global()
        psets.append(ps)
    rebalances = []
    sar_all: list[float] = []
    for step in range(steps):
        cost = hotspot_costs(shape, step, steps)
        times = np.bincount(dec.owner, weights=cost, minlength=world.size)
        d = record_step(ledger, sar, times)
        sar_all.append(d)
        fire = dlb and sar_decide(sar)
        if not dlb:
            sar.W = (sar.C + sar.sum_delta) / sar.n
        W = sar.W
        if fire:
            ledger.set_costs(cost, np.full(len(cost), migration_per_cell))
            before = _snapshot(grids, psets) if payload else None
            old_owner = dec.owner.copy()
            # charged cost: migrated volume, known only after refinement
            new_dec, new_grids = rebalance(dec, ledger, sar, world, psets, grids, rebalance_cost=0.0)
            moved = float(np.sum(cost[new_dec.owner != old_owner]) / world.size) \
                + migration_per_cell * float(np.sum(new_dec.owner != old_owner))
            sar.reset(max(moved, 1e-9))
            dec, grids = new_dec, new_grids
            if payload:
                preserved &= _snapshot(grids, psets) == before
            rebalances.append(step)
        if trace is not None:
            trace.row(step, times, d, W, fire)
    if trace is not None:
        trace.close()
    return HotspotResult(float(sum(sar_all)), sar_all, rebalances, preserved)


def _snapshot(grids, psets):
    out = []
    for g in grids:
        out.append({k: v.tobytes() for k, v in g.gather().items()})
    for ps in psets:
        st = ps.gather()
        out.append({k: np.asarray(v).tobytes() for k, v in st.items()})
    return out
