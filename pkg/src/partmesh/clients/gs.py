"""Gray-Scott reaction-diffusion on a periodic grid (FTCS, star stencil)."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from ..decomposition import Decomposition
from ..errors import UsageError
from ..geometry import Box, Ghost, PERIODIC
from ..io import checkpoint_load, checkpoint_save, vtk_write_grid
from ..mesh import DistributedGrid, star_stencil, stencil_views
from ..schema import scalar
from ..transport import World
from .common import Balancer, RunOptions, main_runner, read_sidecar, write_sidecar

# Pearson-regime parameter pairs (F, k); illustrative, not normative.
PRESETS = {
    "alpha": (0.010, 0.047),
    "mitosis": (0.0367, 0.0649),
    "coral": (0.0545, 0.062),
}


@dataclass
class GSConfig:
    Du: float = 2e-5
    Dv: float = 1e-5
    F: float = 0.0367
    k: float = 0.0649
    nodes: tuple = (128, 128)
    h: float = 0.01
    dt: float = 0.5
    steps: int = 5000
    u_init: float = 0.5
    v_init: float = 0.25
    noise: float = 0.01
    square: float = 0.2     # side of the initial perturbation as a fraction of the domain
    seed: int = 0

    @property
    def dim(self) -> int:
        return len(self.nodes)

    def dt_max(self) -> float:
        dmax = max(self.Du, self.Dv)
        return np.inf if dmax == 0 else self.h ** 2 / (4.0 * self.dim * dmax)

    def validate(self):
        if min(self.Du, self.Dv, self.F, self.k) < 0:
            raise UsageError("diffusion constants, F and k must be >= 0")
        if self.h <= 0 or self.dt <= 0 or self.steps < 0:
            raise UsageError("h and dt must be positive, steps >= 0")
        if self.dt > self.dt_max():
            raise UsageError(f"dt = {self.dt} violates the FTCS stability bound "
                             f"h^2/(4 D Dmax) = {self.dt_max():.6g}")


def make_grid(cfg: GSConfig, world: World) -> DistributedGrid:
    dom = Box((0.0,) * cfg.dim, tuple(n * cfg.h for n in cfg.nodes))
    dec = Decomposition.build(dom, (PERIODIC,) * cfg.dim, Ghost(cfg.h), world.size, world=world)
    return DistributedGrid(cfg.nodes, dec, [scalar("u"), scalar("v")], world)


def init_fields(grid: DistributedGrid, cfg: GSConfig):
    """u = 1, v = 0 outside a central square; noisy (u_init, v_init) inside.

    The noise is drawn for the whole grid from one seeded generator, so the
    initial state does not depend on the rank count.
    """
    rng = np.random.default_rng(cfg.seed)
    shape = tuple(cfg.nodes)
    xi_u = rng.uniform(-1.0, 1.0, shape)
    xi_v = rng.uniform(-1.0, 1.0, shape)
    u = np.ones(shape)
    v = np.zeros(shape)
    sq = []
    for n in cfg.nodes:
        side = max(1, int(round(cfg.square * n)))
        lo = (n - side) // 2
        sq.append(slice(lo, lo + side))
    sq = tuple(sq)
    u[sq] = cfg.u_init * (1.0 + cfg.noise * xi_u[sq])
    v[sq] = cfg.v_init * (1.0 + cfg.noise * xi_v[sq])
    for b in grid.blocks:
        sl = tuple(slice(int(a), int(z)) for a, z in zip(b.lo, b.hi))
        b.view("u")[...] = u[sl]
        b.view("v")[...] = v[sl]


def _laplacian(views: list, h2: float) -> np.ndarray:
    centre = views[0]
    acc = views[1] + views[2]
    for w in views[3:]:
        acc = acc + w
    return (acc - (len(views) - 1) * centre) / h2


def gs_step(grid: DistributedGrid, cfg: GSConfig):
    """One FTCS step on owned nodes; ghost frames of u and v must be current."""
    st = star_stencil(grid.dim)
    h2 = cfg.h * cfg.h
    updates = []
    for b in grid.blocks:
        uu = stencil_views(grid, b, "u", st)
        vv = stencil_views(grid, b, "v", st)
        u, v = uu[0], vv[0]
        uv2 = u * v * v
        u_new = u + cfg.dt * (cfg.Du * _laplacian(uu, h2) - uv2 + cfg.F * (1.0 - u))
        v_new = v + cfg.dt * (cfg.Dv * _laplacian(vv, h2) + uv2 - (cfg.F + cfg.k) * v)
        updates.append((b, u_new, v_new))
    # swap: all blocks read the old state before any is overwritten
    for b, u_new, v_new in updates:
        b.view("u")[...] = u_new
        b.view("v")[...] = v_new


@dataclass
class GSResult:
    grid: DistributedGrid
    steps: int
    rebalances: int = 0

    def summary(self) -> dict:
        g = self.grid.gather(["u", "v"])
        return {"client": "gs", "nodes": [int(n) for n in self.grid.nodes], "steps": self.steps,
                "u_min": float(g["u"].min()), "u_max": float(g["u"].max()),
                "v_mean": float(g["v"].mean()), "v_variance": float(g["v"].var()),
                "rebalances": self.rebalances}


def run_gray_scott(cfg: GSConfig, world: World, opts: RunOptions | None = None,
                   callback=None) -> GSResult:
    cfg.validate()
    opts = opts or RunOptions()
    grid = make_grid(cfg, world)
    step = 0
    if opts.restart:
        grid = checkpoint_load(opts.restart, world, grid.dec, grid.schema)
        step = int(read_sidecar(opts.restart).get("step", 0))
    else:
        init_fields(grid, cfg)
    bal = Balancer(world, opts, grid.dec.grid.ncells)
    try:
        while step < cfg.steps:
            bal.start()
            grid.ghost_get(["u", "v"])
            gs_step(grid, cfg)
            step += 1
            if callback is not None:
                callback(step, grid)
            if bal.finish_step(step):
                costs = np.zeros(grid.dec.grid.ncells)
                for sid in grid.dec.local_ids(world.rank):
                    costs[grid.dec.flat[sid].cells(grid.dec.grid)] = float(np.prod(grid.per_cell))
                _, (grid,) = bal.rebalance(grid.dec, costs, grids=[grid])
            if opts.out and opts.vtk_every and step % opts.vtk_every == 0:
                vtk_write_grid(grid, os.path.join(opts.out, f"gs_{step:06d}"))
            if opts.out and opts.checkpoint_every and step % opts.checkpoint_every == 0:
                path = os.path.join(opts.out, f"gs_{step:06d}.ckpt")
                checkpoint_save(grid, path)
                if world.rank == 0:
                    write_sidecar(path, step)
    finally:
        bal.close()
    return GSResult(grid, step, bal.count)


def _program(world: World, cfg: GSConfig, opts: RunOptions) -> dict:
    return run_gray_scott(cfg, world, opts).summary()


def main(argv=None) -> int:
    return main_runner("pm-gs", "Gray-Scott reaction-diffusion", GSConfig, _program, argv)


if __name__ == "__main__":
    raise SystemExit(main())
