"""Lennard-Jones molecular dynamics with velocity Verlet and symmetric Verlet lists."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from ..decomposition import Decomposition
from ..errors import PhysicsError, UsageError
from ..geometry import Box, Ghost, PERIODIC
from ..io import checkpoint_load, checkpoint_save, vtk_write_particles
from ..particles import SUM, ParticleSet, apply_pairwise, build_verlet
from ..schema import vector
from ..transport import World
from .common import Balancer, RunOptions, cell_counts, main_runner, read_sidecar, write_sidecar


@dataclass
class LJConfig:
    sigma: float = 0.1
    epsilon: float = 1.0
    r_cut: float = 0.3
    skin: float = 0.03
    dt: float = 0.0005
    steps: int = 2000
    nodes: tuple = (20, 20, 20)
    domain_low: tuple = (0.0, 0.0, 0.0)
    domain_high: tuple = (2.25, 2.25, 2.25)
    mass: float = 1.0
    temperature: float = 0.5
    seed: int = 0
    energy_every: int = 1
    equilibrate: int = 0    # steps excluded from the drift measurement


    def validate(self):
        if not (self.r_cut > 0 and self.dt > 0 and self.sigma > 0 and self.mass > 0):
            raise UsageError("r_cut, dt, sigma and mass must be positive")
        if self.skin < 0 or self.temperature < 0 or self.steps < 0 or self.equilibrate < 0:
            raise UsageError("skin, temperature, steps and equilibrate must be >= 0")
        if not (len(self.nodes) == len(self.domain_low) == len(self.domain_high)):
            raise UsageError("nodes, domain_low and domain_high must have the same length")


def lj_force(xp, xq, sigma: float, epsilon: float, r_cut: float) -> np.ndarray:
    """Force on p from q: 24 eps (2 sigma^12 / r^14 - sigma^6 / r^8) (x_p - x_q); zero for r >= r_cut."""
    dx = np.asarray(xp, dtype=np.float64) - np.asarray(xq, dtype=np.float64)
    r2 = float(dx @ dx)
    if r2 == 0.0:
        raise PhysicsError("coincident particles (r = 0)")
    if r2 >= r_cut * r_cut:
        return np.zeros_like(dx)
    s6 = (sigma * sigma / r2) ** 3
    return 24.0 * epsilon * (2.0 * s6 * s6 - s6) / r2 * dx


def lj_potential(r, sigma: float, epsilon: float):
    s6 = (sigma / np.asarray(r, dtype=np.float64)) ** 6
    return 4.0 * epsilon * (s6 * s6 - s6)


class LJKernel:
    """Pair kernel for apply_pairwise; accumulates the potential of the pairs it sees."""

    def __init__(self, sigma: float, epsilon: float):
        self.sigma2 = sigma * sigma
        self.epsilon = epsilon
        self.potential = 0.0

    def __call__(self, dx: np.ndarray, r2: np.ndarray) -> np.ndarray:
        if np.any(r2 == 0.0):
            raise PhysicsError("coincident particles (r = 0) in the neighbour list")
        inv2 = 1.0 / r2
        s6 = (self.sigma2 * inv2) ** 3
        self.potential += float(np.sum(4.0 * self.epsilon * (s6 * s6 - s6)))
        return (24.0 * self.epsilon * (2.0 * s6 * s6 - s6) * inv2)[:, None] * dx


@dataclass
class EnergyRow:
    step: int
    kinetic: float
    potential: float

    @property
    def total(self) -> float:
        return self.kinetic + self.potential


@dataclass
class MDResult:
    energies: list = field(default_factory=list)
    rebuilds: int = 0
    rebalances: int = 0
    n_particles: int = 0
    ref_step: int = 0       # drift is measured against the first record at or after this step

    def window(self) -> np.ndarray:
        return np.array([e.total for e in self.energies if e.step >= self.ref_step])

    def summary(self) -> dict:
        tot = self.window()
        e0 = float(tot[0]) if len(tot) else 0.0
        e1 = float(tot[-1]) if len(tot) else 0.0
        drift = abs(e1 - e0) / abs(e0) if e0 else 0.0
        return {"client": "md", "particles": self.n_particles,
                "steps": self.energies[-1].step if self.energies else 0,
                "reference_step": self.ref_step, "E0": e0, "E_final": e1,
                "relative_drift": drift, "max_relative_drift": self.max_drift(),
                "verlet_rebuilds": self.rebuilds, "rebalances": self.rebalances}

    def max_drift(self) -> float:
        tot = self.window()
        if not len(tot) or not tot[0]:
            return 0.0
        return float(np.max(np.abs(tot - tot[0])) / abs(tot[0]))


class MDSim:
    def __init__(self, world: World, cfg: LJConfig, bc=None):
        cfg.validate()
        self.world = world
        self.cfg = cfg
        dim = len(cfg.nodes)
        self.domain = Box(cfg.domain_low, cfg.domain_high)
        self.bc = tuple(bc) if bc is not None else (PERIODIC,) * dim
        self.dec = Decomposition.build(self.domain, self.bc, Ghost(cfg.r_cut + cfg.skin),
                                       world.size, world=world)
        self.pset = ParticleSet(self.dec, [vector("v"), vector("f")], world)
        self.kernel = LJKernel(cfg.sigma, cfg.epsilon)
        self.vlist = None
        self.step_no = 0
        self.result = MDResult(ref_step=cfg.equilibrate)

    # -- initial conditions

    def init_lattice(self):
        cfg = self.cfg
        ps = self.pset
        ps.init_grid(cfg.nodes)
        total = int(np.prod(cfg.nodes))
        vel = np.zeros((total, len(cfg.nodes)))
        if cfg.temperature > 0:
            rng = np.random.default_rng(cfg.seed)
            vel = rng.standard_normal((total, len(cfg.nodes)))
            vel -= vel.mean(axis=0)
            ke = 0.5 * cfg.mass * np.sum(vel * vel)
            vel *= np.sqrt(0.5 * total * len(cfg.nodes) * cfg.temperature / ke)
        ps["v"] = vel[ps.gid]
        self._start()

    def init_particles(self, pos, vel=None, gid=None):
        """Explicit initial state; only rank 0's input is used."""
        ps = self.pset
        if self.world.rank == 0:
            pos = np.asarray(pos, dtype=np.float64)
            v = np.zeros_like(pos) if vel is None else np.asarray(vel, dtype=np.float64)
            ps.add(pos, np.arange(len(pos)) if gid is None else gid, v=v)
        self._start()

    def restore(self, path: str):
        self.pset = checkpoint_load(path, self.world, self.dec, self.pset.schema)
        self.step_no = int(read_sidecar(path).get("step", 0))
        self._start(compute_forces=False)

    def _start(self, compute_forces: bool = True):
        self.pset.map_global()
        self._rebuild()
        if compute_forces:
            self.forces()
        else:
            self.kernel.potential = 0.0
            f_saved = self.pset["f"][:self.pset.n_owned].copy()
            self.forces()
            self.pset["f"][:self.pset.n_owned] = f_saved
        self.result.n_particles = self.pset.global_count()
        self._record()

    # -- time stepping

    def _rebuild(self):
        ps = self.pset
        ps.ghost_get()
        self.vlist = build_verlet(ps, self.cfg.r_cut, self.cfg.skin, symmetric=True)
        self.result.rebuilds += 1

    def forces(self):
        self.kernel.potential = 0.0
        apply_pairwise(self.pset, self.vlist, self.kernel, "f", symmetric=True)
        self.pset.ghost_put(SUM, ["f"])

    def energies(self) -> EnergyRow:
        ps = self.pset
        n = ps.n_owned
        ke = 0.5 * self.cfg.mass * float(np.sum(ps["v"][:n] ** 2))
        parts = self.world.allgather_obj((ke, self.kernel.potential))
        return EnergyRow(self.step_no, sum(p[0] for p in parts), sum(p[1] for p in parts))

    def _record(self):
        self.result.energies.append(self.energies())

    def step(self):
        cfg = self.cfg
        ps = self.pset
        n = ps.n_owned
        inv_m = 1.0 / cfg.mass
        v = ps["v"]
        f = ps["f"]
        v[:n] += 0.5 * cfg.dt * inv_m * f[:n]
        ps.pos[:n] += cfg.dt * v[:n]
        moved = self.world.allreduce_max(self.vlist.max_displacement(ps.pos[:n]))
        if 2.0 * moved >= cfg.skin:
            ps.map_local()
            self._rebuild()
        else:
            ps.ghost_get(keep=True)
        self.forces()
        n = ps.n_owned
        ps["v"][:n] += 0.5 * cfg.dt * inv_m * ps["f"][:n]
        self.step_no += 1
        if cfg.energy_every and self.step_no % cfg.energy_every == 0:
            self._record()

    def run(self, steps: int, opts: RunOptions | None = None) -> MDResult:
        opts = opts or RunOptions()
        bal = Balancer(self.world, opts, self.dec.grid.ncells)
        last = self.step_no + steps
        try:
            while self.step_no < last:
                bal.start()
                self.step()
                if bal.finish_step(self.step_no):
                    self.rebalance(bal)
                self._outputs(opts)
        finally:
            bal.close()
        self.result.rebalances = bal.count
        return self.result

    def rebalance(self, bal: Balancer):
        ps = self.pset
        counts = cell_counts(self.dec, ps.pos[:ps.n_owned])
        self.dec, _ = bal.rebalance(self.dec, counts, psets=[ps])
        self._rebuild()
        self.forces()

    def _outputs(self, opts: RunOptions):
        s = self.step_no
        if opts.vtk_every and opts.out and s % opts.vtk_every == 0:
            vtk_write_particles(self.pset, os.path.join(opts.out, f"md_{s:06d}"))
        if opts.checkpoint_every and opts.out and s % opts.checkpoint_every == 0:
            path = os.path.join(opts.out, f"md_{s:06d}.ckpt")
            checkpoint_save(self.pset, path)
            if self.world.rank == 0:
                write_sidecar(path, s)


def run_md(cfg: LJConfig, world: World, opts: RunOptions | None = None) -> MDResult:
    sim = MDSim(world, cfg)
    if opts is not None and opts.restart:
        sim.restore(opts.restart)
    else:
        sim.init_lattice()
    return sim.run(max(0, cfg.steps - sim.step_no), opts)


def _program(world: World, cfg: LJConfig, opts: RunOptions) -> dict:
    res = run_md(cfg, world, opts)
    if opts.out and world.rank == 0:
        with open(os.path.join(opts.out, "md_energy.csv"), "w") as fh:
            fh.write("step,kinetic,potential,total\n")
            for e in res.energies:
                fh.write(f"{e.step},{e.kinetic!r},{e.potential!r},{e.total!r}\n")
    return res.summary()


def main(argv=None) -> int:
    return main_runner("pm-md", "Lennard-Jones molecular dynamics", LJConfig, _program, argv)


if __name__ == "__main__":
    raise SystemExit(main())
