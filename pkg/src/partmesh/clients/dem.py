"""Granular DEM (Hertzian contacts with tangential history) on an inclined plane.

Contact history lives in the ``contacts`` list column of the lower-gid
particle of each pair; walls are static virtual particles mirrored across the
wall plane and carry negative partner ids.  Pair contributions are summed per
particle in ascending partner-gid order, so trajectories do not depend on the
rank count.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from ..decomposition import Decomposition
from ..errors import PhysicsError, UsageError
from ..geometry import Box, Ghost, NON_PERIODIC, PERIODIC
from ..io import checkpoint_load, checkpoint_save, vtk_write_particles
from ..particles import LIST_MERGE, ParticleSet, build_verlet
from ..schema import scalar, varlist, vector
from ..transport import World
from .common import Balancer, RunOptions, cell_counts, main_runner, read_sidecar, write_sidecar

WALL_XLO, WALL_XHI, WALL_ZLO = -1, -2, -3


@dataclass
class DEMConfig:
    kn: float = 7.849
    kt: float = 2.243
    gamma_n: float = 3.401
    gamma_t: float | None = None    # defaults to gamma_n / 2
    R: float = 0.06
    m: float = 1.0
    I: float = 1.44e-3
    mu: float = 0.5
    gravity: float = 0.02
    incline: float = 30.0           # degrees; gravity is rotated, the box is not
    dt: float = 0.01
    steps: int = 500
    lattice: tuple = (25, 16, 5)
    spacing: float = 1.05           # lattice pitch in units of 2R
    jitter: float = 0.02            # uniform position noise in units of R
    length_x: float = 4.2
    height: float = 3.18
    skin: float = 0.012
    seed: int = 0

    def __post_init__(self):
        if self.gamma_t is None:
            self.gamma_t = 0.5 * self.gamma_n

    @property
    def g(self) -> np.ndarray:
        a = math.radians(self.incline)
        return self.gravity * np.array([math.sin(a), 0.0, -math.cos(a)])

    @property
    def pitch(self) -> float:
        return 2.0 * self.R * self.spacing

    @property
    def domain(self) -> Box:
        return Box((0.0, 0.0, 0.0), (self.length_x, self.lattice[1] * self.pitch, self.height))

    def validate(self):
        if min(self.kn, self.kt, self.gamma_n, self.gamma_t, self.mu, self.skin, self.jitter) < 0:
            raise UsageError("stiffness, damping, friction, skin and jitter must be >= 0")
        if not (self.R > 0 and self.m > 0 and self.I > 0 and self.dt > 0):
            raise UsageError("R, m, I and dt must be positive")
        if self.steps < 0 or len(self.lattice) != 3 or min(self.lattice) < 1:
            raise UsageError("steps must be >= 0 and lattice needs three positive counts")
        if self.spacing < 1.0:
            raise UsageError("lattice spacing below 2R starts with overlapping grains")
        if self.lattice[0] * self.pitch > self.length_x:
            raise UsageError("initial lattice does not fit between the x walls")


def _contact(xp, vp, wp, xq, vq, wq, ut, cfg: DEMConfig, dt: float):
    """Vectorised contact law.  Returns (Fn, Ft, ut_new, n, delta)."""
    rvec = xp - xq
    r = np.linalg.norm(rvec, axis=-1)
    n = rvec / r[..., None]
    delta = 2.0 * cfg.R - r
    vrel = vp - vq - cfg.R * np.cross(wp + wq, n)
    vn = np.sum(vrel * n, axis=-1, keepdims=True) * n
    vt = vrel - vn
    ut = ut + vt * dt
    # keep the spring in the current tangent plane
    ut = ut - np.sum(ut * n, axis=-1, keepdims=True) * n
    meff = 0.5 * cfg.m
    s = np.sqrt(delta / (2.0 * cfg.R))[..., None]
    fn = s * (cfg.kn * delta[..., None] * n - cfg.gamma_n * meff * vn)
    ft = s * (-cfg.kt * ut - cfg.gamma_t * meff * vt)
    fn_mag = np.linalg.norm(fn, axis=-1)
    ft_mag = np.linalg.norm(ft, axis=-1)
    over = ft_mag > cfg.mu * fn_mag
    if np.any(over):
        scale = cfg.mu * fn_mag[over] / ft_mag[over]
        ft[over] = ft[over] * scale[:, None]
        if cfg.kt > 0:
            # spring that reproduces the capped force exactly
            ut[over] = -(ft[over] / s[over] + cfg.gamma_t * meff * vt[over]) / cfg.kt
    return fn, ft, ut, n, delta


def dem_pair_force(xp, vp, wp, xq, vq, wq, ut, cfg: DEMConfig, dt: float | None = None):
    """Normal force, tangential force and updated tangential spring for contact p-q.

    All arguments broadcast: pass single 3-vectors or (n, 3) stacks.  Forces
    act on p; q receives the negatives.
    """
    args = [np.asarray(a, dtype=np.float64) for a in (xp, vp, wp, xq, vq, wq, ut)]
    fn, ft, ut, _, _ = _contact(*args, cfg, cfg.dt if dt is None else dt)
    return fn, ft, ut


def schema():
    return [vector("v"), vector("omega"),
            varlist("contacts", [scalar("partner", "i8"), vector("ut")]),
            varlist("inbox", [scalar("partner", "i8"), vector("f"), vector("t")])]


@dataclass
class DEMStats:
    steps: int = 0
    contacts: int = 0
    max_coulomb_excess: float = -np.inf   # max over contacts of |Ft| - mu |Fn|
    max_overlap: float = 0.0
    unresolved: int = 0                   # stored contacts whose partner was not local
    rebuilds: int = 0
    rebalances: int = 0


class DEMSim:
    def __init__(self, world: World, cfg: DEMConfig):
        cfg.validate()
        self.world = world
        self.cfg = cfg
        self.dec = Decomposition.build(cfg.domain, (NON_PERIODIC, PERIODIC, NON_PERIODIC),
                                       Ghost(2.0 * cfg.R + cfg.skin), world.size, world=world)
        self.pset = ParticleSet(self.dec, schema(), world)
        self.vlist = None
        self.step_no = 0
        self.stats = DEMStats()
        self._cdt = self.pset.schema["contacts"].np_dtype(3)
        self._idt = self.pset.schema["inbox"].np_dtype(3)

    # -- set-up

    def init_lattice(self):
        """Grains on a jittered cubic lattice against the low-x wall and the floor."""
        cfg = self.cfg
        if self.world.rank == 0:
            nx, ny, nz = cfg.lattice
            a = cfg.pitch
            k = np.stack(np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"),
                         axis=-1).reshape(-1, 3)
            # x fastest, matching the library's linearisation of cells
            k = k[np.lexsort((k[:, 0], k[:, 1], k[:, 2]))]
            pos = a * (k + 0.5)
            rng = np.random.default_rng(cfg.seed)
            pos += rng.uniform(-1.0, 1.0, pos.shape) * cfg.jitter * cfg.R
            self.pset.add(pos, np.arange(len(pos)))
        self._start()

    def init_particles(self, pos, vel=None, omega=None):
        if self.world.rank == 0:
            pos = np.asarray(pos, dtype=np.float64)
            z = np.zeros_like(pos)
            self.pset.add(pos, np.arange(len(pos)),
                          v=z if vel is None else np.asarray(vel, dtype=np.float64),
                          omega=z if omega is None else np.asarray(omega, dtype=np.float64))
        self._start()

    def restore(self, path: str):
        self.pset = checkpoint_load(path, self.world, self.dec, self.pset.schema)
        self.step_no = int(read_sidecar(path).get("step", 0))
        self._start()

    def _start(self):
        self.pset.map_global()
        self._rebuild()

    def _rebuild(self):
        ps = self.pset
        ps.ghost_get(["v", "omega"])
        self.vlist = build_verlet(ps, 2.0 * self.cfg.R, self.cfg.skin, symmetric=True)
        self.stats.rebuilds += 1

    # -- contact bookkeeping

    def _stored(self):
        """Flattened owned contact lists: (owner index, partner gid, ut)."""
        ps = self.pset
        col = ps.props["contacts"][:ps.n_owned]
        counts = np.fromiter((len(c) for c in col), dtype=np.int64, count=len(col))
        if counts.sum() == 0:
            return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3))
        flat = np.concatenate(col)
        owner = np.repeat(np.arange(len(col)), counts)
        return owner, flat["partner"].astype(np.int64), flat["ut"].reshape(-1, 3)

    def _split(self, target, n, records, dtype):
        """Group records by target index (0..n-1) into a list of structured arrays."""
        out = np.zeros(len(target), dtype=dtype)
        for name, val in records.items():
            out[name] = val
        counts = np.bincount(target, minlength=n)
        return np.split(out, np.cumsum(counts)[:-1])

    def _wall_contacts(self):
        cfg = self.cfg
        ps = self.pset
        x = ps.pos[:ps.n_owned]
        lx = cfg.length_x
        idx, wall, mirror = [], [], []
        for w, sel, img in (
                (WALL_XLO, x[:, 0] < cfg.R, lambda p: p * [-1.0, 1.0, 1.0]),
                (WALL_XHI, x[:, 0] > lx - cfg.R, lambda p: p * [-1.0, 1.0, 1.0] + [2.0 * lx, 0, 0]),
                (WALL_ZLO, x[:, 2] < cfg.R, lambda p: p * [1.0, 1.0, -1.0])):
            i = np.flatnonzero(sel)
            idx.append(i)
            wall.append(np.full(len(i), w, dtype=np.int64))
            mirror.append(img(x[i]))
        return np.concatenate(idx), np.concatenate(wall), np.concatenate(mirror)

    def forces(self) -> tuple[np.ndarray, np.ndarray]:
        """Contact force and torque on owned grains; updates contact lists."""
        cfg = self.cfg
        ps = self.pset
        n, nt = ps.n_owned, ps.n_total
        gid, pos = ps.gid, ps.pos
        v, w = ps.props["v"], ps.props["omega"]

        so, sp, sut = self._stored()
        known = np.isin(sp[sp >= 0], gid[:nt])
        self.stats.unresolved += int(np.count_nonzero(~known))

        # particle pairs in contact, oriented with the lower gid first
        i, j = self.vlist.i, self.vlist.j
        d = pos[i] - pos[j]
        touch = np.einsum("ij,ij->i", d, d) < (2.0 * cfg.R) ** 2
        i, j = i[touch], j[touch]
        wi, wall, wpos = self._wall_contacts()
        ci = np.concatenate([i, wi])
        cq = np.concatenate([gid[j], wall])
        xq = np.concatenate([pos[j], wpos])
        vq = np.concatenate([v[j], np.zeros((len(wi), 3))])
        oq = np.concatenate([w[j], np.zeros((len(wi), 3))])

        # previous tangential springs by (owner, partner)
        ut = np.zeros((len(ci), 3))
        if len(so) and len(ci):
            base = int(max(gid[:nt].max(initial=0), sp.max(initial=0))) + 8
            skey = so * base + (sp + 4)
            order = np.argsort(skey)
            skey = skey[order]
            qkey = ci * base + (cq + 4)
            at = np.searchsorted(skey, qkey)
            at = np.minimum(at, len(skey) - 1)
            hit = skey[at] == qkey
            ut[hit] = sut[order[at[hit]]]

        fn, ft, ut, nrm, delta = _contact(pos[ci], v[ci], w[ci], xq, vq, oq, ut, cfg, cfg.dt)
        if len(delta):
            worst = int(np.argmax(delta))
            self.stats.max_overlap = max(self.stats.max_overlap, float(delta[worst] / cfg.R))
            if delta[worst] > cfg.R:
                raise PhysicsError(f"overlap {delta[worst]:.4g} > R between gid "
                                   f"{int(gid[ci[worst]])} and {int(cq[worst])}")
            excess = np.linalg.norm(ft, axis=1) - cfg.mu * np.linalg.norm(fn, axis=1)
            self.stats.max_coulomb_excess = max(self.stats.max_coulomb_excess, float(excess.max()))
        self.stats.contacts = len(ci)

        # new contact lists, sorted by partner
        order = np.lexsort((cq, ci))
        ps.props["contacts"][:n] = self._split(ci[order], n,
                                               {"partner": cq[order], "ut": ut[order]}, self._cdt)

        f = fn + ft
        tq = -cfg.R * np.cross(nrm, ft)
        # contributions: p side for every contact, q side for particle pairs only
        m = len(i)
        tgt = np.concatenate([ci, j])
        prt = np.concatenate([cq, gid[i]])
        fv = np.concatenate([f, -f[:m]])
        tv = np.concatenate([tq, tq[:m]])
        ghost = tgt >= n
        gsel = np.flatnonzero(ghost)
        gorder = gsel[np.lexsort((prt[gsel], tgt[gsel]))]
        inbox = ps.props["inbox"]
        empty = np.zeros(0, dtype=self._idt)
        for k in range(n):
            inbox[k] = empty
        inbox[n:nt] = self._split(tgt[gorder] - n, nt - n,
                                  {"partner": prt[gorder], "f": fv[gorder], "t": tv[gorder]},
                                  self._idt)
        ps.ghost_put(LIST_MERGE, ["inbox"])

        loc = np.flatnonzero(~ghost)
        rt, rp, rf, rtq = tgt[loc], prt[loc], fv[loc], tv[loc]
        col = inbox[:n]
        counts = np.fromiter((len(c) for c in col), dtype=np.int64, count=n)
        if counts.sum():
            flat = np.concatenate(col)
            rt = np.concatenate([rt, np.repeat(np.arange(n), counts)])
            rp = np.concatenate([rp, flat["partner"]])
            rf = np.concatenate([rf, flat["f"].reshape(-1, 3)])
            rtq = np.concatenate([rtq, flat["t"].reshape(-1, 3)])
        for k in range(n):
            inbox[k] = empty
        return _ordered_sum(rt, rp, rf, rtq, n)

    # -- time stepping

    def step(self):
        cfg = self.cfg
        ps = self.pset
        f, tq = self.forces()
        n = ps.n_owned
        ps.props["v"][:n] += (cfg.dt / cfg.m) * (f + cfg.m * cfg.g)
        ps.pos[:n] += cfg.dt * ps.props["v"][:n]
        # wrap every step so rounding never depends on when a map happens
        ps.pos[:n] = self.dec.wrap(ps.pos[:n])
        ps.props["omega"][:n] += (cfg.dt / cfg.I) * tq
        self.step_no += 1
        self.stats.steps += 1
        moved = self.world.allreduce_max(self.vlist.max_displacement(ps.pos[:n]))
        if 2.0 * moved >= cfg.skin:
            ps.map_local()
            self._rebuild()
        else:
            ps.ghost_get(["v", "omega"], keep=True)

    def run(self, steps: int, opts: RunOptions | None = None, callback=None) -> DEMStats:
        opts = opts or RunOptions()
        bal = Balancer(self.world, opts, self.dec.grid.ncells)
        last = self.step_no + steps
        try:
            while self.step_no < last:
                bal.start()
                self.step()
                if callback is not None:
                    callback(self)
                if bal.finish_step(self.step_no):
                    ps = self.pset
                    counts = cell_counts(self.dec, ps.pos[:ps.n_owned])
                    self.dec, _ = bal.rebalance(self.dec, counts, psets=[ps])
                    self._rebuild()
                self._outputs(opts)
        finally:
            bal.close()
        self.stats.rebalances = bal.count
        return self.stats

    def _outputs(self, opts: RunOptions):
        s = self.step_no
        if opts.vtk_every and opts.out and s % opts.vtk_every == 0:
            vtk_write_particles(self.pset, os.path.join(opts.out, f"dem_{s:06d}"), ["v", "omega"])
        if opts.checkpoint_every and opts.out and s % opts.checkpoint_every == 0:
            path = os.path.join(opts.out, f"dem_{s:06d}.ckpt")
            checkpoint_save(self.pset, path)
            if self.world.rank == 0:
                write_sidecar(path, s)

    def summary(self) -> dict:
        ps = self.pset
        n = ps.n_owned
        st = self.stats
        vals = self.world.allgather_obj((
            0.5 * self.cfg.m * float(np.sum(ps.props["v"][:n] ** 2)),
            float(np.sum(ps.props["v"][:n, 0])), n, st.contacts, st.max_coulomb_excess,
            st.max_overlap, st.unresolved))
        total = sum(x[2] for x in vals)
        excess = max(x[4] for x in vals)
        return {"client": "dem", "particles": total, "steps": self.step_no,
                "kinetic": sum(x[0] for x in vals),
                "mean_vx": sum(x[1] for x in vals) / max(total, 1),
                "contacts": sum(x[3] for x in vals),
                "max_coulomb_excess": excess if np.isfinite(excess) else None,
                "max_overlap_over_R": max(x[5] for x in vals),
                "unresolved_partners": sum(x[6] for x in vals),
                "verlet_rebuilds": st.rebuilds, "rebalances": st.rebalances}


def _ordered_sum(target, partner, f, t, n):
    """Per-target sums, each accumulated in ascending partner order."""
    F = np.zeros((n, 3))
    T = np.zeros((n, 3))
    if len(target) == 0:
        return F, T
    order = np.lexsort((partner, target))
    target, f, t = target[order], f[order], t[order]
    start = np.searchsorted(target, target, side="left")
    rank = np.arange(len(target)) - start
    for k in range(int(rank.max()) + 1):
        sel = rank == k
        F[target[sel]] += f[sel]
        T[target[sel]] += t[sel]
    return F, T


def run_dem(cfg: DEMConfig, world: World, opts: RunOptions | None = None, callback=None) -> DEMSim:
    sim = DEMSim(world, cfg)
    if opts is not None and opts.restart:
        sim.restore(opts.restart)
    else:
        sim.init_lattice()
    sim.run(max(0, cfg.steps - sim.step_no), opts, callback)
    return sim


def _program(world: World, cfg: DEMConfig, opts: RunOptions) -> dict:
    return run_dem(cfg, world, opts).summary()


def main(argv=None) -> int:
    return main_runner("pm-dem", "DEM avalanche on an inclined plane", DEMConfig, _program, argv)


if __name__ == "__main__":
    raise SystemExit(main())
