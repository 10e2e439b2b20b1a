"""Particle <-> mesh interpolation with the M'4 kernel (support of two cells)."""
from __future__ import annotations

import itertools

import numpy as np

from .errors import UsageError
from .mesh import DistributedGrid
from .particles import ParticleSet

SUPPORT = 2


def m4prime(x):
    """M'4 weight: 1 - 5/2 x^2 + 3/2 |x|^3 on |x| < 1, (2-|x|)^2 (1-|x|) / 2 on 1 <= |x| < 2."""
    a = np.abs(np.asarray(x, dtype=np.float64))
    inner = 1.0 - 2.5 * a * a + 1.5 * a ** 3
    outer = 0.5 * (2.0 - a) ** 2 * (1.0 - a)
    w = np.where(a < 1.0, inner, np.where(a < 2.0, outer, 0.0))
    return w if w.ndim else float(w)


def _check(grid: DistributedGrid, pset: ParticleSet):
    if np.any(grid.frame < SUPPORT):
        raise UsageError(f"interpolation needs a ghost frame of at least {SUPPORT} nodes, "
                         f"grid has {tuple(grid.frame)}")
    if grid.dim != pset.dim:
        raise UsageError("grid and particle set dimensions differ")


def _stencil(grid: DistributedGrid, pos: np.ndarray):
    """Base node keys and per-axis weights (n, D, 4) for offsets -1..2."""
    rel = (pos - grid.low) / grid.spacing
    base = np.floor(rel).astype(np.int64)
    offs = np.arange(-1, 3)
    keys = base[:, :, None] + offs
    node = grid.low[None, :, None] + keys * grid.spacing[None, :, None]
    w = m4prime((pos[:, :, None] - node) / grid.spacing[None, :, None])
    return base, w


def _by_block(grid: DistributedGrid, pset: ParticleSet):
    n = pset.n_owned
    sub = pset.dec.subdomain_of(pset.pos[:n]) if n else np.zeros(0, dtype=np.int64)
    for b in grid.blocks:
        idx = np.nonzero(sub == b.sub_id)[0]
        if len(idx):
            yield b, idx
    stray = ~np.isin(sub, [b.sub_id for b in grid.blocks])
    if np.any(stray):
        raise UsageError("particles are not owned by this rank's sub-domains; map them first")


def _terms(grid: DistributedGrid, b, pos: np.ndarray):
    """Yield (storage index tuple, weight) for each of the 4^D stencil offsets."""
    base, w = _stencil(grid, pos)
    local0 = base - b.lo + b.frame - 1
    for combo in itertools.product(range(4), repeat=grid.dim):
        weight = np.ones(len(pos))
        idx = []
        for d, c in enumerate(combo):
            weight = weight * w[:, d, c]
            idx.append(local0[:, d] + c)
        yield tuple(idx), weight


def p2m(pset: ParticleSet, src_prop: str, grid: DistributedGrid, dst_prop: str,
        fold: bool = True):
    """Scatter owned particle values onto the mesh, then fold frame contributions to owners.

    The destination property is overwritten.
    """
    _check(grid, pset)
    for b in grid.blocks:
        b.data[dst_prop][...] = 0
    vals = pset.props[src_prop]
    for b, idx in _by_block(grid, pset):
        v = vals[idx]
        arr = b.data[dst_prop]
        for sidx, weight in _terms(grid, b, pset.pos[idx]):
            contrib = v * weight.reshape((-1,) + (1,) * (v.ndim - 1))
            np.add.at(arr, sidx, contrib)
    if fold:
        grid.ghost_put([dst_prop])


def m2p(grid: DistributedGrid, src_prop: str, pset: ParticleSet, dst_prop: str):
    """Interpolate mesh values (ghost frames current) to owned particles."""
    _check(grid, pset)
    out = pset.props[dst_prop]
    out[:pset.n_owned] = 0
    for b, idx in _by_block(grid, pset):
        arr = b.data[src_prop]
        acc = np.zeros((len(idx),) + arr.shape[grid.dim:])
        for sidx, weight in _terms(grid, b, pset.pos[idx]):
            vals = arr[sidx]
            acc += vals * weight.reshape((-1,) + (1,) * (vals.ndim - 1))
        out[idx] = acc
