import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from partmesh.clients.md import LJKernel, lj_force
from partmesh.decomposition import Decomposition
from partmesh.errors import MappingError, UsageError
from partmesh.geometry import NON_PERIODIC, PERIODIC, Box, Ghost
from partmesh.particles import (LIST_MERGE, MAX_REPLACE, SUM, ParticleSet, Region,
                                apply_pairwise, build_cell_list, build_verlet, iterate,
                                neighbor_pairs, pset_create)
from partmesh.schema import array, scalar, varlist, vector
from partmesh.transport import world_spawn

UNIT2 = Box((0.0, 0.0), (1.0, 1.0))
UNIT3 = Box((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))


def split_x(world, ghost=0.1, bc=(NON_PERIODIC, NON_PERIODIC)):
    """Two ranks split at x = 0.5 (or one rank owning everything)."""
    dec = Decomposition.build(UNIT2, bc, Ghost(ghost), world.size, cells_per_axis=(2, 1),
                              world=world)
    return dec


def test_create_examples():
    dec = Decomposition.build(UNIT3, [PERIODIC] * 3, Ghost(0.1), 1)
    ps = pset_create(3, dec, [vector("velocity"), vector("force")])
    assert ps.n_owned == 0 and ps.props["velocity"].shape == (0, 3)
    hi = Box(tuple([0.0] * 50), tuple([1.0] * 50))
    dec50 = Decomposition.build(hi, [NON_PERIODIC] * 50, Ghost(0.0), 1, cells_per_axis=(1,) * 50)
    ps50 = pset_create(50, dec50, [scalar("fitness"), array("mean", 50)])
    ps50.add(np.full((2, 50), 0.5), mean=np.ones((2, 50)))
    assert ps50.props["mean"].shape == (2, 50)
    with pytest.raises(UsageError):
        pset_create(3, dec, [scalar("a"), vector("a")])


def test_init_grid_counts():
    def prog(w):
        dec = Decomposition.build(UNIT2, [PERIODIC] * 2, Ghost(0.1), w.size, world=w)
        ps = ParticleSet(dec, [], w)
        ps.init_grid((8, 8))
        own = dec.owner_of(ps.pos[:ps.n_owned])
        return ps.n_owned, bool(np.all(own == w.rank))
    out = world_spawn(4, prog)
    assert sum(n for n, _ in out) == 64 and all(ok for _, ok in out)
    ps = ParticleSet(Decomposition.build(UNIT3, [PERIODIC] * 3, Ghost(0.1), 1), [])
    ps.init_grid((60, 60, 60))
    assert ps.n_owned == 216_000


def test_map_local_moves_one_particle_bitwise():
    def prog(w):
        ps = ParticleSet(split_x(w), [scalar("m"), vector("v")], w)
        if w.rank == 0:
            ps.add([[0.45, 0.5], [0.1, 0.1]], gid=[7, 8], m=[np.pi, 1.0],
                   v=[[1 / 3, -2 / 7], [0, 0]])
        ps.map_global()
        if w.rank == 0:
            ps.pos[ps.gid == 7] += [0.1, 0.0]
        ps.map_local()
        return ps.owned_state()
    r0, r1 = world_spawn(2, prog)
    assert r0["gid"].tolist() == [8] and r1["gid"].tolist() == [7]
    assert r1["m"][0] == np.pi and r1["v"][0].tolist() == [1 / 3, -2 / 7]


def test_map_periodic_crossing_wraps():
    def prog(w):
        ps = ParticleSet(split_x(w, bc=(PERIODIC, PERIODIC)), [], w)
        if w.rank == 0:
            ps.add([[0.05, 0.5]], gid=[1])
        ps.map_global()
        if w.rank == 0:
            ps.pos[:1] -= [0.1, 0.0]
        ps.map_local()
        return ps.pos[:ps.n_owned].tolist()
    r0, r1 = world_spawn(2, prog)
    assert r0 == [] and r1[0][0] == pytest.approx(0.95, abs=1e-15)


def test_map_global_idempotent_and_empty():
    def prog(w):
        dec = Decomposition.build(UNIT2, [PERIODIC] * 2, Ghost(0.1), w.size, world=w)
        ps = ParticleSet(dec, [scalar("q")], w)
        ps.map_global()
        empty_ok = ps.n_owned == 0
        if w.rank == 0:
            rng = np.random.default_rng(2)
            ps.add(rng.random((200, 2)), q=np.arange(200.0))
        ps.map_global()
        first = ps.owned_state()
        ps.map_global()
        second = ps.owned_state()
        ok = np.all(dec.owner_of(ps.pos[:ps.n_owned]) == w.rank)
        same = all(np.array_equal(first[k], second[k]) for k in first)
        return empty_ok, ok, same, ps.n_owned
    out = world_spawn(4, prog)
    assert all(a and b and c for a, b, c, _ in out)
    assert sum(x[3] for x in out) == 200


def test_map_local_rejects_far_jump():
    def prog(w):
        dec = Decomposition.build(Box((0, 0), (4, 1)), [NON_PERIODIC] * 2, Ghost(0.1), w.size,
                                  cells_per_axis=(4, 1), world=w)
        ps = ParticleSet(dec, [], w)
        if w.rank == 0:
            ps.add([[0.5, 0.5]], gid=[11])
        ps.map_global()
        if w.rank == 0:
            ps.pos[:1] = [3.5, 0.5]
        ps.map_local()
    with pytest.raises(MappingError, match="11"):
        world_spawn(4, prog, timeout=20)


def test_ghost_examples():
    def prog(w):
        ps = ParticleSet(split_x(w), [scalar("m")], w)
        if w.rank == 0:
            ps.add([[0.3, 0.5]], gid=[1], m=[2.0])
        else:
            ps.add([[0.55, 0.25]], gid=[2], m=[5.0])
        ps.ghost_get()
        plain = ps.gid[ps.n_owned:].tolist(), ps.pos[ps.n_owned:].tolist(), ps.props["m"][ps.n_owned:].tolist()
        ps.ghost_get(["m"])
        return plain, ps.props["m"][ps.n_owned:].tolist()
    (g0, m0), (g1, m1) = world_spawn(2, prog)
    assert g0[0] == [2] and g0[1] == [[0.55, 0.25]] and g0[2] == [0.0]
    assert m0 == [5.0]
    assert g1[0] == []


def test_ghost_width_zero_means_no_ghosts():
    def prog(w):
        ps = ParticleSet(split_x(w, ghost=0.0), [], w)
        if w.rank == 1:
            ps.add([[0.5, 0.5]])
        ps.ghost_get()
        return ps.n_ghost
    assert world_spawn(2, prog) == [0, 0]


def test_ghost_put_sum_once_and_max():
    def prog(w):
        ps = ParticleSet(split_x(w), [scalar("f"), scalar("mx")], w)
        if w.rank == 0:
            ps.add([[0.45, 0.5]], gid=[3], mx=[4.0])
        ps.ghost_get()
        if w.rank == 1:
            ps.props["f"][ps.n_owned:] = 1.25
            ps.props["mx"][ps.n_owned:] = 5.0
        ps.ghost_put(SUM, ["f"])
        ps.ghost_put(MAX_REPLACE, ["mx"])
        return ps.props["f"][:ps.n_owned].tolist(), ps.props["mx"][:ps.n_owned].tolist()
    r0, _ = world_spawn(2, prog)
    assert r0 == ([1.25], [5.0])


def test_ghost_put_noop_without_ghosts():
    ps = ParticleSet(Decomposition.build(UNIT2, [NON_PERIODIC] * 2, Ghost(0.1), 1), [scalar("f")])
    ps.add([[0.5, 0.5]], f=[2.0])
    ps.ghost_get()
    ps.ghost_put(SUM, ["f"])
    assert ps.props["f"].tolist() == [2.0]


def test_ghost_put_list_merge_appends():
    rec = [scalar("who", "i8")]

    def prog(w):
        ps = ParticleSet(split_x(w), [varlist("log", rec)], w)
        if w.rank == 0:
            ps.add([[0.45, 0.5]], gid=[0])
        ps.ghost_get()
        for k in range(ps.n_owned):
            ps.props["log"][k] = np.array([(w.rank,)], dtype=ps.props["log"][k].dtype)
        for k in range(ps.n_owned, ps.n_total):
            ps.props["log"][k] = np.array([(10 + w.rank,), (20 + w.rank,)],
                                          dtype=ps.props["log"][k].dtype)
        ps.ghost_put(LIST_MERGE, ["log"])
        return [a["who"].tolist() for a in ps.props["log"][:ps.n_owned]]
    assert world_spawn(2, prog)[0] == [[0, 11, 21]]


def test_list_merge_needs_list_property():
    ps = ParticleSet(Decomposition.build(UNIT2, [NON_PERIODIC] * 2, Ghost(0.1), 1), [scalar("f")])
    with pytest.raises(UsageError):
        ps.ghost_put(LIST_MERGE, ["f"])


def test_custom_merge():
    def prog(w):
        ps = ParticleSet(split_x(w), [scalar("x")], w)
        if w.rank == 0:
            ps.add([[0.45, 0.5]], x=[3.0])
        ps.ghost_get()
        ps.props["x"][ps.n_owned:] = 7.0
        ps.ghost_put(lambda a, b: a * b, ["x"])
        return ps.props["x"][:ps.n_owned].tolist()
    assert world_spawn(2, prog)[0] == [21.0]


def _single(pos, r_cut=0.3, ghost=0.35):
    dec = Decomposition.build(UNIT3, [NON_PERIODIC] * 3, Ghost(ghost), 1)
    ps = ParticleSet(dec, [vector("f")])
    ps.add(np.asarray(pos, dtype=float))
    ps.ghost_get()
    return ps


def test_pair_radius_is_strict():
    ps = _single([[0.5, 0.5, 0.5], [0.5 + 0.9 * 0.25, 0.5, 0.5]])
    assert len(build_verlet(ps, 0.25, symmetric=True)) == 1
    ps = _single([[0.25, 0.5, 0.5], [0.5, 0.5, 0.5]])
    assert len(build_verlet(ps, 0.25, symmetric=True)) == 0
    assert len(build_verlet(ps, 0.2500001, symmetric=True)) == 1


def test_symmetric_count_half_of_full_lattice():
    g = (np.stack(np.meshgrid(*[np.arange(5)] * 3, indexing="ij"), -1).reshape(-1, 3) + 0.5) / 5
    ps = _single(g, ghost=0.45)
    full = build_verlet(ps, 0.41)
    sym = build_verlet(ps, 0.41, symmetric=True)
    d = np.linalg.norm(g[:, None] - g[None], axis=-1)
    brute = int(np.sum((d < 0.41) & (d > 0)))
    assert len(full) == brute and 2 * len(sym) == brute


def test_cell_list_matches_brute_force():
    rng = np.random.default_rng(5)
    pos = rng.random((150, 3))
    ps = _single(pos, ghost=0.2)
    cl = build_cell_list(ps, 0.15)
    i, j = cl.pairs(ps.pos, ps.gid, ps.n_owned)
    d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
    want = {(a, b) for a, b in zip(*np.nonzero((d < 0.15) & (d > 0)))}
    assert set(zip(i.tolist(), j.tolist())) == want


def test_radius_beyond_ghost_rejected():
    ps = _single([[0.5, 0.5, 0.5]], ghost=0.1)
    with pytest.raises(UsageError):
        build_verlet(ps, 0.1, skin=0.01)


def test_apply_pairwise_examples():
    sigma = 0.1
    ps = _single([[0.5, 0.5, 0.5], [0.6, 0.5, 0.5]])
    vl = build_verlet(ps, 0.3, symmetric=True)
    apply_pairwise(ps, vl, lambda dx, r2: np.zeros_like(dx), "f")
    assert np.all(ps.props["f"] == 0)
    apply_pairwise(ps, vl, LJKernel(sigma, 1.0), "f")
    assert np.allclose(ps.props["f"], [[-240, 0, 0], [240, 0, 0]], rtol=1e-12)
    assert np.allclose(lj_force([0.5, 0.5, 0.5], [0.6, 0.5, 0.5], sigma, 1.0, 0.3), [-240, 0, 0])


def _lj_oracle(pos, box, periodic, sigma, r_cut):
    n = len(pos)
    f = np.zeros_like(pos)
    L = np.asarray(box)
    for a in range(n):
        for b in range(n):
            if a == b:
                continue
            d = pos[a] - pos[b]
            if periodic:
                d = d - L * np.round(d / L)
            r2 = d @ d
            if r2 < r_cut * r_cut:
                s6 = (sigma * sigma / r2) ** 3
                f[a] += 24.0 * (2 * s6 * s6 - s6) / r2 * d
    return f


@pytest.mark.parametrize("nranks", [1, 2, 4])
@pytest.mark.parametrize("periodic", [True, False])
def test_symmetric_matches_full_and_oracle(nranks, periodic):
    sigma, r_cut = 0.1, 0.3
    rng = np.random.default_rng(nranks + 10 * periodic)
    g = np.stack(np.meshgrid(*[np.arange(5)] * 3, indexing="ij"), -1).reshape(-1, 3)
    pos = (g + 0.5 + rng.uniform(-0.2, 0.2, g.shape)) * 0.3
    box = (1.5, 1.5, 1.5)
    bc = [PERIODIC if periodic else NON_PERIODIC] * 3

    def prog(w, symmetric):
        dec = Decomposition.build(Box((0, 0, 0), box), bc, Ghost(r_cut), w.size, world=w)
        ps = ParticleSet(dec, [vector("f")], w)
        if w.rank == 0:
            ps.add(pos)
        ps.map_global()
        ps.ghost_get()
        vl = build_verlet(ps, r_cut, symmetric=symmetric)
        apply_pairwise(ps, vl, LJKernel(sigma, 1.0), "f")
        if symmetric:
            ps.ghost_put(SUM, ["f"])
        return ps.gather(["f"])["f"]
    sym = world_spawn(nranks, prog, True)[0]
    full = world_spawn(nranks, prog, False)[0]
    ref = _lj_oracle(pos, box, periodic, sigma, r_cut)
    scale = np.linalg.norm(ref, axis=1).max()
    assert np.abs(sym - ref).max() / scale < 1e-12
    assert np.abs(full - ref).max() / scale < 1e-12


def test_iterate_regions():
    ps = ParticleSet(Decomposition.build(UNIT2, [PERIODIC] * 2, Ghost(0.2), 1), [])
    assert list(iterate(ps, Region.ALL)) == []
    ps.add(np.random.default_rng(0).random((30, 2)))
    ps.ghost_get()
    own, gh, al = (set(iterate(ps, r)) for r in (Region.OWNED, Region.GHOST, Region.ALL))
    assert own | gh == al and not own & gh
    assert len(gh) == len(ps.ghost_src_index)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_ghost_positions_are_shifted_owner_positions(seed, nranks):
    rng = np.random.default_rng(seed)
    pos = rng.random((60, 2))

    def prog(w):
        dec = Decomposition.build(UNIT2, [PERIODIC, NON_PERIODIC], Ghost(0.15), w.size, world=w)
        ps = ParticleSet(dec, [scalar("q")], w)
        if w.rank == 0:
            ps.add(pos, q=np.arange(60.0))
        ps.map_global()
        ps.ghost_get(["q"])
        g = slice(ps.n_owned, ps.n_total)
        return ps.gid[g], ps.pos[g], ps.ghost_shift, ps.props["q"][g]
    for gid, gpos, shift, q in world_spawn(nranks, prog):
        assert np.array_equal(gpos, pos[gid] + shift)
        assert np.array_equal(q, gid.astype(float))


def test_neighbor_pairs_orientation():
    pos = np.array([[0.0, 0.0], [0.1, 0.0], [0.05, 0.05]])
    gid = np.array([5, 2, 9])
    i, j = neighbor_pairs(pos, gid, 3, 0.2, symmetric=True)
    for a, b in zip(i, j):
        assert gid[a] < gid[b]
