import threading
import time

import numpy as np
import pytest

from partmesh.errors import TransportError, UsageError, WorldAborted
from partmesh.transport import (read_hostlist, serial_world, tcp_world_spawn, world_spawn)


def test_spawn_returns_in_rank_order():
    assert world_spawn(1, lambda w: 42) == [42]
    assert world_spawn(4, lambda w: w.rank) == [0, 1, 2, 3]


def test_point_to_point_pair():
    def prog(w):
        other = 1 - w.rank
        w.send(other, 7, f"hi from {w.rank}".encode())
        return w.recv(other, 7).decode()
    assert world_spawn(2, prog) == ["hi from 1", "hi from 0"]


def test_messages_keep_order_per_tag():
    def prog(w):
        if w.rank == 0:
            for k in range(50):
                w.send(1, 3, bytes([k]))
            return None
        return [w.recv(0, 3)[0] for _ in range(50)]
    assert world_spawn(2, prog, delay=(0.0, 0.001))[1] == list(range(50))


def test_nbx_examples():
    pattern = {0: {1: b"a"}, 1: {2: b"b"}, 2: {}}
    out = world_spawn(3, lambda w: w.nbx_exchange(pattern[w.rank]))
    assert out == [{}, {0: b"a"}, {1: b"b"}]
    assert world_spawn(4, lambda w: w.nbx_exchange({})) == [{}] * 4


def test_nbx_self_send():
    assert world_spawn(2, lambda w: w.nbx_exchange({w.rank: b"me"})) == [{0: b"me"}, {1: b"me"}]


def test_nbx_rejects_bad_rank():
    with pytest.raises(UsageError):
        world_spawn(2, lambda w: w.nbx_exchange({5: b"x"}))


def test_allgather_examples():
    assert serial_world().allgather(b"x") == [b"x"]
    out = world_spawn(3, lambda w: w.allgather(b"abc"[w.rank:w.rank + 1]))
    assert out == [[b"a", b"b", b"c"]] * 3
    assert world_spawn(3, lambda w: w.allgather(b"")) == [[b"", b"", b""]] * 3


def test_barrier_orders_epochs():
    log = []
    lock = threading.Lock()

    def prog(w):
        for epoch in range(20):
            if w.rank == 1:
                time.sleep(0.001)
            with lock:
                log.append(epoch)
            w.barrier()
        return True
    assert world_spawn(3, prog)
    # nobody may enter epoch k+1 before everyone logged epoch k
    assert log == sorted(log)


def test_object_collectives():
    def prog(w):
        return (w.allreduce_sum(np.arange(3) * (w.rank + 1)).tolist(),
                w.allreduce_max(w.rank * 2.5), w.bcast_obj({"r": w.rank}, root=2))
    for res in world_spawn(3, prog):
        assert res == ([0, 6, 12], 5.0, {"r": 2})


def test_large_message_is_split_and_rejoined():
    data = bytes(np.random.default_rng(0).integers(0, 256, 10_000, dtype=np.uint8))

    def prog(w):
        if w.rank == 0:
            w.send(1, 1, data)
            return None
        return w.recv(0, 1)
    assert world_spawn(2, prog, max_message_size=999)[1] == data


def test_failure_propagates_and_aborts_others():
    def prog(w):
        if w.rank == 1:
            raise RuntimeError("boom")
        return w.recv(1, 0)
    with pytest.raises(RuntimeError, match="boom"):
        world_spawn(3, prog, timeout=20)


def test_aborted_world_raises_on_waiters():
    def prog(w):
        if w.rank == 0:
            raise ValueError("first")
        w.barrier()
    with pytest.raises(ValueError):
        world_spawn(2, prog, timeout=20)
    assert issubclass(WorldAborted, TransportError)


def test_user_tag_range():
    with pytest.raises(UsageError):
        serial_world().send(0, -1, b"")


def test_tcp_world_allgather_and_nbx():
    def prog(w):
        g = w.allgather(bytes([w.rank]))
        got = w.nbx_exchange({(w.rank + 1) % w.size: b"n%d" % w.rank})
        return g, got
    out = tcp_world_spawn(3, prog, timeout=60)
    assert out[0][0] == [b"\x00", b"\x01", b"\x02"]
    assert out[1][1] == {0: b"n0"}


def test_read_hostlist(tmp_path):
    p = tmp_path / "hosts"
    p.write_text("# comment\nlocalhost:5000\n\n127.0.0.1:5001\n")
    assert read_hostlist(str(p)) == [("localhost", 5000), ("127.0.0.1", 5001)]
    p.write_text("nohostport\n")
    with pytest.raises(UsageError):
        read_hostlist(str(p))
