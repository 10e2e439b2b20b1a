"""Rank-addressed message passing.

A :class:`World` is one rank's endpoint.  Two backends move raw envelopes:
:class:`InProcessHub` (threads in one process, optional randomised delivery
delays) and :class:`TcpBackend` (one socket per ordered rank pair).  Everything
above raw delivery -- matching, chunking, collectives, NBX -- lives in
:class:`World` and is identical for both backends.

Delivery is FIFO per (source, dest) pair.  Messages larger than
``max_message_size`` are split into frames; every frame except the last has
bit 31 of the tag set.
"""
from __future__ import annotations

import collections
import heapq
import logging
import pickle
import random
import socket
import struct
import threading
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

from .errors import ProtocolError, TransportError, UsageError, WorldAborted

log = logging.getLogger(__name__)

MAX_MESSAGE_SIZE = 64 * 1024 * 1024
USER_TAG_LIMIT = 1 << 30
_INTERNAL = 1 << 30
_CONT = 1 << 31
_EPOCH_MASK = _INTERNAL - 1

WIRE_MAGIC = b"PMXWIRE1"
_FRAME = struct.Struct("<QIII")

# internal message kinds and sub-kinds (first two payload bytes)
_ALLGATHER, _BARRIER, _NBX, _EXCHANGE = 1, 2, 3, 4
_DATA, _ACK, _ENTER, _RELEASE = 0, 1, 2, 3


@dataclass(frozen=True)
class Envelope:
    source: int
    dest: int
    tag: int
    payload: bytes


# ---------------------------------------------------------------- backends

class InProcessHub:
    """Shared mailboxes for ``size`` ranks living in one process.

    ``delay=(lo, hi)`` holds every message back for a uniform random time in
    seconds, drawn from a generator seeded with ``seed``; per-pair FIFO order
    is preserved.
    """

    def __init__(self, size: int, delay: tuple[float, float] | None = None, seed: int = 0):
        self.size = size
        self.delay = delay
        self._rng = random.Random(seed)
        self._cond = [threading.Condition() for _ in range(size)]
        self._inbox: list[list] = [[] for _ in range(size)]
        self._last_ready: dict[tuple[int, int], float] = {}
        self._seq = 0
        self._lock = threading.Lock()
        self.aborted = False
        self.sent_count = 0

    def backend(self, rank: int) -> "InProcessBackend":
        return InProcessBackend(self, rank)

    def abort(self):
        self.aborted = True
        for c in self._cond:
            with c:
                c.notify_all()

    def _post(self, env: Envelope):
        with self._lock:
            now = time.monotonic()
            ready = now
            if self.delay is not None:
                ready = now + self._rng.uniform(*self.delay)
            pair = (env.source, env.dest)
            ready = max(ready, self._last_ready.get(pair, 0.0))
            self._last_ready[pair] = ready
            self._seq += 1
            seq = self._seq
            self.sent_count += 1
        cond = self._cond[env.dest]
        with cond:
            heapq.heappush(self._inbox[env.dest], (ready, seq, env))
            cond.notify_all()

    def _poll(self, rank: int, timeout: float) -> list[Envelope]:
        cond = self._cond[rank]
        box = self._inbox[rank]
        deadline = time.monotonic() + timeout
        with cond:
            while True:
                if self.aborted:
                    raise WorldAborted("another rank failed")
                now = time.monotonic()
                out = []
                while box and box[0][0] <= now:
                    out.append(heapq.heappop(box)[2])
                if out:
                    return out
                wait = deadline - now
                if box:
                    wait = min(wait, box[0][0] - now)
                if wait <= 0:
                    return []
                cond.wait(wait)


class InProcessBackend:
    def __init__(self, hub: InProcessHub, rank: int):
        self.hub = hub
        self.rank = rank
        self.size = hub.size

    def post(self, env: Envelope):
        if self.hub.aborted:
            raise WorldAborted("another rank failed")
        self.hub._post(env)

    def poll(self, timeout: float) -> list[Envelope]:
        return self.hub._poll(self.rank, timeout)

    def close(self):
        pass


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            return None
        buf.extend(chunk)
    return bytes(buf)


class TcpBackend:
    """Full mesh of TCP connections; ``hosts[r]`` is rank r's listening address.

    Each sender opens its own connection to each destination, writes
    ``PMXWIRE1`` once and then frames ``[u64 len][u32 src][u32 dst][u32 tag]
    [payload]`` (little-endian).
    """

    def __init__(self, rank: int, hosts: Sequence[tuple[str, int]], connect_timeout: float = 30.0,
                 listener: socket.socket | None = None):
        self.rank = rank
        self.size = len(hosts)
        self.hosts = [(h, int(p)) for h, p in hosts]
        self.connect_timeout = connect_timeout
        self._inbox: collections.deque[Envelope] = collections.deque()
        self._cond = threading.Condition()
        self._out: dict[int, socket.socket] = {}
        self._out_lock = threading.Lock()
        self._closed = False
        self._error: BaseException | None = None
        self._readers: list[socket.socket] = []
        if listener is None:
            listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            listener.bind(self.hosts[rank])
        listener.listen(max(self.size, 8))
        self._listener = listener
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()

    def _accept_loop(self):
        while not self._closed:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._readers.append(conn)
            threading.Thread(target=self._read_loop, args=(conn,), daemon=True).start()

    def _read_loop(self, conn: socket.socket):
        try:
            magic = _recv_exact(conn, len(WIRE_MAGIC))
            if magic is None:
                return
            if magic != WIRE_MAGIC:
                raise ProtocolError(f"bad wire magic {magic!r}")
            while True:
                head = _recv_exact(conn, _FRAME.size)
                if head is None:
                    return
                length, src, dst, tag = _FRAME.unpack(head)
                payload = _recv_exact(conn, length) if length else b""
                if payload is None:
                    raise ProtocolError("connection closed mid-frame")
                if dst != self.rank:
                    raise ProtocolError(f"frame for rank {dst} arrived at rank {self.rank}")
                with self._cond:
                    self._inbox.append(Envelope(src, dst, tag, payload))
                    self._cond.notify_all()
        except BaseException as exc:  # surfaced on the next poll
            if not self._closed:
                with self._cond:
                    self._error = exc
                    self._cond.notify_all()

    def _connect(self, dest: int) -> socket.socket:
        deadline = time.monotonic() + self.connect_timeout
        while True:
            try:
                s = socket.create_connection(self.hosts[dest], timeout=5.0)
                s.settimeout(None)
                s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                s.sendall(WIRE_MAGIC)
                return s
            except OSError as exc:
                if time.monotonic() > deadline:
                    raise TransportError(f"rank {self.rank}: cannot reach rank {dest} at "
                                         f"{self.hosts[dest]}: {exc}") from exc
                time.sleep(0.05)

    def post(self, env: Envelope):
        with self._out_lock:
            s = self._out.get(env.dest)
            if s is None:
                s = self._out[env.dest] = self._connect(env.dest)
            try:
                s.sendall(_FRAME.pack(len(env.payload), env.source, env.dest, env.tag) + env.payload)
            except OSError as exc:
                raise TransportError(f"rank {self.rank}: send to {env.dest} failed: {exc}") from exc

    def poll(self, timeout: float) -> list[Envelope]:
        with self._cond:
            if not self._inbox and self._error is None:
                self._cond.wait(timeout)
            if self._error is not None:
                err = self._error
                if isinstance(err, WorldAborted):
                    raise err
                raise TransportError(f"rank {self.rank}: receive failed: {err}") from err
            out = list(self._inbox)
            self._inbox.clear()
            return out

    def close(self):
        self._closed = True
        for s in list(self._out.values()) + self._readers:
            try:
                s.close()
            except OSError:
                pass
        try:
            self._listener.close()
        except OSError:
            pass


def read_hostlist(path: str) -> list[tuple[str, int]]:
    hosts = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            host, sep, port = line.rpartition(":")
            if not sep or not port.isdigit():
                raise UsageError(f"host list {path}: expected host:port, got {line!r}")
            hosts.append((host or "127.0.0.1", int(port)))
    if not hosts:
        raise UsageError(f"host list {path} is empty")
    return hosts


# ------------------------------------------------------------------- world

class World:
    """Endpoint of one rank.  Not thread-safe; one caller per endpoint."""

    def __init__(self, rank: int, size: int, backend, max_message_size: int = MAX_MESSAGE_SIZE,
                 timeout: float = 600.0, poll_interval: float = 0.05):
        if not 0 <= rank < size:
            raise UsageError(f"rank {rank} outside world of size {size}")
        self.rank = rank
        self.size = size
        self.backend = backend
        self.max_message_size = int(max_message_size)
        self.timeout = timeout
        self.poll_interval = poll_interval
        self._epoch = 0
        self._queues: dict[int, collections.deque] = collections.defaultdict(collections.deque)
        self._partial: dict[tuple[int, int], list[bytes]] = {}

    my_rank = property(lambda self: self.rank)

    # -- point to point

    def send(self, dest: int, tag: int, payload: bytes):
        if not 0 <= tag < USER_TAG_LIMIT:
            raise UsageError(f"user tags must lie in [0, {USER_TAG_LIMIT}), got {tag}")
        self._send(dest, tag, bytes(payload))

    def recv(self, source: int, tag: int) -> bytes:
        if not 0 <= tag < USER_TAG_LIMIT:
            raise UsageError(f"user tags must lie in [0, {USER_TAG_LIMIT}), got {tag}")
        return self._recv(source, tag)

    def _check_rank(self, r: int):
        if not isinstance(r, int) or not 0 <= r < self.size:
            raise UsageError(f"invalid rank {r!r} for world of size {self.size}")

    def _send(self, dest: int, tag: int, payload: bytes):
        self._check_rank(dest)
        if dest == self.rank:
            self._queues[tag].append((self.rank, payload))
            return
        step = self.max_message_size
        if len(payload) <= step:
            self.backend.post(Envelope(self.rank, dest, tag, payload))
            return
        view = memoryview(payload)
        n = len(payload)
        for start in range(0, n, step):
            last = start + step >= n
            self.backend.post(Envelope(self.rank, dest, tag if last else tag | _CONT,
                                       bytes(view[start:start + step])))

    def _progress(self, timeout: float):
        for env in self.backend.poll(timeout):
            key = (env.source, env.tag & ~_CONT)
            if env.tag & _CONT:
                self._partial.setdefault(key, []).append(env.payload)
                continue
            parts = self._partial.pop(key, None)
            payload = env.payload if parts is None else b"".join(parts + [env.payload])
            self._queues[key[1]].append((env.source, payload))

    def _take(self, tag: int, source: int | None):
        q = self._queues.get(tag)
        if not q:
            return None
        if source is None:
            return q.popleft()
        for i, item in enumerate(q):
            if item[0] == source:
                del q[i]
                return item
        return None

    def _wait_for(self, tag: int, source: int | None):
        deadline = time.monotonic() + self.timeout
        while True:
            item = self._take(tag, source)
            if item is not None:
                return item
            if time.monotonic() > deadline:
                raise TransportError(f"rank {self.rank}: timed out waiting for tag {tag:#x} "
                                     f"from {'any' if source is None else source}")
            self._progress(self.poll_interval)

    def _recv(self, source: int, tag: int) -> bytes:
        self._check_rank(source)
        return self._wait_for(tag, source)[1]

    # -- collectives

    def _next_tag(self) -> int:
        self._epoch += 1
        return _INTERNAL | (self._epoch & _EPOCH_MASK)

    @staticmethod
    def _head(kind: int, sub: int) -> bytes:
        return bytes((kind, sub))

    def _expect(self, kind: int, item, tag: int):
        src, payload = item
        if len(payload) < 2 or payload[0] != kind:
            got = payload[0] if payload else None
            raise ProtocolError(f"collective mismatch at epoch {tag & _EPOCH_MASK}: rank {src} "
                                f"sent kind {got}, expected {kind}")
        return src, payload[1], payload[2:]

    def allgather(self, local: bytes) -> list[bytes]:
        tag = self._next_tag()
        head = self._head(_ALLGATHER, 0)
        local = bytes(local)
        for r in range(self.size):
            if r != self.rank:
                self._send(r, tag, head + local)
        out: list[bytes | None] = [None] * self.size
        out[self.rank] = local
        for r in range(self.size):
            if r != self.rank:
                _, _, body = self._expect(_ALLGATHER, self._wait_for(tag, r), tag)
                out[r] = body
        return out  # type: ignore[return-value]

    def barrier(self):
        tag = self._next_tag()
        if self.size == 1:
            return
        if self.rank == 0:
            for r in range(1, self.size):
                _, sub, _ = self._expect(_BARRIER, self._wait_for(tag, r), tag)
                if sub != _ENTER:
                    raise ProtocolError("unexpected barrier message")
            for r in range(1, self.size):
                self._send(r, tag, self._head(_BARRIER, _RELEASE))
        else:
            self._send(0, tag, self._head(_BARRIER, _ENTER))
            _, sub, _ = self._expect(_BARRIER, self._wait_for(tag, 0), tag)
            if sub != _RELEASE:
                raise ProtocolError("unexpected barrier message")

    def nbx_exchange(self, outgoing: Mapping[int, bytes]) -> dict[int, bytes]:
        """Sparse all-to-some exchange without knowledge of the global pattern.

        Each rank sends its payloads and tracks acknowledgements while
        servicing incoming data; once every own send is acknowledged it enters
        a non-blocking barrier and keeps receiving until the barrier completes.
        Returns ``{source: payload}``.
        """
        for dest in outgoing:
            self._check_rank(dest)
        tag = self._next_tag()
        received: dict[int, bytes] = {}
        pending = set()
        data_head = self._head(_NBX, _DATA)
        for dest in sorted(outgoing):
            payload = bytes(outgoing[dest])
            if dest == self.rank:
                received[self.rank] = payload
                continue
            self._send(dest, tag, data_head + payload)
            pending.add(dest)
        in_barrier = False
        entered = 0
        deadline = time.monotonic() + self.timeout
        while True:
            item = self._take(tag, None)
            while item is not None:
                src, sub, body = self._expect(_NBX, item, tag)
                if sub == _DATA:
                    if src in received:
                        raise ProtocolError(f"duplicate NBX payload from rank {src}")
                    received[src] = body
                    self._send(src, tag, self._head(_NBX, _ACK))
                elif sub == _ACK:
                    pending.discard(src)
                elif sub == _ENTER:
                    entered += 1
                elif sub == _RELEASE:
                    return received
                item = self._take(tag, None)
            if not in_barrier and not pending:
                in_barrier = True
                if self.rank == 0:
                    entered += 1
                else:
                    self._send(0, tag, self._head(_NBX, _ENTER))
            if self.rank == 0 and in_barrier and entered == self.size:
                for r in range(1, self.size):
                    self._send(r, tag, self._head(_NBX, _RELEASE))
                return received
            if time.monotonic() > deadline:
                raise TransportError(f"rank {self.rank}: NBX exchange timed out "
                                     f"({len(pending)} unacknowledged sends)")
            self._progress(self.poll_interval)

    def exchange(self, outgoing: Mapping[int, bytes], sources: Iterable[int]) -> dict[int, bytes]:
        """Sparse exchange with a pattern known on both sides.

        Every rank listed in ``sources`` must send to this rank; used for
        ghost synchronisation whose schedule is fixed by the decomposition.
        """
        tag = self._next_tag()
        head = self._head(_EXCHANGE, 0)
        for dest in sorted(outgoing):
            self._send(dest, tag, head + bytes(outgoing[dest]))
        out = {}
        for src in sorted(set(sources)):
            _, _, body = self._expect(_EXCHANGE, self._wait_for(tag, src), tag)
            out[src] = body
        return out

    # -- object helpers built on allgather

    def allgather_obj(self, obj) -> list:
        return [pickle.loads(b) for b in self.allgather(pickle.dumps(obj))]

    def bcast_obj(self, obj, root: int = 0):
        return self.allgather_obj(obj if self.rank == root else None)[root]

    def allreduce_sum(self, value):
        vals = self.allgather_obj(value)
        total = vals[0]
        for v in vals[1:]:
            total = total + v
        return total

    def allreduce_max(self, value):
        return max(self.allgather_obj(value))

    def close(self):
        self.backend.close()


def serial_world() -> World:
    """A one-rank world, handy for serial use of the distributed structures."""
    return World(0, 1, InProcessHub(1).backend(0))


# ------------------------------------------------------------------- spawn

def _run_ranks(worlds: list[World], program: Callable, args, kwargs, abort: Callable[[], None],
               timeout: float) -> list:
    n = len(worlds)
    results: list = [None] * n
    errors: list[tuple[float, int, BaseException]] = []
    lock = threading.Lock()

    def run(r: int):
        try:
            results[r] = program(worlds[r], *args, **kwargs)
        except BaseException as exc:
            with lock:
                errors.append((time.monotonic(), r, exc))
            abort()

    threads = [threading.Thread(target=run, args=(r,), name=f"rank-{r}", daemon=True)
               for r in range(n)]
    for t in threads:
        t.start()
    deadline = time.monotonic() + timeout
    for t in threads:
        t.join(max(0.0, deadline - time.monotonic()))
    if any(t.is_alive() for t in threads):
        abort()
        for t in threads:
            t.join(5.0)
        raise TransportError(f"world of {n} ranks did not finish within {timeout} s")
    for w in worlds:
        w.close()
    if errors:
        primary = [e for e in errors if not isinstance(e[2], WorldAborted)] or errors
        primary.sort(key=lambda e: (e[0], e[1]))
        raise primary[0][2]
    return results


def world_spawn(n: int, program: Callable, *args, delay: tuple[float, float] | None = None,
                seed: int = 0, timeout: float = 600.0, max_message_size: int = MAX_MESSAGE_SIZE,
                **kwargs) -> list:
    """Run ``program(world, *args, **kwargs)`` on ``n`` in-process ranks.

    Returns the per-rank results in rank order.  If any rank raises, the
    world is aborted and that rank's exception is re-raised.
    """
    if n < 1:
        raise UsageError("world size must be >= 1")
    hub = InProcessHub(n, delay=delay, seed=seed)
    worlds = [World(r, n, hub.backend(r), max_message_size=max_message_size, timeout=timeout)
              for r in range(n)]
    return _run_ranks(worlds, program, args, kwargs, hub.abort, timeout)


def free_local_ports(n: int) -> list[socket.socket]:
    socks = []
    for _ in range(n):
        s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        s.bind(("127.0.0.1", 0))
        socks.append(s)
    return socks


def tcp_world_spawn(n: int, program: Callable, *args, timeout: float = 600.0,
                    max_message_size: int = MAX_MESSAGE_SIZE, **kwargs) -> list:
    """Like :func:`world_spawn` but every rank talks over localhost TCP."""
    listeners = free_local_ports(n)
    hosts = [s.getsockname() for s in listeners]
    backends = [TcpBackend(r, hosts, listener=listeners[r]) for r in range(n)]
    worlds = [World(r, n, backends[r], max_message_size=max_message_size, timeout=timeout)
              for r in range(n)]

    def abort():
        for b in backends:
            b._closed = True
            with b._cond:
                b._error = WorldAborted("another rank failed")
                b._cond.notify_all()

    return _run_ranks(worlds, program, args, kwargs, abort, timeout)


def tcp_world(rank: int, hosts: Sequence[tuple[str, int]], timeout: float = 600.0) -> World:
    return World(rank, len(hosts), TcpBackend(rank, hosts), timeout=timeout)
