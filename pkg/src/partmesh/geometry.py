"""Points, axis-aligned boxes, grid keys, periodic wrapping and Hilbert indexing.

Boxes are half-open: ``p`` lies in ``box`` iff ``low[d] <= p[d] < high[d]``
on every axis, so sub-domain boxes tile a domain without double ownership.
"""
from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import UsageError


class BC(enum.IntEnum):
    NON_PERIODIC = 0
    PERIODIC = 1


PERIODIC = BC.PERIODIC
NON_PERIODIC = BC.NON_PERIODIC


def as_bc(bc: Iterable, dim: int) -> tuple[BC, ...]:
    out = tuple(BC(int(b)) for b in bc)
    if len(out) != dim:
        raise UsageError(f"boundary conditions have length {len(out)}, expected {dim}")
    return out


@dataclass(frozen=True)
class Ghost:
    """Ghost layer extent in length units."""

    width: float = 0.0

    def __post_init__(self):
        if not (self.width >= 0.0) or not math.isfinite(self.width):
            raise UsageError(f"ghost width must be finite and >= 0, got {self.width}")

    def node_width(self, spacing: float) -> int:
        if self.width == 0.0:
            return 0
        return int(math.ceil(self.width / spacing - 1e-12))


@dataclass(frozen=True)
class Box:
    low: tuple[float, ...]
    high: tuple[float, ...]

    def __post_init__(self):
        low = tuple(float(v) for v in self.low)
        high = tuple(float(v) for v in self.high)
        if len(low) != len(high) or len(low) == 0:
            raise UsageError("box corners must have the same nonzero dimension")
        if not all(math.isfinite(v) for v in low + high):
            raise UsageError("box corners must be finite")
        if any(lo > hi for lo, hi in zip(low, high)):
            raise UsageError(f"box has low > high: {low} {high}")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    @property
    def dim(self) -> int:
        return len(self.low)

    @property
    def extent(self) -> np.ndarray:
        return np.subtract(self.high, self.low)

    def volume(self) -> float:
        return float(np.prod(self.extent))

    def is_empty(self) -> bool:
        return any(lo >= hi for lo, hi in zip(self.low, self.high))

    def contains(self, p: Sequence[float]) -> bool:
        return all(lo <= x < hi for lo, x, hi in zip(self.low, p, self.high))

    def contains_points(self, pos: np.ndarray) -> np.ndarray:
        """Vectorised half-open membership test for an (n, D) array."""
        pos = np.asarray(pos, dtype=np.float64).reshape(-1, self.dim)
        lo = np.asarray(self.low)
        hi = np.asarray(self.high)
        return np.all((pos >= lo) & (pos < hi), axis=1)

    def shifted(self, shift: Sequence[float]) -> "Box":
        return Box(tuple(a + s for a, s in zip(self.low, shift)),
                   tuple(b + s for b, s in zip(self.high, shift)))

    def contains_box(self, other: "Box") -> bool:
        return all(a <= c and d <= b for a, b, c, d in
                   zip(self.low, self.high, other.low, other.high))


def box_intersect(a: Box, b: Box) -> Box | None:
    if a.dim != b.dim:
        raise UsageError(f"dimension mismatch: {a.dim} vs {b.dim}")
    low = tuple(max(x, y) for x, y in zip(a.low, b.low))
    high = tuple(min(x, y) for x, y in zip(a.high, b.high))
    if any(lo >= hi for lo, hi in zip(low, high)):
        return None
    return Box(low, high)


def box_enlarge(b: Box, ghost: Ghost | float) -> Box:
    w = ghost.width if isinstance(ghost, Ghost) else float(ghost)
    if w < 0:
        raise UsageError("ghost width must be >= 0")
    return Box(tuple(x - w for x in b.low), tuple(x + w for x in b.high))


def periodic_wrap(p, domain: Box, bc: Sequence[BC]) -> np.ndarray:
    """Wrap a point or an (n, D) array into ``domain`` along periodic axes."""
    arr = np.array(p, dtype=np.float64)
    single = arr.ndim == 1
    pos = arr.reshape(-1, domain.dim)
    for d, b in enumerate(bc):
        if b != PERIODIC:
            continue
        lo, hi = domain.low[d], domain.high[d]
        ext = hi - lo
        col = pos[:, d]
        out = (col < lo) | (col >= hi)
        if np.any(out):
            w = lo + np.mod(col[out] - lo, ext)
            # fmod can round up to exactly hi
            w[w >= hi] = lo
            col[out] = w
    return pos[0] if single else pos


def periodic_shifts(domain: Box, bc: Sequence[BC]) -> list[tuple[float, ...]]:
    """All image shift vectors with components in {-L, 0, +L} on periodic axes."""
    ext = domain.extent
    choices = [(-ext[d], 0.0, ext[d]) if b == PERIODIC else (0.0,) for d, b in enumerate(bc)]
    return [tuple(float(v) for v in c) for c in itertools.product(*choices)]


def hilbert_index(key: Sequence[int], order: int) -> int:
    """Position of ``key`` along the Hilbert curve of side ``2**order``.

    Uses Skilling's transpose construction.  In 2D with order 1 the curve
    visits (0,0), (0,1), (1,1), (1,0).  In 1D the index is the key itself.
    """
    x = [int(k) for k in key]
    n = len(x)
    side = 1 << order
    if order < 0 or any(k < 0 or k >= side for k in x):
        raise UsageError(f"key {tuple(key)} out of range for order {order}")
    if n == 1:
        return x[0]
    if order == 0:
        return 0
    m = 1 << (order - 1)
    q = m
    while q > 1:
        p = q - 1
        for i in range(n):
            if x[i] & q:
                x[0] ^= p
            else:
                t = (x[0] ^ x[i]) & p
                x[0] ^= t
                x[i] ^= t
        q >>= 1
    for i in range(1, n):
        x[i] ^= x[i - 1]
    t = 0
    q = m
    while q > 1:
        if x[n - 1] & q:
            t ^= q - 1
        q >>= 1
    for i in range(n):
        x[i] ^= t
    h = 0
    for bit in range(order - 1, -1, -1):
        for i in range(n):
            h = (h << 1) | ((x[i] >> bit) & 1)
    return h


def linearize(key: Sequence[int], shape: Sequence[int]) -> int:
    """x-fastest linear index of a grid key."""
    idx = 0
    stride = 1
    for k, n in zip(key, shape):
        idx += int(k) * stride
        stride *= int(n)
    return idx


def delinearize(idx: int, shape: Sequence[int]) -> tuple[int, ...]:
    out = []
    for n in shape:
        out.append(int(idx % n))
        idx //= n
    return tuple(out)
