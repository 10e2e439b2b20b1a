"""Runtime property schemas shared by particle sets and grids.

A property is a scalar, a D-vector, a fixed-length array or a variable-length
list of records.  Columns are stored structure-of-arrays; list columns hold one
structured numpy array per entity.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import UsageError

SCALAR = "scalar"
VECTOR = "vector"
ARRAY = "array"
LIST = "list"
_KINDS = (SCALAR, VECTOR, ARRAY, LIST)
_DTYPES = ("f8", "i8")


@dataclass(frozen=True)
class Prop:
    name: str
    kind: str = SCALAR
    size: int = 0
    dtype: str = "f8"
    fields: tuple["Prop", ...] = field(default=())

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise UsageError(f"unknown property kind {self.kind!r}")
        if self.kind != LIST and self.dtype not in _DTYPES:
            raise UsageError(f"property {self.name!r}: dtype must be one of {_DTYPES}")
        if self.kind == ARRAY and self.size < 1:
            raise UsageError(f"array property {self.name!r} needs size >= 1")
        if self.kind == LIST:
            if not self.fields:
                raise UsageError(f"list property {self.name!r} needs element fields")
            names = [f.name for f in self.fields]
            if len(set(names)) != len(names):
                raise UsageError(f"list property {self.name!r} has duplicate field names")
            if any(f.kind == LIST for f in self.fields):
                raise UsageError(f"list property {self.name!r} nests more than one level")

    def shape(self, dim: int) -> tuple[int, ...]:
        if self.kind == SCALAR:
            return ()
        if self.kind == VECTOR:
            return (dim,)
        if self.kind == ARRAY:
            return (self.size,)
        raise UsageError(f"list property {self.name!r} has no fixed shape")

    def np_dtype(self, dim: int) -> np.dtype:
        """Little-endian dtype of one value (of one element for list properties)."""
        if self.kind == LIST:
            return np.dtype([(f.name, f.np_dtype(dim)) for f in self.fields])
        base = np.dtype("<" + self.dtype)
        shp = self.shape(dim)
        return np.dtype((base, shp)) if shp else base

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        if self.kind == ARRAY:
            d["size"] = self.size
        if self.kind == LIST:
            d["fields"] = [f.to_dict() for f in self.fields]
        else:
            d["dtype"] = self.dtype
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Prop":
        return cls(d["name"], d["kind"], int(d.get("size", 0)), d.get("dtype", "f8"),
                   tuple(cls.from_dict(f) for f in d.get("fields", ())))


def scalar(name: str, dtype: str = "f8") -> Prop:
    return Prop(name, SCALAR, dtype=dtype)


def vector(name: str, dtype: str = "f8") -> Prop:
    return Prop(name, VECTOR, dtype=dtype)


def array(name: str, size: int, dtype: str = "f8") -> Prop:
    return Prop(name, ARRAY, size=size, dtype=dtype)


def varlist(name: str, fields: Sequence[Prop]) -> Prop:
    return Prop(name, LIST, fields=tuple(fields))


class Schema:
    def __init__(self, props: Iterable[Prop] = ()):
        self.props = tuple(props)
        names = [p.name for p in self.props]
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise UsageError(f"duplicate property names: {sorted(dup)}")
        self._by_name = {p.name: p for p in self.props}

    def __iter__(self):
        return iter(self.props)

    def __len__(self):
        return len(self.props)

    def __contains__(self, name):
        return name in self._by_name

    def __getitem__(self, name: str) -> Prop:
        try:
            return self._by_name[name]
        except KeyError:
            raise UsageError(f"no property named {name!r}") from None

    def __eq__(self, other):
        return isinstance(other, Schema) and self.props == other.props

    def __repr__(self):
        return f"Schema({list(self.props)!r})"

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.props]

    def select(self, names: Iterable[str] | None) -> list[Prop]:
        if names is None:
            return list(self.props)
        return [self[n] for n in names]

    def to_json(self) -> str:
        return json.dumps([p.to_dict() for p in self.props], separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "Schema":
        return cls(Prop.from_dict(d) for d in json.loads(text))

    def empty_column(self, prop: Prop, n: int, dim: int):
        if prop.kind == LIST:
            dt = prop.np_dtype(dim)
            return [np.zeros(0, dtype=dt) for _ in range(n)]
        return np.zeros((n,) + prop.shape(dim), dtype=np.dtype(prop.dtype))


# -- byte packing of columns (little-endian, IEEE-754 binary64 / int64)

def pack_column(prop: Prop, col, idx: np.ndarray, dim: int) -> bytes:
    if prop.kind == LIST:
        dt = prop.np_dtype(dim)
        items = [np.asarray(col[i], dtype=dt) for i in idx.tolist()]
        counts = np.array([len(a) for a in items], dtype="<u8")
        body = b"".join(a.tobytes() for a in items)
        return counts.tobytes() + body
    return np.ascontiguousarray(col[idx], dtype="<" + prop.dtype).tobytes()


def unpack_column(prop: Prop, buf: memoryview, offset: int, n: int, dim: int):
    """Returns (column, new offset)."""
    if prop.kind == LIST:
        dt = prop.np_dtype(dim)
        counts = np.frombuffer(buf, dtype="<u8", count=n, offset=offset).astype(np.int64)
        offset += 8 * n
        total = int(counts.sum())
        flat = np.frombuffer(buf, dtype=dt, count=total, offset=offset).copy()
        offset += total * dt.itemsize
        bounds = np.concatenate([[0], np.cumsum(counts)])
        return [flat[bounds[k]:bounds[k + 1]].copy() for k in range(n)], offset
    shp = prop.shape(dim)
    base = np.dtype("<" + prop.dtype)
    count = n * int(np.prod(shp)) if shp else n
    arr = np.frombuffer(buf, dtype=base, count=count, offset=offset).reshape((n,) + shp)
    arr = arr.astype(np.dtype(prop.dtype), copy=True)
    return arr, offset + count * base.itemsize
