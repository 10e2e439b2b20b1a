"""Minimal legacy-VTK (ASCII, version 3.0) reader used to validate writer output.

Only POLYDATA and STRUCTURED_POINTS are understood; anything malformed raises
ValueError.  Written against the file-format grammar, not the writer.
"""
import numpy as np

_TYPES = {"bit", "unsigned_char", "char", "unsigned_short", "short", "unsigned_int", "int",
          "unsigned_long", "long", "float", "double"}


class _Tokens:
    def __init__(self, lines):
        self.tok = " ".join(lines).split()
        self.i = 0

    def done(self):
        return self.i >= len(self.tok)

    def next(self):
        if self.done():
            raise ValueError("unexpected end of file")
        self.i += 1
        return self.tok[self.i - 1]

    def peek(self):
        return None if self.done() else self.tok[self.i]

    def ints(self, n):
        return [int(self.next()) for _ in range(n)]

    def floats(self, n):
        return np.array([float(self.next()) for _ in range(n)])


def read(path):
    with open(path) as fh:
        lines = fh.read().split("\n")
    if not lines[0].startswith("# vtk DataFile Version"):
        raise ValueError("bad magic line")
    if len(lines[1]) > 256:
        raise ValueError("title too long")
    if lines[2].strip() != "ASCII":
        raise ValueError("only ASCII files are supported")
    t = _Tokens(lines[3:])
    if t.next() != "DATASET":
        raise ValueError("expected DATASET")
    kind = t.next()
    out = {"dataset": kind, "fields": {}}
    if kind == "POLYDATA":
        if t.next() != "POINTS":
            raise ValueError("expected POINTS")
        n = int(t.next())
        if t.next() not in _TYPES:
            raise ValueError("bad POINTS type")
        out["points"] = t.floats(3 * n).reshape(n, 3)
        npts = n
        if t.peek() == "VERTICES":
            t.next()
            ncell, size = t.ints(2)
            used = 0
            for _ in range(ncell):
                k = int(t.next())
                ids = t.ints(k)
                if any(i < 0 or i >= n for i in ids):
                    raise ValueError("vertex index out of range")
                used += k + 1
            if used != size:
                raise ValueError("VERTICES size mismatch")
            out["vertices"] = ncell
    elif kind == "STRUCTURED_POINTS":
        seen = {}
        for _ in range(3):
            key = t.next()
            if key not in ("DIMENSIONS", "ORIGIN", "SPACING", "ASPECT_RATIO"):
                raise ValueError(f"unexpected {key}")
            seen["SPACING" if key == "ASPECT_RATIO" else key] = t.ints(3) if key == "DIMENSIONS" else t.floats(3)
        if set(seen) != {"DIMENSIONS", "ORIGIN", "SPACING"}:
            raise ValueError("incomplete STRUCTURED_POINTS header")
        out.update({k.lower(): v for k, v in seen.items()})
        npts = int(np.prod(seen["DIMENSIONS"]))
    else:
        raise ValueError(f"unsupported dataset {kind}")
    out["n"] = npts
    if t.done():
        return out
    if t.next() != "POINT_DATA" or int(t.next()) != npts:
        raise ValueError("POINT_DATA count mismatch")
    while not t.done():
        key = t.next()
        name = t.next()
        if name in out["fields"]:
            raise ValueError(f"duplicate field {name}")
        if key == "SCALARS":
            typ = t.next()
            ncomp = 1
            if t.peek() not in ("LOOKUP_TABLE", None):
                ncomp = int(t.next())
            if typ not in _TYPES or not 1 <= ncomp <= 4:
                raise ValueError("bad SCALARS header")
            if t.next() != "LOOKUP_TABLE":
                raise ValueError("missing LOOKUP_TABLE")
            t.next()
            vals = t.floats(npts * ncomp)
            out["fields"][name] = vals.reshape(npts, ncomp) if ncomp > 1 else vals
        elif key == "VECTORS":
            if t.next() not in _TYPES:
                raise ValueError("bad VECTORS type")
            out["fields"][name] = t.floats(3 * npts).reshape(npts, 3)
        else:
            raise ValueError(f"unsupported attribute {key}")
    return out
