"""Minimal PLY reader/writer for vertex-only point and splat files."""

import numpy as np

_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class PlyError(ValueError):
    pass


def _parse_header(f):
    first = f.readline()
    if first.strip() != b"ply":
        raise PlyError("not a PLY file (missing magic line)")
    fmt = None
    elements = []  # (name, count, [(prop, dtype)])
    while True:
        raw = f.readline()
        if not raw:
            raise PlyError("unexpected end of file inside header")
        line = raw.decode("ascii", errors="replace").strip()
        if not line or line.startswith("comment") or line.startswith("obj_info"):
            continue
        tok = line.split()
        if tok[0] == "format":
            if len(tok) < 2:
                raise PlyError(f"malformed format line: {line!r}")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise PlyError(f"malformed element line: {line!r}")
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise PlyError("property declared before any element")
            if tok[1] == "list":
                elements[-1][2].append((tok[-1], None))
                continue
            if len(tok) != 3 or tok[1] not in _TYPES:
                raise PlyError(f"malformed property line: {line!r}")
            elements[-1][2].append((tok[2], _TYPES[tok[1]]))
        elif tok[0] == "end_header":
            break
        else:
            raise PlyError(f"unknown header keyword: {tok[0]!r}")
    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyError(f"unsupported PLY format: {fmt!r}")
    return fmt, elements


def read_ply(path):
    """Return the vertex element of a PLY file as a dict of float64 arrays."""
    with open(path, "rb") as f:
        fmt, elements = _parse_header(f)
        vertex = None
        for name, count, props in elements:
            if name == "vertex":
                vertex = (count, props)
                break
            if any(dt is None for _, dt in props):
                raise PlyError(f"list properties in element {name!r} preceding vertices are unsupported")
            if fmt == "ascii":
                for _ in range(count):
                    f.readline()
            else:
                f.seek(count * sum(np.dtype(dt).itemsize for _, dt in props), 1)
        if vertex is None:
            raise PlyError("PLY file has no vertex element")
        count, props = vertex
        if any(dt is None for _, dt in props):
            raise PlyError("list properties on vertices are unsupported")
        if fmt == "ascii":
            rows = []
            for _ in range(count):
                line = f.readline()
                if not line:
                    raise PlyError("truncated ascii vertex data")
                rows.append(line.split())
            try:
                data = np.array(rows, dtype=np.float64).reshape(count, len(props))
            except ValueError as exc:
                raise PlyError(f"malformed ascii vertex data: {exc}") from None
            return {p: data[:, i] for i, (p, _) in enumerate(props)}
        dtype = np.dtype([(p, "<" + dt) for p, dt in props])
        buf = f.read(count * dtype.itemsize)
        if len(buf) != count * dtype.itemsize:
            raise PlyError("truncated binary vertex data")
        arr = np.frombuffer(buf, dtype=dtype)
        return {p: arr[p].astype(np.float64) for p, _ in props}


def write_ply(path, columns, dtype="f4"):
    """Write an ordered mapping of equal-length 1-D arrays as a binary PLY."""
    names = list(columns)
    n = len(columns[names[0]]) if names else 0
    ptype = {"f4": "float", "f8": "double"}[dtype]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {ptype} {name}" for name in names]
    header.append("end_header")
    rec = np.empty(n, dtype=[(name, "<" + dtype) for name in names])
    for name in names:
        rec[name] = columns[name]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())
