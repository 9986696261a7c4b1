"""OBJ and PLY readers/writers.

Only geometry is kept: texture coordinates, normals records, materials and
extra PLY properties are read past and dropped. Polygons are fan-triangulated.
Writers go through a temporary file and ``os.replace`` so an interrupted run
never leaves a truncated mesh behind.
"""
from __future__ import annotations

import os
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .mesh import TriangleMesh

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


@contextmanager
def atomic_write(path, mode="w"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def _fan(poly):
    return [(poly[0], poly[k], poly[k + 1]) for k in range(1, len(poly) - 1)]


# ---------------------------------------------------------------- OBJ

def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            tag = parts[0]
            if tag == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif tag == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    # negative indices are relative to the current vertex count
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                faces.extend(_fan(idx))
            # vt, vn, usemtl, mtllib, g, o, s, ... are skipped
    return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                        np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(path, mesh: TriangleMesh):
    with atomic_write(path) as fh:
        for x, y, z in mesh.vertices.tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for a, b, c in (mesh.triangles + 1).tolist():
            fh.write(f"f {a} {b} {c}\n")


# ---------------------------------------------------------------- PLY

def _parse_ply_header(fh):
    magic = fh.readline().strip()
    if magic != b"ply":
        raise ValueError("not a PLY file")
    fmt = None
    elements = []  # (name, count, [(prop_name, dtype) or (prop_name, ('list', count_t, item_t))])
    while True:
        line = fh.readline()
        if not line:
            raise ValueError("truncated PLY header")
        parts = line.decode("ascii", errors="replace").split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if parts[1] == "list":
                elements[-1][2].append((parts[4], ("list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]])))
            else:
                elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
        elif parts[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian"):
        raise ValueError(f"unsupported PLY format {fmt!r}")
    return fmt, elements


def _read_binary_element(buf, offset, count, props):
    has_list = any(isinstance(p[1], tuple) for p in props)
    if not has_list:
        dt = np.dtype([(name, "<" + t) for name, t in props])
        arr = np.frombuffer(buf, dtype=dt, count=count, offset=offset)
        return arr, offset + count * dt.itemsize
    # fast path: every list has exactly three items (triangle soup)
    fields = []
    for name, t in props:
        if isinstance(t, tuple):
            fields += [(name + "__n", "<" + t[1]), (name, "<" + t[2], (3,))]
        else:
            fields.append((name, "<" + t))
    dt = np.dtype(fields)
    if offset + count * dt.itemsize <= len(buf):
        arr = np.frombuffer(buf, dtype=dt, count=count, offset=offset)
        list_names = [n for n, t in props if isinstance(t, tuple)]
        if all(np.all(arr[n + "__n"] == 3) for n in list_names):
            return arr, offset + count * dt.itemsize
    # general path: record by record
    rows = []
    for _ in range(count):
        rec = {}
        for name, t in props:
            if isinstance(t, tuple):
                ct, it = np.dtype("<" + t[1]), np.dtype("<" + t[2])
                n = int(np.frombuffer(buf, ct, 1, offset)[0])
                offset += ct.itemsize
                rec[name] = np.frombuffer(buf, it, n, offset).astype(np.int64)
                offset += n * it.itemsize
            else:
                dt1 = np.dtype("<" + t)
                rec[name] = np.frombuffer(buf, dt1, 1, offset)[0]
                offset += dt1.itemsize
        rows.append(rec)
    return rows, offset


def _face_key(props):
    for name, t in props:
        if isinstance(t, tuple) and name in ("vertex_indices", "vertex_index"):
            return name
    raise ValueError("PLY face element has no vertex_indices list")


def read_ply(path, return_colors=False):
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh)
        body = fh.read()
    verts = np.zeros((0, 3))
    faces = np.zeros((0, 3), dtype=np.int64)
    colors = None
    if fmt == "ascii":
        lines = iter(body.decode("ascii", errors="replace").splitlines())
        for name, count, props in elements:
            recs = []
            for _ in range(count):
                line = next(lines).split()
                while not line:
                    line = next(lines).split()
                recs.append(line)
            if name == "vertex":
                names = [p[0] for p in props]
                data = np.array(recs, dtype=np.float64).reshape(count, len(names))
                verts = data[:, [names.index(c) for c in "xyz"]]
                if all(c in names for c in ("red", "green", "blue")):
                    colors = data[:, [names.index(c) for c in ("red", "green", "blue")]].astype(np.uint8)
            elif name == "face":
                key = _face_key(props)
                tris = []
                for rec in recs:
                    pos = 0
                    for pname, t in props:
                        if isinstance(t, tuple):
                            n = int(rec[pos])
                            vals = [int(x) for x in rec[pos + 1: pos + 1 + n]]
                            pos += 1 + n
                            if pname == key:
                                tris.extend(_fan(vals))
                        else:
                            pos += 1
                faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
    else:
        offset = 0
        for name, count, props in elements:
            arr, offset = _read_binary_element(body, offset, count, props)
            if name == "vertex":
                verts = np.column_stack([arr[c].astype(np.float64) for c in "xyz"])
                if all(c in arr.dtype.names for c in ("red", "green", "blue")):
                    colors = np.column_stack([arr[c] for c in ("red", "green", "blue")]).astype(np.uint8)
            elif name == "face":
                key = _face_key(props)
                if isinstance(arr, np.ndarray):
                    faces = arr[key].astype(np.int64).reshape(-1, 3)
                else:
                    tris = []
                    for rec in arr:
                        tris.extend(_fan(list(rec[key])))
                    faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
    mesh = TriangleMesh(verts, faces)
    if return_colors:
        return mesh, colors
    return mesh


def write_ply(path, mesh: TriangleMesh, colors=None, binary=False):
    """Write PLY with float64 vertices and optional per-vertex uchar RGB."""
    n, m = mesh.n_vertices, mesh.n_triangles
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {n}", "property double x", "property double y", "property double z"]
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8).reshape(n, 3)
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"element face {m}", "property list uchar int vertex_indices", "end_header"]
    head = ("\n".join(header) + "\n").encode("ascii")
    if binary:
        vfields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
        if colors is not None:
            vfields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        varr = np.empty(n, dtype=vfields)
        for k, c in enumerate("xyz"):
            varr[c] = mesh.vertices[:, k]
        if colors is not None:
            for k, c in enumerate(("red", "green", "blue")):
                varr[c] = colors[:, k]
        farr = np.empty(m, dtype=[("n", "u1"), ("idx", "<i4", (3,))])
        farr["n"] = 3
        farr["idx"] = mesh.triangles
        with atomic_write(path, "wb") as fh:
            fh.write(head)
            fh.write(varr.tobytes())
            fh.write(farr.tobytes())
        return
    with atomic_write(path, "wb") as fh:
        fh.write(head)
        lines = []
        for i, (x, y, z) in enumerate(mesh.vertices.tolist()):
            row = f"{x!r} {y!r} {z!r}"
            if colors is not None:
                row += " {} {} {}".format(*colors[i].tolist())
            lines.append(row)
        lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles.tolist()]
        fh.write(("\n".join(lines) + "\n").encode("ascii"))


def load_mesh(path) -> TriangleMesh:
    ext = Path(path).suffix.lower()
    if ext == ".obj":
        return read_obj(path)
    if ext == ".ply":
        return read_ply(path)
    raise ValueError(f"unsupported mesh format {ext!r}")


def save_mesh(path, mesh: TriangleMesh, **kwargs):
    ext = Path(path).suffix.lower()
    if ext == ".obj":
        return write_obj(path, mesh)
    if ext == ".ply":
        return write_ply(path, mesh, **kwargs)
    raise ValueError(f"unsupported mesh format {ext!r}")
