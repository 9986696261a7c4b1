"""Triangle mesh container, normals, cotangent Laplacian, NN index, ray casting."""
from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from . import kernels

COT_CLAMP = 1e4


class MeshError(ValueError):
    pass


def vertex_fingerprint(vertices: np.ndarray) -> str:
    """Content hash of a vertex matrix."""
    v = np.ascontiguousarray(vertices, dtype=np.float64)
    h = hashlib.blake2b(digest_size=16)
    h.update(str(v.shape).encode())
    h.update(v.tobytes())
    return h.hexdigest()


class TriangleMesh:
    """Immutable triangle mesh.

    Parameters
    ----------
    vertices : (N, 3) array_like
        Vertex positions.
    triangles : (M, 3) array_like of int
        Vertex indices, counter-clockwise winding.

    Normals are computed on first access. Use :meth:`with_vertices` to get a
    moved copy sharing the connectivity.
    """

    def __init__(self, vertices, triangles, *, _validated: bool = False):
        v = np.array(vertices, dtype=np.float64)
        t = np.array(triangles, dtype=np.int64)
        if t.size == 0:
            t = t.reshape(0, 3)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be (N, 3), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError(f"triangles must be (M, 3), got {t.shape}")
        if not _validated and t.size:
            if t.min() < 0 or t.max() >= len(v):
                raise MeshError("triangle index out of range")
            dup = (t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])
            if dup.any():
                raise MeshError(f"triangle {int(np.flatnonzero(dup)[0])} repeats a vertex index")
        v.flags.writeable = False
        t.flags.writeable = False
        self.vertices = v
        self.triangles = t

    def __repr__(self):
        return f"TriangleMesh(n_vertices={self.n_vertices}, n_triangles={self.n_triangles})"

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def with_vertices(self, vertices) -> "TriangleMesh":
        v = np.asarray(vertices, dtype=np.float64)
        if v.shape != self.vertices.shape:
            raise MeshError(f"vertex shape {v.shape} does not match {self.vertices.shape}")
        out = TriangleMesh(v, self.triangles, _validated=True)
        if "edges" in self.__dict__:
            out.__dict__["edges"] = self.edges
        return out

    @cached_property
    def fingerprint(self) -> str:
        return vertex_fingerprint(self.vertices)

    @cached_property
    def _normals_and_isolated(self):
        return compute_vertex_normals(self)

    @property
    def normals(self) -> np.ndarray:
        return self._normals_and_isolated[0]

    @property
    def isolated_vertices(self) -> np.ndarray:
        return self._normals_and_isolated[1]

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted ``(E, 2)`` index pairs."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def spatial_index(self, members=None, normal_weight: float = 0.0) -> "SpatialIndex":
        """Cached :class:`SpatialIndex` over ``vertices[members]``."""
        cache = self.__dict__.setdefault("_index_cache", {})
        key = (None if members is None else hashlib.blake2b(
            np.ascontiguousarray(members, dtype=np.int64).tobytes(), digest_size=16).hexdigest(),
               float(normal_weight))
        idx = cache.get(key)
        if idx is None:
            sel = slice(None) if members is None else members
            normals = self.normals[sel] if normal_weight > 0 else None
            idx = SpatialIndex(self.vertices[sel], normals, normal_weight)
            cache[key] = idx
        return idx

    def bbox_diagonal(self) -> float:
        if self.n_vertices == 0:
            return 0.0
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))


def compute_vertex_normals(mesh: TriangleMesh):
    """Area-weighted unit vertex normals.

    Returns
    -------
    normals : (N, 3) ndarray
    isolated : ndarray of int
        Vertices referenced by no triangle; their normal is zero.
    """
    acc = kernels.vertex_normal_sums(mesh.vertices, mesh.triangles, mesh.n_vertices)
    norm = np.linalg.norm(acc, axis=1)
    isolated = np.flatnonzero(norm == 0.0)
    out = np.zeros_like(acc)
    ok = norm > 0
    out[ok] = acc[ok] / norm[ok, None]
    if isolated.size:
        warnings.warn(f"{isolated.size} vertices without a normal (isolated)", stacklevel=2)
    return out, isolated


@dataclass(frozen=True)
class LaplaceOperator:
    matrix: sparse.csr_matrix
    source_fingerprint: str

    @property
    def shape(self):
        return self.matrix.shape

    def check_source(self, mesh: TriangleMesh):
        if mesh.fingerprint != self.source_fingerprint:
            raise MeshError("stale Laplace operator: built from different vertex positions")


def cotan_laplacian(mesh: TriangleMesh) -> LaplaceOperator:
    """Symmetric cotangent Laplace-Beltrami matrix (no mass matrix).

    Off-diagonal ``L[u, v] = -(cot a + cot b) / 2`` over the triangles sharing
    edge ``(u, v)``; boundary edges get a single cotangent. The diagonal is the
    negated off-diagonal row sum, so ``L @ 1 == 0``.
    """
    t = mesh.triangles
    n = mesh.n_vertices
    cot, dbl_area = kernels.triangle_cotangents(mesh.vertices, t)
    bad = np.flatnonzero(~(dbl_area > 0.0))
    if bad.size:
        raise MeshError(f"triangle {int(bad[0])} has zero area")
    cot = np.clip(cot, -COT_CLAMP, COT_CLAMP)
    # corner k is opposite edge (k+1, k+2)
    rows, cols, vals = [], [], []
    for k in range(3):
        i = t[:, (k + 1) % 3]
        j = t[:, (k + 2) % 3]
        w = -0.5 * cot[:, k]
        rows += [i, j]
        cols += [j, i]
        vals += [w, w]
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    off = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    L = (off + sparse.diags(diag)).tocsr()
    L.sum_duplicates()
    return LaplaceOperator(L, mesh.fingerprint)


class SpatialIndex:
    """Exact Euclidean nearest-neighbour index over ``[p | w * n]`` rows.

    With ``normal_weight == 0`` (or no normals) the index is over positions
    only.
    """

    def __init__(self, points, normals=None, normal_weight: float = 0.0):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise ValueError("cannot index an empty point set")
        if normal_weight < 0:
            raise ValueError("normal_weight must be >= 0")
        if normal_weight > 0 and normals is None:
            raise ValueError("normal_weight > 0 requires normals")
        self.normal_weight = float(normal_weight)
        self.points = pts
        self._tree = cKDTree(self._features(pts, normals))

    def __len__(self):
        return len(self.points)

    def _features(self, pts, normals):
        if self.normal_weight > 0:
            if normals is None:
                raise ValueError("this index carries normals; query normals required")
            nrm = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
            return np.hstack([pts, self.normal_weight * nrm])
        return pts

    def query(self, points, normals=None):
        """Return ``(distance, index)`` of the nearest member for every query row."""
        q = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        # parallel queries return the same answer as serial ones
        d, i = self._tree.query(self._features(q, normals), k=1, workers=-1)
        return d, i.astype(np.int64)


def build_spatial_index(points, normals=None, normal_weight: float = 0.0) -> SpatialIndex:
    return SpatialIndex(points, normals, normal_weight)


class RayHit(NamedTuple):
    point: np.ndarray
    triangle: int
    distance: float
    barycentric: np.ndarray  # weights of the triangle's three corners


def ray_mesh_intersect_many(mesh: TriangleMesh, origins, directions) -> list[RayHit | None]:
    """Vectorised :func:`ray_mesh_intersect`; misses come back as ``None``."""
    o = np.ascontiguousarray(np.asarray(origins, dtype=np.float64).reshape(-1, 3))
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    dn = np.linalg.norm(d, axis=1)
    if np.any(dn == 0):
        raise ValueError("ray direction must be non-zero")
    d = np.ascontiguousarray(d / dn[:, None])
    if mesh.n_triangles == 0:
        return [None] * len(o)
    tri, dist, u, v = kernels.ray_first_hits(o, d, mesh.vertices, mesh.triangles)
    out = []
    for r in range(len(o)):
        if tri[r] < 0:
            out.append(None)
            continue
        bary = np.array([1.0 - u[r] - v[r], u[r], v[r]])
        point = bary @ mesh.vertices[mesh.triangles[tri[r]]]
        out.append(RayHit(point, int(tri[r]), float(dist[r]), bary))
    return out


def ray_mesh_intersect(mesh: TriangleMesh, origin, direction) -> RayHit | None:
    """Nearest positive-distance intersection of a ray with the mesh, or None."""
    return ray_mesh_intersect_many(mesh, origin, direction)[0]
