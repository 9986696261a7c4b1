"""Hot inner loops, each in a numba flavour and a pure-numpy flavour.

The public names (``triangle_cotangents``, ``vertex_normal_sums``,
``ray_first_hits``) dispatch to the numba versions unless numba is missing
or ``LICP_DISABLE_NUMBA`` is set. Both flavours are importable directly so
tests and ``benchmarks/bench_kernels.py`` can compare them.
"""
import numpy as np

from ._accel import USE_NUMBA, njit, prange

# barycentric slack so rays through a shared edge hit both triangles
BARY_EPS = 1e-12
# relative distance window inside which two hits count as a tie
TIE_RTOL = 1e-9
# hits remembered per ray before falling back to a rescan
_HIT_BUF = 64


# --------------------------------------------------------------------------
# cotangents of triangle corner angles
# --------------------------------------------------------------------------

def triangle_cotangents_numpy(vertices, triangles):
    """Cotangent of each corner angle and twice the triangle area.

    Corner ``k`` of triangle ``f`` is the angle at ``f[k]``, i.e. the angle
    opposite edge ``(f[k+1], f[k+2])``.
    """
    v = vertices[triangles]  # (M, 3, 3)
    cot = np.empty(triangles.shape, dtype=np.float64)
    dbl_area = None
    for k in range(3):
        a = v[:, (k + 1) % 3] - v[:, k]
        b = v[:, (k + 2) % 3] - v[:, k]
        cr = np.linalg.norm(np.cross(a, b), axis=1)
        if dbl_area is None:
            dbl_area = cr
        with np.errstate(divide="ignore", invalid="ignore"):
            cot[:, k] = np.einsum("ij,ij->i", a, b) / cr
    return cot, dbl_area


@njit(cache=True)
def triangle_cotangents_numba(vertices, triangles):
    m = triangles.shape[0]
    cot = np.empty((m, 3))
    dbl_area = np.empty(m)
    for f in range(m):
        for k in range(3):
            i0 = triangles[f, k]
            i1 = triangles[f, (k + 1) % 3]
            i2 = triangles[f, (k + 2) % 3]
            ax = vertices[i1, 0] - vertices[i0, 0]
            ay = vertices[i1, 1] - vertices[i0, 1]
            az = vertices[i1, 2] - vertices[i0, 2]
            bx = vertices[i2, 0] - vertices[i0, 0]
            by = vertices[i2, 1] - vertices[i0, 1]
            bz = vertices[i2, 2] - vertices[i0, 2]
            cx = ay * bz - az * by
            cy = az * bx - ax * bz
            cz = ax * by - ay * bx
            cr = np.sqrt(cx * cx + cy * cy + cz * cz)
            if k == 0:
                dbl_area[f] = cr
            dot = ax * bx + ay * by + az * bz
            if cr == 0.0:
                cot[f, k] = np.inf if dot >= 0.0 else -np.inf
            else:
                cot[f, k] = dot / cr
    return cot, dbl_area


# --------------------------------------------------------------------------
# area-weighted vertex normal accumulation
# --------------------------------------------------------------------------

def vertex_normal_sums_numpy(vertices, triangles, n_vertices):
    v = vertices[triangles]
    fn = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])  # |fn| = 2 * area
    acc = np.zeros((n_vertices, 3))
    for k in range(3):
        np.add.at(acc, triangles[:, k], fn)
    return acc


@njit(cache=True)
def vertex_normal_sums_numba(vertices, triangles, n_vertices):
    acc = np.zeros((n_vertices, 3))
    for f in range(triangles.shape[0]):
        a = triangles[f, 0]
        b = triangles[f, 1]
        c = triangles[f, 2]
        ux = vertices[b, 0] - vertices[a, 0]
        uy = vertices[b, 1] - vertices[a, 1]
        uz = vertices[b, 2] - vertices[a, 2]
        wx = vertices[c, 0] - vertices[a, 0]
        wy = vertices[c, 1] - vertices[a, 1]
        wz = vertices[c, 2] - vertices[a, 2]
        nx = uy * wz - uz * wy
        ny = uz * wx - ux * wz
        nz = ux * wy - uy * wx
        for i in (a, b, c):
            acc[i, 0] += nx
            acc[i, 1] += ny
            acc[i, 2] += nz
    return acc


# --------------------------------------------------------------------------
# ray / triangle-soup first hit (Moller-Trumbore, inclusive edges)
# --------------------------------------------------------------------------

def ray_first_hits_numpy(origins, directions, vertices, triangles):
    """First positive-distance hit of every ray.

    Returns ``(tri, dist, u, v)``; ``tri`` is -1 on a miss. Among hits whose
    distances agree within ``TIE_RTOL`` the lowest triangle index wins.
    """
    p0 = vertices[triangles[:, 0]]
    e1 = vertices[triangles[:, 1]] - p0
    e2 = vertices[triangles[:, 2]] - p0
    n_rays = origins.shape[0]
    tri = np.full(n_rays, -1, dtype=np.int64)
    dist = np.full(n_rays, np.inf)
    bu = np.zeros(n_rays)
    bv = np.zeros(n_rays)
    for r in range(n_rays):
        d = directions[r]
        pvec = np.cross(d, e2)
        det = np.einsum("ij,ij->i", e1, pvec)
        ok = np.abs(det) > 1e-300
        inv = np.zeros_like(det)
        inv[ok] = 1.0 / det[ok]
        tvec = origins[r] - p0
        u = np.einsum("ij,ij->i", tvec, pvec) * inv
        qvec = np.cross(tvec, e1)
        v = (qvec @ d) * inv
        t = np.einsum("ij,ij->i", e2, qvec) * inv
        hit = ok & (u >= -BARY_EPS) & (v >= -BARY_EPS) & (u + v <= 1.0 + BARY_EPS) & (t > 0.0)
        if not hit.any():
            continue
        idx = np.flatnonzero(hit)
        tmin = t[idx].min()
        best = idx[t[idx] <= tmin + TIE_RTOL * max(1.0, tmin)][0]
        tri[r] = best
        dist[r] = t[best]
        bu[r] = u[best]
        bv[r] = v[best]
    return tri, dist, bu, bv


@njit(cache=True)
def _ray_triangle(o, d, p0, e1, e2, f):
    """Moller-Trumbore for one ray and triangle ``f``; ``t <= 0`` means no hit."""
    e1x, e1y, e1z = e1[f, 0], e1[f, 1], e1[f, 2]
    e2x, e2y, e2z = e2[f, 0], e2[f, 1], e2[f, 2]
    px = d[1] * e2z - d[2] * e2y
    py = d[2] * e2x - d[0] * e2z
    pz = d[0] * e2y - d[1] * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) <= 1e-300:
        return -1.0, 0.0, 0.0
    inv = 1.0 / det
    tx = o[0] - p0[f, 0]
    ty = o[1] - p0[f, 1]
    tz = o[2] - p0[f, 2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < -BARY_EPS or u > 1.0 + BARY_EPS:
        return -1.0, 0.0, 0.0
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (d[0] * qx + d[1] * qy + d[2] * qz) * inv
    if v < -BARY_EPS or u + v > 1.0 + BARY_EPS:
        return -1.0, 0.0, 0.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    return t, u, v


@njit(cache=True, parallel=True)
def ray_first_hits_numba(origins, directions, vertices, triangles):
    n_rays = origins.shape[0]
    m = triangles.shape[0]
    p0 = np.empty((m, 3))
    e1 = np.empty((m, 3))
    e2 = np.empty((m, 3))
    for f in range(m):
        for k in range(3):
            a = vertices[triangles[f, 0], k]
            p0[f, k] = a
            e1[f, k] = vertices[triangles[f, 1], k] - a
            e2[f, k] = vertices[triangles[f, 2], k] - a
    tri = np.full(n_rays, -1, dtype=np.int64)
    dist = np.full(n_rays, np.inf)
    bu = np.zeros(n_rays)
    bv = np.zeros(n_rays)
    # rays are independent, so the parallel loop gives the serial answer
    for r in prange(n_rays):
        o = origins[r]
        d = directions[r]
        # hits are few per ray; keep them so the tie-break needs no second scan
        hf = np.empty(_HIT_BUF, dtype=np.int64)
        ht = np.empty(_HIT_BUF)
        hu = np.empty(_HIT_BUF)
        hv = np.empty(_HIT_BUF)
        nh = 0
        tmin = np.inf
        for f in range(m):
            t, u, v = _ray_triangle(o, d, p0, e1, e2, f)
            if t > 0.0:
                if nh < _HIT_BUF:
                    hf[nh] = f
                    ht[nh] = t
                    hu[nh] = u
                    hv[nh] = v
                nh += 1
                if t < tmin:
                    tmin = t
        if nh == 0:
            continue
        window = tmin + TIE_RTOL * max(1.0, tmin)
        if nh <= _HIT_BUF:
            # hits were recorded in ascending triangle order
            for k in range(nh):
                if ht[k] <= window:
                    tri[r] = hf[k]
                    dist[r] = ht[k]
                    bu[r] = hu[k]
                    bv[r] = hv[k]
                    break
        else:
            for f in range(m):
                t, u, v = _ray_triangle(o, d, p0, e1, e2, f)
                if t > 0.0 and t <= window:
                    tri[r] = f
                    dist[r] = t
                    bu[r] = u
                    bv[r] = v
                    break
    return tri, dist, bu, bv


if USE_NUMBA:
    triangle_cotangents = triangle_cotangents_numba
    vertex_normal_sums = vertex_normal_sums_numba
    ray_first_hits = ray_first_hits_numba
else:
    triangle_cotangents = triangle_cotangents_numpy
    vertex_normal_sums = vertex_normal_sums_numpy
    ray_first_hits = ray_first_hits_numpy
