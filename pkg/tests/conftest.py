import numpy as np
import pytest

from licp import kernels
from licp.mesh import TriangleMesh
from licp.synthetic import icosphere, make_registration_fixture


def regular_tetrahedron():
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    f = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return TriangleMesh(v, f)


def flat_grid(n=6, size=1.0):
    xs = np.linspace(0, size, n)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    v = np.column_stack([X.ravel(), Y.ravel(), np.zeros(n * n)])
    f = []
    for i in range(n - 1):
        for j in range(n - 1):
            a, b, c, d = i * n + j, (i + 1) * n + j, (i + 1) * n + j + 1, i * n + j + 1
            f += [[a, b, c], [a, c, d]]
    return TriangleMesh(v, np.array(f))


def cube_with_face_centres():
    """Unit cube: 8 corners plus one centre vertex per face, 4 triangles per face."""
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    verts = list(corners)
    tris = []
    for axis in range(3):
        for side in (0, 1):
            quad = [i for i in range(8) if corners[i, axis] == side]
            c = corners[quad].mean(0)
            ci = len(verts)
            verts.append(c)
            # order the 4 corners around the face centre
            u, w = [a for a in range(3) if a != axis]
            ang = [np.arctan2(corners[q, w] - c[w], corners[q, u] - c[u]) for q in quad]
            ring = [quad[k] for k in np.argsort(ang)]
            normal = np.zeros(3)
            normal[axis] = 1.0 if side == 1 else -1.0
            for k in range(4):
                a, b = ring[k], ring[(k + 1) % 4]
                n = np.cross(corners[a] - c, corners[b] - c)
                tris.append([ci, a, b] if n @ normal > 0 else [ci, b, a])
    return TriangleMesh(np.array(verts), np.array(tris))


@pytest.fixture
def tetra():
    return regular_tetrahedron()


@pytest.fixture(scope="session")
def sphere3():
    return icosphere(3, 1.0)


@pytest.fixture(scope="session")
def small_fixture():
    return make_registration_fixture(template_subdiv=3, data_subdiv=4)


@pytest.fixture(params=["numba", "numpy"])
def kernel_path(request, monkeypatch):
    """Run a test once through each kernel implementation."""
    for name in ("triangle_cotangents", "vertex_normal_sums", "ray_first_hits"):
        monkeypatch.setattr(kernels, name, getattr(kernels, f"{name}_{request.param}"))
    return request.param


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[k])
