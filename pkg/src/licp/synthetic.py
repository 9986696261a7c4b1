"""Synthetic meshes and a head-like registration fixture.

The fixture is a sphere template registered to a higher-resolution sphere
that was scaled anisotropically, bent, jittered and rigidly moved. The twelve
icosahedron corners serve as landmarks (6 "face", 3 + 3 "ear"), vertices
near the ``x = 0`` plane as the symmetry contour, and everything else as the
dense region.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .correspond import CorrespondenceSet, build_correspondence_sets
from .mesh import TriangleMesh

_PHI = (1.0 + 5.0 ** 0.5) / 2.0


def icosahedron(radius: float = 1.0) -> TriangleMesh:
    v = np.array([
        [-1, _PHI, 0], [1, _PHI, 0], [-1, -_PHI, 0], [1, -_PHI, 0],
        [0, -1, _PHI], [0, 1, _PHI], [0, -1, -_PHI], [0, 1, -_PHI],
        [_PHI, 0, -1], [_PHI, 0, 1], [-_PHI, 0, -1], [-_PHI, 0, 1],
    ], dtype=np.float64)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    v *= radius / np.linalg.norm(v, axis=1, keepdims=True)
    return TriangleMesh(v, f)


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriangleMesh:
    """Loop-style midpoint subdivision of the icosahedron, projected to the sphere.

    Vertex count is ``10 * 4**subdivisions + 2``; the first 12 vertices are
    always the icosahedron corners.
    """
    base = icosahedron(1.0)
    v, f = base.vertices.copy(), base.triangles.copy()
    for _ in range(subdivisions):
        edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        edges.sort(axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        inv = inv.ravel()
        mid = v[uniq[:, 0]] + v[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m = len(f)
        a = inv[:m] + len(v)
        b = inv[m:2 * m] + len(v)
        c = inv[2 * m:] + len(v)
        v = np.vstack([v, mid])
        f = np.concatenate([
            np.column_stack([f[:, 0], a, c]),
            np.column_stack([f[:, 1], b, a]),
            np.column_stack([f[:, 2], c, b]),
            np.column_stack([a, b, c]),
        ])
    return TriangleMesh(v * radius, f)


def bend_and_scale(points, scale=(1.25, 0.85, 1.10), bend=0.0015):
    """Anisotropic scale then ``z += bend * x**2`` (mirror-symmetric in x)."""
    p = np.asarray(points, dtype=np.float64) * np.asarray(scale)
    p[:, 2] += bend * p[:, 0] ** 2
    return p


HEAD_SET_SPECS = {
    "face": {"weight": 1.5, "pairing": "fixed"},
    "ear_left": {"weight": 1.0, "pairing": "fixed"},
    "ear_right": {"weight": 1.0, "pairing": "fixed"},
    "symmetry": {"weight": 1.4, "pairing": "mnn"},
    "region": {"weight": 1.0, "pairing": "mnn", "complement": True},
}


@dataclass
class RegistrationFixture:
    template: TriangleMesh
    data: TriangleMesh
    sets: dict[str, CorrespondenceSet]
    set_entries: list[dict]
    pose_rotation: np.ndarray
    pose_translation: np.ndarray


def make_registration_fixture(template_subdiv: int = 4, data_subdiv: int = 5, radius: float = 100.0,
                              noise: float = 0.005, seed: int = 0) -> RegistrationFixture:
    """Build the synthetic template/data pair and its correspondence sets.

    ``noise`` is the per-coordinate Gaussian sigma as a fraction of the
    deformed target's bounding-box diagonal.
    """
    rng = np.random.default_rng(seed)
    template = icosphere(template_subdiv, radius)
    sphere = icosphere(data_subdiv, radius)
    deformed = bend_and_scale(sphere.vertices)
    diag = float(np.linalg.norm(deformed.max(0) - deformed.min(0)))
    deformed = deformed + rng.normal(scale=noise * diag, size=deformed.shape)
    rot = Rotation.from_rotvec(np.deg2rad(25.0) * np.array([1.0, 2.0, 3.0]) / np.sqrt(14.0)).as_matrix()
    shift = np.array([30.0, -20.0, 15.0])
    data = TriangleMesh(deformed @ rot.T + shift, sphere.triangles)

    # icosahedron corners are vertices 0..11 of both spheres
    lm = np.arange(12)
    face, ear_l, ear_r = lm[:6], lm[6:9], lm[9:12]

    def near_plane(mesh_on_sphere: TriangleMesh):
        e = mesh_on_sphere.edges
        h = np.linalg.norm(mesh_on_sphere.vertices[e[:, 0]] - mesh_on_sphere.vertices[e[:, 1]], axis=1).mean()
        idx = np.flatnonzero(np.abs(mesh_on_sphere.vertices[:, 0]) < 0.5 * h)
        return np.setdiff1d(idx, lm)

    entries = [
        {"name": "face", "pairing": "fixed", "template": face.tolist(), "data": face.tolist()},
        {"name": "ear_left", "pairing": "fixed", "template": ear_l.tolist(), "data": ear_l.tolist(),
         "residuals": rng.uniform(0.5, 3.0, 3).tolist()},
        {"name": "ear_right", "pairing": "fixed", "template": ear_r.tolist(), "data": ear_r.tolist(),
         "residuals": rng.uniform(0.5, 3.0, 3).tolist()},
        {"name": "symmetry", "pairing": "mnn", "template": near_plane(template).tolist(),
         "data": near_plane(sphere).tolist()},
        {"name": "region", "pairing": "mnn", "template": "complement", "data": "complement"},
    ]
    sets = build_correspondence_sets(entries, template, data, HEAD_SET_SPECS)
    return RegistrationFixture(template, data, sets, entries, rot, shift)


def look_at_camera(eye, target, focal=800.0, principal=(320.0, 240.0)):
    """3x4 pinhole projection ``K [R | -R eye]`` looking from ``eye`` at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.vstack([x, y, z])
    K = np.array([[focal, 0.0, principal[0]], [0.0, focal, principal[1]], [0.0, 0.0, 1.0]])
    return K @ np.hstack([R, (-R @ eye)[:, None]])


def project_points(P, points):
    h = np.hstack([points, np.ones((len(points), 1))]) @ np.asarray(P).T
    return h[:, :2] / h[:, 2:3]


# annotation labels and the landmark each contour is drawn around
_DEMO_CONTOURS = {"eyes": 0, "mouth": 3, "nose": 5, "ears": 9}


def write_demo_corpus(directory, n_subjects: int = 2, template_subdiv: int = 3, data_subdiv: int = 4,
                      seed: int = 0):
    """Write a small synthetic corpus and its run manifest; returns the manifest path.

    Every subject gets a scan, a landmark file and an annotation file with
    one 2D contour (seen by a left camera) and 3D contours for the rest.
    """
    import json
    from pathlib import Path

    from .io import write_ply

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    subjects = []
    template = None
    for k in range(n_subjects):
        fx = make_registration_fixture(template_subdiv, data_subdiv, seed=seed + k)
        template = fx.template
        sid = f"s{k:03d}"
        write_ply(d / f"{sid}.ply", fx.data)
        (d / f"{sid}_sets.json").write_text(json.dumps({"sets": fx.set_entries}))
        Y = fx.data.vertices
        centre = Y.mean(0)
        items = []
        for label, lm in _DEMO_CONTOURS.items():
            dist = np.linalg.norm(Y - Y[lm], axis=1)
            ring = np.flatnonzero(dist < 0.12 * fx.data.bbox_diagonal())[:12]
            items.append({"label": label, "points": Y[ring].tolist()})
        # the eye contour is given as pixels of a camera facing the eye landmark
        eye_pts = np.asarray(items[0]["points"])
        P = look_at_camera(centre + 3.0 * (Y[_DEMO_CONTOURS["eyes"]] - centre), centre)
        items[0] = {"label": "eyes", "camera": "left", "points": project_points(P, eye_pts).tolist()}
        ann = {"subject_id": sid, "cameras": {"left": P.tolist()}, "items": items}
        (d / f"{sid}_ann.json").write_text(json.dumps(ann))
        subjects.append({"id": sid, "scan": f"{sid}.ply", "landmarks": f"{sid}_sets.json",
                         "annotations": f"{sid}_ann.json"})
    write_ply(d / "template.ply", template)
    manifest = {"template": "template.ply", "output_dir": "out", "subjects": subjects}
    path = d / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path
