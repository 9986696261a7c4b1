"""Annotation-transfer evaluation.

Manually placed contour points on each scan (2D pixels seen by a calibrated
camera, or 3D surface points) are carried onto the scan surface, then snapped
to the nearest vertex of the registered template. Tallying which template
vertices receive which labels across a corpus gives two scores:

density
    mean fraction of subjects that hit each touched vertex (1 means every
    subject's annotation landed on the same vertices).
homogeneity
    prevalence-weighted purity of the labels landing on each vertex (1 means
    no two labels share a vertex).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .io import atomic_write, write_ply
from .mesh import SpatialIndex, TriangleMesh, ray_mesh_intersect_many

DEFAULT_LABELS = ("eyes", "eyelids", "mouth", "nose", "nasolabial_folds", "ears")
RAMP_LOW = (0, 0, 139)  # dark blue
RAMP_HIGH = (255, 255, 0)  # yellow


class AnnotationError(ValueError):
    pass


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------- annotation files

@dataclass
class AnnotationItem:
    label: str
    points: np.ndarray  # (K, 2) pixels or (K, 3) surface points
    camera: str | None = None

    @property
    def is_2d(self) -> bool:
        return self.points.shape[1] == 2


@dataclass
class AnnotationSet:
    """All annotations of one subject.

    ``cameras`` maps a camera name (``left``/``right``) to its 3x4 projection
    matrix ``P = K [R | t]`` taking homogeneous world points to pixels.
    """

    subject_id: str
    items: list[AnnotationItem] = field(default_factory=list)
    cameras: dict[str, np.ndarray] = field(default_factory=dict)

    def validate(self, vocabulary=None):
        vocab = set(vocabulary) if vocabulary is not None else None
        for it in self.items:
            if len(it.points) == 0:
                raise AnnotationError(f"{self.subject_id}: item {it.label!r} has no points")
            if it.points.ndim != 2 or it.points.shape[1] not in (2, 3):
                raise AnnotationError(f"{self.subject_id}: item {it.label!r} points must be (K, 2) or (K, 3)")
            if vocab is not None and it.label not in vocab:
                raise AnnotationError(f"{self.subject_id}: label {it.label!r} not in vocabulary")
            if it.is_2d:
                if it.camera is None:
                    raise AnnotationError(f"{self.subject_id}: 2D item {it.label!r} needs a camera")
                if it.camera not in self.cameras:
                    raise AnnotationError(f"{self.subject_id}: unknown camera {it.camera!r}")
        for name, P in self.cameras.items():
            if P.shape != (3, 4):
                raise AnnotationError(f"{self.subject_id}: camera {name!r} must be 3x4")


def parse_annotation_set(doc: dict, vocabulary=None) -> AnnotationSet:
    """Build an :class:`AnnotationSet` from its JSON form.

    Layout::

        {"subject_id": "s001",
         "cameras": {"left": [[...4], [...4], [...4]], "right": ...},
         "items": [{"label": "mouth", "camera": "left", "points": [[u, v], ...]},
                   {"label": "nose", "points": [[x, y, z], ...]}]}

    Labels are checked against ``vocabulary``, else the file's own
    ``"vocabulary"`` list, else :data:`DEFAULT_LABELS`.
    """
    cams = {k: np.asarray(v, dtype=np.float64) for k, v in (doc.get("cameras") or {}).items()}
    items = []
    for it in doc.get("items", []):
        pts = np.asarray(it.get("points", []), dtype=np.float64)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 2) if pts.size == 2 else pts.reshape(-1, 3) if pts.size == 3 else pts.reshape(0, 3)
        items.append(AnnotationItem(str(it["label"]), pts, it.get("camera")))
    ann = AnnotationSet(str(doc.get("subject_id", "")), items, cams)
    if vocabulary is None:
        vocabulary = doc.get("vocabulary", DEFAULT_LABELS)
    ann.validate(vocabulary)
    return ann


def load_annotation_set(path, vocabulary=None) -> AnnotationSet:
    return parse_annotation_set(json.loads(Path(path).read_text()), vocabulary)


# ---------------------------------------------------------------- projection

def camera_rays(P, pixels):
    """Back-project pixels through a 3x4 camera into world rays.

    Returns ``(centre, directions)``. With ``P = [M | p4]`` the centre is
    ``-M^-1 p4`` and a pixel ``(u, v)`` looks along ``sign(det M) M^-1 (u, v, 1)``,
    which points in front of the camera.
    """
    P = np.asarray(P, dtype=np.float64)
    M, p4 = P[:, :3], P[:, 3]
    det = np.linalg.det(M)
    if not np.isfinite(det) or abs(det) <= 1e-12 * max(np.linalg.norm(M), 1e-300) ** 3:
        raise AnnotationError("singular camera matrix")
    Minv = np.linalg.inv(M)
    centre = -Minv @ p4
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    h = np.hstack([px, np.ones((len(px), 1))])
    d = np.sign(det) * (h @ Minv.T)
    return centre, d / np.linalg.norm(d, axis=1, keepdims=True)


class ProjectedPoint(NamedTuple):
    label: str
    point: np.ndarray
    triangle: int  # -1 for 3D items
    barycentric: np.ndarray | None


class Projection(NamedTuple):
    points: list[ProjectedPoint]
    misses: int


def project_annotations(ann: AnnotationSet, target: TriangleMesh) -> Projection:
    """Carry every annotation onto the target surface.

    2D items become camera rays intersected with ``target``; rays that miss
    are dropped and counted. 3D items pass through unchanged.
    """
    out, misses = [], 0
    for it in ann.items:
        if not it.is_2d:
            out.extend(ProjectedPoint(it.label, p.copy(), -1, None) for p in it.points)
            continue
        centre, dirs = camera_rays(ann.cameras[it.camera], it.points)
        hits = ray_mesh_intersect_many(target, np.broadcast_to(centre, dirs.shape), dirs)
        for h in hits:
            if h is None:
                misses += 1
            else:
                out.append(ProjectedPoint(it.label, h.point, h.triangle, h.barycentric))
    return Projection(out, misses)


def rigid_between(src, dst):
    """Least-squares rotation and translation with ``dst ~= src @ R.T + t``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    cs, cd = src.mean(0), dst.mean(0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, cd - cs @ R.T


def reposition_projection(proj: Projection, original: TriangleMesh, moved: TriangleMesh) -> Projection:
    """Move projected points from ``original`` onto ``moved`` (same connectivity).

    Surface hits keep their triangle and barycentric coordinates. 3D
    pass-through points follow the rigid motion fitted between the two
    vertex sets.
    """
    if original.n_vertices != moved.n_vertices:
        raise AnnotationError("original and moved meshes differ in vertex count")
    R = t = None
    out = []
    for p in proj.points:
        if p.triangle >= 0:
            pt = p.barycentric @ moved.vertices[moved.triangles[p.triangle]]
        else:
            if R is None:
                R, t = rigid_between(original.vertices, moved.vertices)
            pt = p.point @ R.T + t
        out.append(p._replace(point=pt))
    return Projection(out, proj.misses)


# ---------------------------------------------------------------- tallies

@dataclass
class TransferTally:
    """Per-vertex, per-label transfer counts over a set of subjects.

    ``counts[v, i]`` is the number of subjects whose label ``labels[i]`` landed
    on template vertex ``v``.
    """

    labels: tuple[str, ...]
    counts: np.ndarray
    n_subjects: int

    def __post_init__(self):
        self.labels = tuple(self.labels)
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim == 1:
            c = c[:, None]
        if c.ndim != 2 or c.shape[1] != len(self.labels):
            raise MetricError(f"counts shape {c.shape} does not match {len(self.labels)} labels")
        self.counts = c
        if len(set(self.labels)) != len(self.labels):
            raise MetricError("duplicate labels in tally")

    @classmethod
    def empty(cls, n_vertices: int, labels=()):
        return cls(tuple(labels), np.zeros((n_vertices, len(labels)), dtype=np.int64), 0)

    @property
    def n_vertices(self) -> int:
        return self.counts.shape[0]

    @property
    def totals(self) -> np.ndarray:
        """``t_v``: summed label counts per vertex."""
        return self.counts.sum(axis=1)

    def label_counts(self, label: str) -> np.ndarray:
        return self.counts[:, self.labels.index(label)]

    def merge(self, other: "TransferTally") -> "TransferTally":
        if other.n_vertices != self.n_vertices:
            raise MetricError("cannot merge tallies over different vertex counts")
        labels = tuple(sorted(set(self.labels) | set(other.labels)))
        counts = np.zeros((self.n_vertices, len(labels)), dtype=np.int64)
        for src in (self, other):
            for j, lab in enumerate(src.labels):
                counts[:, labels.index(lab)] += src.counts[:, j]
        return TransferTally(labels, counts, self.n_subjects + other.n_subjects)


def merge_tallies(fragments, n_vertices: int | None = None) -> TransferTally:
    fragments = list(fragments)
    if not fragments:
        if n_vertices is None:
            raise MetricError("nothing to merge")
        return TransferTally.empty(n_vertices)
    return reduce(TransferTally.merge, fragments)


def transfer_to_template(points, registered_template: TriangleMesh, index: SpatialIndex | None = None
                         ) -> TransferTally:
    """One subject's tally fragment.

    ``points`` is an iterable of ``(label, xyz)``; each snaps to its nearest
    template vertex. Several points of the same label on the same vertex count
    once.
    """
    pts = [(str(lab), np.asarray(p, dtype=np.float64)) for lab, p, *_ in points]
    n = registered_template.n_vertices
    if not pts:
        return TransferTally((), np.zeros((n, 0), dtype=np.int64), 1)
    labels = tuple(sorted({lab for lab, _ in pts}))
    if index is None:
        index = registered_template.spatial_index()
    _, vid = index.query(np.array([p for _, p in pts]))
    lab_idx = np.array([labels.index(lab) for lab, _ in pts])
    counts = np.zeros((n, len(labels)), dtype=np.int64)
    counts[vid, lab_idx] = 1  # repeated (vertex, label) hits collapse to one
    return TransferTally(labels, counts, 1)


# ---------------------------------------------------------------- metrics

def density(tally: TransferTally) -> float:
    """Mean transfer density over the touched vertices.

    ``sum(t_v) / (n_subjects * n_touched)`` over vertices with ``t_v >= 1``.
    """
    if tally.n_subjects < 1:
        raise MetricError("density needs at least one subject")
    t = tally.totals
    touched = t >= 1
    if not touched.any():
        raise MetricError("density is undefined: no vertex received a transfer")
    return float(t[touched].sum() / (tally.n_subjects * touched.sum()))


class Homogeneity(NamedTuple):
    mean: float
    per_label: dict[str, float]
    weights: dict[str, float]


def homogeneity(tally: TransferTally) -> Homogeneity:
    """Prevalence-weighted label purity.

    For label ``i`` with touched vertices ``V_i``::

        h_i = sum_{V_i} t_{v,i} / sum_{V_i} t_v
        w_i = sum_{V_i} t_{v,i} / sum_j sum_{V_j} t_{v,j}

    and the mean is ``sum_i w_i h_i``. Labels with no transfers are left out.
    """
    c = tally.counts
    if c.size == 0 or c.sum() == 0:
        raise MetricError("homogeneity is undefined for an empty tally")
    t = c.sum(axis=1)
    own = c.sum(axis=0).astype(np.float64)
    present = own > 0
    total = own[present].sum()
    per, wts = {}, {}
    for i, lab in enumerate(tally.labels):
        if not present[i]:
            continue
        on = c[:, i] > 0
        per[lab] = float(own[i] / t[on].sum())
        wts[lab] = float(own[i] / total)
    mean = float(sum(wts[k] * per[k] for k in per))
    return Homogeneity(mean, per, wts)


def metric_report(tally: TransferTally, misses: dict | None = None) -> dict:
    """Machine-readable summary of a corpus tally."""
    h = homogeneity(tally)
    return {
        "density": density(tally),
        "homogeneity": h.mean,
        "per_label": {lab: {"homogeneity": h.per_label[lab], "weight": h.weights[lab]} for lab in h.per_label},
        "n_subjects": tally.n_subjects,
        "n_touched_vertices": int((tally.totals >= 1).sum()),
        "n_template_vertices": tally.n_vertices,
        "misses": dict(misses or {}),
    }


def write_metric_report(path, report: dict):
    with atomic_write(path) as fh:
        json.dump(report, fh, indent=2)


# ---------------------------------------------------------------- colour map

def density_colors(totals, low=RAMP_LOW, high=RAMP_HIGH) -> np.ndarray:
    """Linear ramp from ``low`` (zero transfers) to ``high`` (max count), as uchar RGB."""
    t = np.asarray(totals, dtype=np.float64)
    lo, hi = np.asarray(low, dtype=np.float64), np.asarray(high, dtype=np.float64)
    peak = t.max() if t.size else 0.0
    s = t / peak if peak > 0 else np.zeros_like(t)
    return np.rint(lo + s[:, None] * (hi - lo)).astype(np.uint8)


def export_density_colormap(tally: TransferTally, template: TriangleMesh, path=None,
                            low=RAMP_LOW, high=RAMP_HIGH) -> np.ndarray:
    """Colour the template by transfer count; writes a PLY when ``path`` is given."""
    if tally.n_vertices != template.n_vertices:
        raise MetricError(f"tally has {tally.n_vertices} vertices, template {template.n_vertices}")
    colors = density_colors(tally.totals, low, high)
    if path is not None:
        write_ply(path, template, colors=colors, binary=True)
    return colors
