"""Correspondence sets and per-iteration matching.

A correspondence set pairs a subset of template vertices with a subset of
data vertices. Matching never leaves those subsets. Three strategies:

``fixed``
    k-th template member pairs with the k-th data member (landmarks).
``mnn``
    mutual nearest neighbours, optionally over ``[p | w * n]``.
``normal_shoot``
    MNN pairs whose target is moved onto the template vertex's normal line.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh import SpatialIndex, TriangleMesh

PAIRINGS = ("fixed", "mnn", "normal_shoot")
# |(y - x).n| above this multiple of |y - x| only happens for non-unit normals
SHOOT_CAP = 3.0


class CorrespondenceError(ValueError):
    pass


@dataclass
class CorrespondenceSet:
    name: str
    template_members: np.ndarray
    data_members: np.ndarray
    weight: float = 1.0
    pairing: str = "mnn"
    per_pair_weights: np.ndarray | None = None

    def __post_init__(self):
        self.template_members = np.asarray(self.template_members, dtype=np.int64).ravel()
        self.data_members = np.asarray(self.data_members, dtype=np.int64).ravel()
        if self.pairing not in PAIRINGS:
            raise CorrespondenceError(f"set {self.name!r}: unknown pairing {self.pairing!r}")
        if not self.weight > 0:
            raise CorrespondenceError(f"set {self.name!r}: weight must be > 0")
        for label, m in (("template", self.template_members), ("data", self.data_members)):
            if len(np.unique(m)) != len(m):
                raise CorrespondenceError(f"set {self.name!r}: duplicate {label} members")
        if self.per_pair_weights is not None:
            w = np.asarray(self.per_pair_weights, dtype=np.float64).ravel()
            if len(w) != len(self.template_members):
                raise CorrespondenceError(f"set {self.name!r}: per_pair_weights length mismatch")
            if np.any(w <= 0) or np.any(w > 1):
                raise CorrespondenceError(f"set {self.name!r}: per-pair weights must lie in (0, 1]")
            self.per_pair_weights = w

    def validate(self, n_template: int, n_data: int):
        if self.template_members.size and (self.template_members.min() < 0 or self.template_members.max() >= n_template):
            raise CorrespondenceError(f"set {self.name!r}: template index out of range")
        if self.data_members.size and (self.data_members.min() < 0 or self.data_members.max() >= n_data):
            raise CorrespondenceError(f"set {self.name!r}: data index out of range")
        if self.pairing == "fixed" and len(self.template_members) != len(self.data_members):
            raise CorrespondenceError(
                f"set {self.name!r}: fixed pairing needs equal member counts "
                f"({len(self.template_members)} vs {len(self.data_members)})")


@dataclass
class MatchList:
    set_name: str
    template_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    data_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    targets: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return len(self.template_idx)

    @property
    def pairs(self):
        return [(int(t), int(d), self.targets[k], float(self.weights[k]))
                for k, (t, d) in enumerate(zip(self.template_idx, self.data_idx))]


def ear_landmark_weights(residuals) -> np.ndarray:
    """Down-weight landmarks with larger 2D-to-3D snapping residuals: 1 / (1 + r / mean(r))."""
    r = np.asarray(residuals, dtype=np.float64)
    mean = r.mean() if r.size else 0.0
    if mean <= 0:
        return np.ones_like(r)
    return 1.0 / (1.0 + r / mean)


def match_fixed(cset: CorrespondenceSet, template: TriangleMesh, data: TriangleMesh) -> MatchList:
    if len(cset.template_members) != len(cset.data_members):
        raise CorrespondenceError(f"set {cset.name!r}: fixed pairing needs equal member counts")
    w = np.full(len(cset.template_members), cset.weight)
    if cset.per_pair_weights is not None:
        w = w * cset.per_pair_weights
    return MatchList(cset.name, cset.template_members.copy(), cset.data_members.copy(),
                     data.vertices[cset.data_members].copy(), w)


def mutual_nearest(template_pts, data_pts, template_nrm=None, data_nrm=None, normal_weight=0.0,
                   data_index: SpatialIndex | None = None):
    """Indices ``(ti, di)`` into the two point arrays that are mutual 1-NN."""
    if len(template_pts) == 0 or len(data_pts) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    use_n = normal_weight > 0
    tn = template_nrm if use_n else None
    if data_index is None:
        data_index = SpatialIndex(data_pts, data_nrm if use_n else None, normal_weight)
    _, t2d = data_index.query(template_pts, tn)
    # only data points that are somebody's nearest can be mutual
    cand = np.unique(t2d)
    tmpl_index = SpatialIndex(template_pts, tn, normal_weight)
    _, back = tmpl_index.query(data_pts[cand], None if data_nrm is None or not use_n else data_nrm[cand])
    d2t = np.full(len(data_pts), -1, dtype=np.int64)
    d2t[cand] = back
    ti = np.flatnonzero(d2t[t2d] == np.arange(len(template_pts)))
    return ti, t2d[ti]


def match_mnn(cset: CorrespondenceSet, template: TriangleMesh, data: TriangleMesh,
              normal_weight: float = 0.0) -> MatchList:
    tm, dm = cset.template_members, cset.data_members
    if len(tm) == 0 or len(dm) == 0:
        return MatchList(cset.name)
    tn = template.normals[tm] if normal_weight > 0 else None
    dn = data.normals[dm] if normal_weight > 0 else None
    ti, di = mutual_nearest(template.vertices[tm], data.vertices[dm], tn, dn, normal_weight,
                            data_index=data.spatial_index(dm, normal_weight))
    w = np.full(len(ti), cset.weight)
    if cset.per_pair_weights is not None:
        w = w * cset.per_pair_weights[ti]
    return MatchList(cset.name, tm[ti], dm[di], data.vertices[dm[di]].copy(), w)


def shoot_targets(x, y, n):
    """Project each correspondence vector ``y - x`` onto the line ``x + s n``."""
    d = y - x
    s = np.einsum("ij,ij->i", d, n)
    target = x + s[:, None] * n
    runaway = np.abs(s) > SHOOT_CAP * np.linalg.norm(d, axis=1)
    target[runaway] = y[runaway]
    return target


def match_normal_shoot(cset: CorrespondenceSet, template: TriangleMesh, data: TriangleMesh,
                       normal_weight: float = 0.0) -> MatchList:
    ml = match_mnn(cset, template, data, normal_weight)
    if len(ml):
        ml.targets = shoot_targets(template.vertices[ml.template_idx], ml.targets,
                                   template.normals[ml.template_idx])
    return ml


def match_set(cset: CorrespondenceSet, template: TriangleMesh, data: TriangleMesh,
              strategy: str = "mnn", normal_weight: float = 0.0) -> MatchList:
    """Match one set under a stage strategy; ``fixed`` sets always keep their pairing."""
    if cset.pairing == "fixed":
        return match_fixed(cset, template, data)
    if strategy == "normal_shoot":
        return match_normal_shoot(cset, template, data, normal_weight)
    if strategy in ("mnn", "fixed-only"):
        return match_mnn(cset, template, data, normal_weight)
    raise CorrespondenceError(f"unknown matching strategy {strategy!r}")


def mean_mnn_distance(template: TriangleMesh, data: TriangleMesh) -> float:
    """Mean distance over the full-mesh mutual-nearest-neighbour pairs."""
    ti, di = mutual_nearest(template.vertices, data.vertices)
    if len(ti) == 0:
        return float("nan")
    return float(np.linalg.norm(template.vertices[ti] - data.vertices[di], axis=1).mean())


# ---------------------------------------------------------------- landmark files

def _snap(points, data: TriangleMesh):
    _, idx = SpatialIndex(data.vertices).query(np.asarray(points, dtype=np.float64))
    return idx


def complement_members(n: int, taken) -> np.ndarray:
    mask = np.ones(n, dtype=bool)
    for m in taken:
        mask[np.asarray(m, dtype=np.int64)] = False
    return np.flatnonzero(mask)


def load_correspondence_sets(path, template: TriangleMesh, data: TriangleMesh,
                             set_specs: dict | None = None) -> dict[str, CorrespondenceSet]:
    """Read a landmark/contour JSON file.

    Layout::

        {"sets": [{"name": "face", "pairing": "fixed",
                   "template": [..], "data": [..] | "data_points": [[x, y, z], ..],
                   "weights": [..] | "residuals": [..], "weight": 1.5},
                  {"name": "region", "pairing": "mnn",
                   "template": "complement", "data": "complement"}]}

    ``set_specs`` (from a pipeline config) supplies weight/pairing defaults and
    may mark a set as the complement of all the others.
    """
    doc = json.loads(Path(path).read_text())
    return build_correspondence_sets(doc.get("sets", []), template, data, set_specs)


def build_correspondence_sets(entries, template: TriangleMesh, data: TriangleMesh,
                              set_specs: dict | None = None) -> dict[str, CorrespondenceSet]:
    set_specs = set_specs or {}
    raw = {e["name"]: dict(e) for e in entries}
    for name, opts in set_specs.items():
        if opts.get("complement") and name not in raw:
            raw[name] = {"name": name, "template": "complement", "data": "complement"}
    resolved_t, resolved_d, deferred = {}, {}, []
    for name, e in raw.items():
        if e.get("template") == "complement" or e.get("data") == "complement":
            deferred.append(name)
            continue
        resolved_t[name] = np.asarray(e.get("template", []), dtype=np.int64)
        if "data_points" in e:
            resolved_d[name] = _snap(e["data_points"], data)
        else:
            resolved_d[name] = np.asarray(e.get("data", []), dtype=np.int64)
    for name in deferred:
        e = raw[name]
        resolved_t[name] = (complement_members(template.n_vertices, resolved_t.values())
                            if e.get("template") == "complement" else np.asarray(e["template"], dtype=np.int64))
        resolved_d[name] = (complement_members(data.n_vertices, [resolved_d[k] for k in resolved_d if k != name])
                            if e.get("data") == "complement" else np.asarray(e["data"], dtype=np.int64))
    out = {}
    for name, e in raw.items():
        opts = set_specs.get(name, {})
        weights = None
        if "weights" in e:
            weights = e["weights"]
        elif "residuals" in e:
            weights = ear_landmark_weights(e["residuals"])
        cset = CorrespondenceSet(
            name=name,
            template_members=resolved_t[name],
            data_members=resolved_d[name],
            weight=float(e.get("weight", opts.get("weight", 1.0))),
            pairing=e.get("pairing", opts.get("pairing", "mnn")),
            per_pair_weights=weights,
        )
        cset.validate(template.n_vertices, data.n_vertices)
        out[name] = cset
    return out


def dump_correspondence_sets(path, sets: dict[str, CorrespondenceSet]):
    from .io import atomic_write

    doc = {"sets": []}
    for s in sets.values():
        e = {"name": s.name, "pairing": s.pairing, "weight": s.weight,
             "template": s.template_members.tolist(), "data": s.data_members.tolist()}
        if s.per_pair_weights is not None:
            e["weights"] = s.per_pair_weights.tolist()
        doc["sets"].append(e)
    with atomic_write(path) as fh:
        json.dump(doc, fh)
