"""Staged coarse-to-fine registration driver."""
from __future__ import annotations

import copy
import json
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .correspond import PAIRINGS, CorrespondenceSet, match_set
from .deform import (
    StiffnessSchedule,
    apply_affine_split,
    evaluate_schedule,
    refine_with_operator_refresh,
    solve_global_affine,
    solve_lb_deformation,
    solve_pvac_deformation,
)
from .mesh import TriangleMesh, cotan_laplacian

MATCHINGS = ("fixed-only", "mnn", "normal_shoot")
DEFORMATIONS = ("affine_oneshot", "affine_iterative", "lb_free", "lb_free_refine", "pvac")
AFFINE_MODELS = ("affine_oneshot", "affine_iterative")
STAGE_FIELDS = ("name", "correspondence_sets", "matching", "metric_normal_weight", "deformation",
                "schedule", "termination", "refine", "gamma")
# nested stage fields merged key by key when inheriting
_NESTED = ("termination", "refine")


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r}: {message}")
        self.stage = stage


@dataclass
class StageConfig:
    name: str
    correspondence_sets: list[str]
    matching: str = "mnn"
    metric_normal_weight: float = 0.0
    deformation: str = "lb_free"
    schedule: StiffnessSchedule | None = None
    t_s: float | None = None
    t_s_rel: float = 1e-4
    i_max: int = 1
    refine_max_inner: int = 10
    refine_tol_rel: float = 1e-4
    gamma: float = 1.0

    def threshold(self, template: TriangleMesh) -> float:
        """Absolute ``|dX|_F^2`` stopping threshold for this stage."""
        if self.t_s is not None:
            return float(self.t_s)
        return self.t_s_rel * template.bbox_diagonal() ** 2

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "correspondence_sets": list(self.correspondence_sets),
            "matching": self.matching,
            "metric_normal_weight": self.metric_normal_weight,
            "deformation": self.deformation,
            "schedule": None if self.schedule is None else {
                "start": self.schedule.start, "end": self.schedule.end, "steps": self.schedule.steps},
            "termination": {"t_s": self.t_s, "t_s_rel": self.t_s_rel, "i_max": self.i_max},
            "refine": {"max_inner": self.refine_max_inner, "tol_rel": self.refine_tol_rel},
            "gamma": self.gamma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        unknown = set(d) - set(STAGE_FIELDS)
        if unknown:
            raise ConfigError(f"unknown stage fields {sorted(unknown)}")
        term = d.get("termination") or {}
        ref = d.get("refine") or {}
        sched = d.get("schedule")
        i_max = int(term.get("i_max", 1))
        if sched is not None:
            sched = StiffnessSchedule(float(sched["start"]), float(sched["end"]),
                                      int(sched.get("steps", i_max)))
        t_s = term.get("t_s")
        if isinstance(t_s, str) and t_s.lower() in ("inf", "infinity"):
            t_s = float("inf")
        st = cls(
            name=d["name"],
            correspondence_sets=list(d.get("correspondence_sets", [])),
            matching=d.get("matching", "mnn"),
            metric_normal_weight=float(d.get("metric_normal_weight", 0.0)),
            deformation=d.get("deformation", "lb_free"),
            schedule=sched,
            t_s=None if t_s is None else float(t_s),
            t_s_rel=float(term.get("t_s_rel", 1e-4)),
            i_max=i_max,
            refine_max_inner=int(ref.get("max_inner", 10)),
            refine_tol_rel=float(ref.get("tol_rel", 1e-4)),
            gamma=float(d.get("gamma", 1.0)),
        )
        st.validate()
        return st

    def validate(self, set_names=None):
        if self.matching not in MATCHINGS:
            raise ConfigError(f"stage {self.name!r}: unknown matching {self.matching!r}")
        if self.deformation not in DEFORMATIONS:
            raise ConfigError(f"stage {self.name!r}: unknown deformation {self.deformation!r}")
        if self.i_max < 1:
            raise ConfigError(f"stage {self.name!r}: i_max must be >= 1")
        if self.deformation == "affine_oneshot" and self.i_max != 1:
            raise ConfigError(f"stage {self.name!r}: affine_oneshot requires i_max = 1")
        if self.metric_normal_weight < 0:
            raise ConfigError(f"stage {self.name!r}: metric_normal_weight must be >= 0")
        if self.t_s is not None and not self.t_s > 0:
            raise ConfigError(f"stage {self.name!r}: t_s must be > 0")
        if self.deformation not in AFFINE_MODELS:
            if self.schedule is None:
                raise ConfigError(f"stage {self.name!r}: {self.deformation} needs a stiffness schedule")
            if self.schedule.steps < self.i_max:
                raise ConfigError(f"stage {self.name!r}: schedule has fewer steps than i_max")
        if not self.correspondence_sets:
            raise ConfigError(f"stage {self.name!r}: no correspondence sets")
        if set_names is not None:
            missing = [s for s in self.correspondence_sets if s not in set_names]
            if missing:
                raise ConfigError(f"stage {self.name!r}: unknown correspondence sets {missing}")


@dataclass
class PipelineConfig:
    stages: list[StageConfig]
    sets: dict[str, dict] = field(default_factory=dict)
    deterministic: bool = True

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("pipeline needs at least one stage")
        for s in self.stages:
            s.validate(self.sets if self.sets else None)
        for name, opts in self.sets.items():
            if opts.get("pairing", "mnn") not in PAIRINGS:
                raise ConfigError(f"set {name!r}: unknown pairing {opts.get('pairing')!r}")

    def to_dict(self) -> dict:
        return {"sets": copy.deepcopy(self.sets), "deterministic": self.deterministic,
                "stages": [s.to_dict() for s in self.stages]}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return cls(stages=[StageConfig.from_dict(s) for s in resolve_stages(d.get("stages", []))],
                   sets=copy.deepcopy(d.get("sets", {})),
                   deterministic=bool(d.get("deterministic", True)))

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_json(Path(path).read_text())

    def with_solver(self, solver: str) -> "PipelineConfig":
        """Swap every Laplacian stage to ``pvac`` (``solver='pvac'``) or keep as is."""
        if solver == "licp":
            return copy.deepcopy(self)
        if solver != "pvac":
            raise ConfigError(f"unknown solver {solver!r}")
        out = copy.deepcopy(self)
        for s in out.stages:
            if s.deformation in ("lb_free", "lb_free_refine"):
                s.deformation = "pvac"
        return out


    def with_fixed_budget(self) -> "PipelineConfig":
        """Copy with threshold termination off: every stage runs exactly ``i_max`` iterations."""
        out = copy.deepcopy(self)
        for s in out.stages:
            s.t_s = None
            s.t_s_rel = 0.0
        return out


def resolve_stages(raw_stages) -> list[dict]:
    """Expand stage inheritance: unspecified fields come from the previous stage."""
    out = []
    prev: dict = {}
    for raw in raw_stages:
        cur = copy.deepcopy(prev)
        for k, v in raw.items():
            if k in _NESTED and isinstance(v, dict) and isinstance(cur.get(k), dict):
                cur[k] = {**cur[k], **v}
            else:
                cur[k] = copy.deepcopy(v)
        if "name" not in raw:
            cur["name"] = f"stage{len(out) + 1}"
        out.append(cur)
        prev = cur
    return out


def head_preset() -> PipelineConfig:
    """Five-stage human head recipe (bundled ``presets/head.json``)."""
    text = resources.files("licp").joinpath("presets/head.json").read_text()
    return PipelineConfig.from_json(text)


def max_shape_iterations(config: PipelineConfig) -> int:
    return sum(s.i_max for s in config.stages)


# ---------------------------------------------------------------- execution

@dataclass
class TraceRecord:
    stage: str
    iteration: int
    lam: float | None
    pairs: dict
    e_shp: float
    e_reg: float
    delta_x: float
    inner: int
    wall_time: float

    def to_dict(self, include_timing=True):
        d = asdict(self)
        if not include_timing:
            d.pop("wall_time")
        return d


@dataclass
class RegistrationTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def for_stage(self, stage: str) -> list[TraceRecord]:
        return [r for r in self.records if r.stage == stage]

    def stage_end_times(self) -> dict[str, float]:
        """Cumulative wall time at the end of each stage, in stage order."""
        out = {}
        for r in self.records:
            out[r.stage] = r.wall_time
        return out

    def to_jsonl(self, include_timing=True) -> str:
        return "".join(json.dumps(r.to_dict(include_timing)) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "RegistrationTrace":
        recs = []
        for line in text.splitlines():
            if line.strip():
                d = json.loads(line)
                d.setdefault("wall_time", 0.0)
                recs.append(TraceRecord(**d))
        return cls(recs)


class RegistrationResult(NamedTuple):
    template: TriangleMesh
    data: TriangleMesh
    trace: RegistrationTrace


def _affine_step(matches, template, data):
    upd = solve_global_affine(matches, template)
    new_t, new_d = apply_affine_split(upd, template, data)
    e_shp = 0.0
    for m in matches:
        if len(m):
            tg = (m.targets - upd.translation) @ upd.rotation.T
            r = new_t.vertices[m.template_idx] - tg
            e_shp += float(np.sum((m.weights ** 2)[:, None] * r * r))
    dX = new_t.vertices - template.vertices
    return new_t, new_d, e_shp, 0.0, float(np.sum(dX * dX)), 1


def run_stage(stage: StageConfig, template: TriangleMesh, data: TriangleMesh,
              sets: dict[str, CorrespondenceSet], *, clock_start: float | None = None):
    """Run one stage; returns ``(template, data, records)``."""
    if clock_start is None:
        clock_start = time.perf_counter()
    missing = [s for s in stage.correspondence_sets if s not in sets]
    if missing:
        raise PipelineError(stage.name, f"correspondence sets not provided: {missing}")
    active = [sets[s] for s in stage.correspondence_sets]
    t_s = stage.threshold(template)
    records = []
    for i in range(stage.i_max):
        matches = [match_set(cs, template, data, stage.matching, stage.metric_normal_weight)
                   for cs in active]
        counts = {m.set_name: len(m) for m in matches}
        if sum(counts.values()) == 0:
            raise PipelineError(stage.name, f"no correspondences at iteration {i}")
        lam = None
        if stage.deformation in AFFINE_MODELS:
            template, data, e_shp, e_reg, dx, inner = _affine_step(matches, template, data)
        else:
            lam = evaluate_schedule(stage.schedule, i)
            if stage.deformation == "lb_free":
                template, rep = solve_lb_deformation(matches, template, cotan_laplacian(template), lam)
            elif stage.deformation == "lb_free_refine":
                tol = stage.refine_tol_rel * template.bbox_diagonal() ** 2
                template, rep = refine_with_operator_refresh(matches, template, lam, tol,
                                                             stage.refine_max_inner)
            else:
                template, rep = solve_pvac_deformation(matches, template, stage.gamma, lam)
            e_shp, e_reg, dx, inner = rep.residual_shape, rep.residual_reg, rep.delta_x, rep.iterations_inner
        records.append(TraceRecord(stage.name, i, lam, counts, e_shp, e_reg, dx, inner,
                                   time.perf_counter() - clock_start))
        if dx < t_s:
            break
    return template, data, records


def run_pipeline(config: PipelineConfig, template: TriangleMesh, data: TriangleMesh,
                 sets: dict[str, CorrespondenceSet],
                 snapshot: Callable[[int, str, TriangleMesh, TriangleMesh], None] | None = None,
                 ) -> RegistrationResult:
    """Run all stages in order, threading template and data through.

    ``snapshot(stage_index, stage_name, template, data)`` is called after each
    stage when given.
    """
    for cs in sets.values():
        cs.validate(template.n_vertices, data.n_vertices)
    trace = RegistrationTrace()
    start = time.perf_counter()
    for k, stage in enumerate(config.stages):
        try:
            template, data, recs = run_stage(stage, template, data, sets, clock_start=start)
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(stage.name, str(exc)) from exc
        trace.records.extend(recs)
        if snapshot is not None:
            snapshot(k, stage.name, template, data)
    return RegistrationResult(template, data, trace)
