import json
import warnings

import numpy as np
import pytest

from licp.correspond import mean_mnn_distance
from licp.deform import StiffnessSchedule
from licp.pipeline import (
    ConfigError,
    PipelineConfig,
    PipelineError,
    RegistrationTrace,
    StageConfig,
    head_preset,
    max_shape_iterations,
    resolve_stages,
    run_pipeline,
    run_stage,
)


@pytest.fixture(scope="module")
def small_run(small_fixture):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return run_pipeline(head_preset(), small_fixture.template, small_fixture.data, small_fixture.sets)


# ---------------------------------------------------------------- config

def test_preset_published_values():
    cfg = head_preset()
    assert [s.name for s in cfg.stages] == ["affine_init", "affine_adapt", "laplacian_adapt",
                                            "dense_morph", "normal_shoot"]
    assert [s.i_max for s in cfg.stages] == [1, 15, 58, 31, 27]
    assert max_shape_iterations(cfg) == 132
    sched = [(s.schedule.start, s.schedule.end) for s in cfg.stages[2:]]
    assert sched == [(100, 0.1), (100, 1), (0.9, 0.1)]
    assert {k: v["weight"] for k, v in cfg.sets.items()} == {
        "face": 1.5, "ear_left": 1.0, "ear_right": 1.0, "symmetry": 1.4, "region": 1.0}
    assert [s.deformation for s in cfg.stages] == ["affine_oneshot", "affine_iterative", "lb_free",
                                                   "lb_free", "lb_free_refine"]
    # stage 5 inherits stage 4's sets
    assert cfg.stages[4].correspondence_sets == cfg.stages[3].correspondence_sets
    assert cfg.stages[4].metric_normal_weight == 5.0
    assert all(s.metric_normal_weight == 0 for s in cfg.stages[:4])


def test_preset_round_trip():
    cfg = head_preset()
    again = PipelineConfig.from_json(cfg.to_json())
    assert again.to_dict() == cfg.to_dict()


def test_empty_stage_body_repeats_previous():
    raw = head_preset().to_dict()["stages"]
    resolved = resolve_stages(raw + [{}])
    last = dict(resolved[-1])
    prev = dict(resolved[-2])
    last.pop("name"), prev.pop("name")
    assert last == prev


def test_nested_fields_merge_on_inheritance():
    stages = resolve_stages([
        {"name": "a", "correspondence_sets": ["x"], "termination": {"t_s_rel": 1e-3, "i_max": 4}},
        {"name": "b", "termination": {"i_max": 2}},
    ])
    assert stages[1]["termination"] == {"t_s_rel": 1e-3, "i_max": 2}


def test_config_validation():
    base = {"name": "s", "correspondence_sets": ["x"], "deformation": "lb_free",
            "schedule": {"start": 1, "end": 0.1, "steps": 3}, "termination": {"i_max": 3}}
    StageConfig.from_dict(base)
    with pytest.raises(ConfigError, match="unknown stage fields"):
        StageConfig.from_dict({**base, "lambda": 3})
    with pytest.raises(ConfigError, match="schedule"):
        StageConfig.from_dict({**base, "schedule": None})
    with pytest.raises(ConfigError, match="fewer steps"):
        StageConfig.from_dict({**base, "termination": {"i_max": 4}})
    with pytest.raises(ConfigError, match="i_max = 1"):
        StageConfig.from_dict({**base, "deformation": "affine_oneshot"})
    with pytest.raises(ConfigError, match="matching"):
        StageConfig.from_dict({**base, "matching": "closest"})
    with pytest.raises(ConfigError, match="unknown correspondence sets"):
        PipelineConfig([StageConfig.from_dict(base)], sets={"y": {}})


def test_with_solver_swaps_only_laplacian_stages():
    cfg = head_preset()
    pv = cfg.with_solver("pvac")
    for a, b in zip(cfg.stages, pv.stages):
        da, db = a.to_dict(), b.to_dict()
        if a.deformation in ("lb_free", "lb_free_refine"):
            assert db.pop("deformation") == "pvac"
            da.pop("deformation")
        assert da == db
    with pytest.raises(ConfigError):
        cfg.with_solver("nicp")


def test_threshold_is_scale_relative(small_fixture):
    st = head_preset().stages[2]
    d = small_fixture.template.bbox_diagonal()
    assert st.threshold(small_fixture.template) == pytest.approx(1e-4 * d * d)


# ---------------------------------------------------------------- execution

def _stage(**kw):
    d = {"name": "s", "correspondence_sets": ["face", "ear_left", "ear_right", "symmetry"],
         "deformation": "lb_free", "schedule": {"start": 10, "end": 1, "steps": 5},
         "termination": {"i_max": 5}}
    d.update(kw)
    return StageConfig.from_dict(d)


def test_oneshot_and_infinite_threshold(small_fixture):
    fx = small_fixture
    st = head_preset().stages[0]
    _, _, recs = run_stage(st, fx.template, fx.data, fx.sets)
    assert len(recs) == 1
    inf = _stage(termination={"t_s": "inf", "i_max": 5})
    _, _, recs = run_stage(inf, fx.template, fx.data, fx.sets)
    assert len(recs) == 1


def test_trace_delta_matches_meshes(small_fixture):
    fx = small_fixture
    st = _stage(termination={"i_max": 1})
    t, d, recs = run_stage(st, fx.template, fx.data, fx.sets)
    dX = t.vertices - fx.template.vertices
    assert recs[0].delta_x == pytest.approx(float(np.sum(dX * dX)), rel=1e-12)
    assert recs[0].lam == 10


def test_single_stage_pipeline_equals_run_stage(small_fixture):
    fx = small_fixture
    st = head_preset().stages[0]
    t1, d1, recs = run_stage(st, fx.template, fx.data, fx.sets)
    res = run_pipeline(PipelineConfig([st], head_preset().sets), fx.template, fx.data, fx.sets)
    np.testing.assert_array_equal(res.template.vertices, t1.vertices)
    np.testing.assert_array_equal(res.data.vertices, d1.vertices)
    assert [r.to_dict(False) for r in res.trace.records] == [r.to_dict(False) for r in recs]


def test_missing_sets_and_zero_matches(small_fixture):
    fx = small_fixture
    with pytest.raises(PipelineError, match="not provided"):
        run_stage(_stage(correspondence_sets=["nose"]), fx.template, fx.data, fx.sets)
    from licp.correspond import CorrespondenceSet

    sets = {"face": CorrespondenceSet("face", [], [])}
    with pytest.raises(PipelineError, match="no correspondences"):
        run_stage(_stage(correspondence_sets=["face"]), fx.template, fx.data, sets)


def test_small_registration_quality(small_fixture, small_run):
    fx = small_fixture
    before = mean_mnn_distance(fx.template, fx.data)
    after = mean_mnn_distance(small_run.template, small_run.data)
    assert after < 0.02 * small_run.data.bbox_diagonal()
    assert after < 0.25 * before
    # the template keeps its canonical pose: no net rotation towards the scan
    c0 = fx.template.vertices - fx.template.vertices.mean(0)
    c1 = small_run.template.vertices - small_run.template.vertices.mean(0)
    assert np.abs(small_run.template.vertices.mean(0) - fx.template.vertices.mean(0)).max() < 0.05 * fx.template.bbox_diagonal()
    assert np.sum(c0 * c1) > 0


def test_trace_schema_and_stage_caps(small_run):
    cfg = head_preset()
    for st in cfg.stages:
        recs = small_run.trace.for_stage(st.name)
        assert 1 <= len(recs) <= st.i_max
        assert [r.iteration for r in recs] == list(range(len(recs)))
    for r in small_run.trace.records:
        if r.stage == "normal_shoot":
            assert 1 <= r.inner <= 10
    times = list(small_run.trace.stage_end_times().values())
    assert times == sorted(times)
    text = small_run.trace.to_jsonl()
    back = RegistrationTrace.from_jsonl(text)
    assert back.to_jsonl() == text
    assert "wall_time" not in json.loads(small_run.trace.to_jsonl(include_timing=False).splitlines()[0])


def test_pvac_swap_keeps_trace_schema(small_fixture):
    fx = small_fixture
    cfg = head_preset()
    short = PipelineConfig([cfg.stages[0], _stage(termination={"i_max": 2})], cfg.sets)
    a = run_pipeline(short, fx.template, fx.data, fx.sets)
    b = run_pipeline(short.with_solver("pvac"), fx.template, fx.data, fx.sets)
    assert [set(r.to_dict()) for r in a.trace.records] == [set(r.to_dict()) for r in b.trace.records]
    assert [r.stage for r in a.trace.records] == [r.stage for r in b.trace.records]


def test_snapshot_callback(small_fixture):
    fx = small_fixture
    cfg = head_preset()
    seen = []
    short = PipelineConfig(cfg.stages[:2], cfg.sets)
    res = run_pipeline(short, fx.template, fx.data, fx.sets, snapshot=lambda k, n, t, d: seen.append((k, n, t)))
    assert [(k, n) for k, n, _ in seen] == [(0, "affine_init"), (1, "affine_adapt")]
    np.testing.assert_array_equal(seen[-1][2].vertices, res.template.vertices)


def test_fixed_budget_runs_every_iteration(small_fixture):
    fx = small_fixture
    cfg = head_preset()
    short = PipelineConfig(cfg.stages[:3], cfg.sets).with_fixed_budget()
    res = run_pipeline(short, fx.template, fx.data, fx.sets)
    assert [len(res.trace.for_stage(s.name)) for s in short.stages] == [1, 15, 58]
