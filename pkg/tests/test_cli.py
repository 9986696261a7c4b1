import json
import shutil
import subprocess
import sys

import pytest

from licp.cli import build_parser, format_timing_table, main, timing_table
from licp.io import write_ply
from licp.synthetic import icosphere, write_demo_corpus


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    return write_demo_corpus(d, n_subjects=2, template_subdiv=2, data_subdiv=3)


@pytest.fixture(scope="module")
def registered(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("out")
    assert main(["register", "--manifest", str(corpus), "--out", str(out), "--save-stage-snapshots"]) == 0
    return out


def one_subject_manifest(corpus, tmp_path, **extra):
    doc = json.loads(corpus.read_text())
    doc["subjects"] = doc["subjects"][:1]
    doc.update(extra)
    p = corpus.parent / f"m_{tmp_path.name}.json"
    p.write_text(json.dumps(doc))
    return p


def test_register_writes_three_files(corpus, tmp_path, capsys):
    m = one_subject_manifest(corpus, tmp_path)
    assert main(["register", "--manifest", str(m), "--out", str(tmp_path)]) == 0
    files = sorted(p.name for p in (tmp_path / "s000").iterdir())
    assert files == ["registered_template.ply", "repositioned_data.ply", "trace.jsonl"]
    assert "s000: ok" in capsys.readouterr().out
    lines = (tmp_path / "s000" / "trace.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["stage"] == "affine_init"


def test_register_is_deterministic(corpus, registered, tmp_path):
    assert main(["register", "--manifest", str(corpus), "--out", str(tmp_path), "--workers", "2"]) == 0
    for sid in ("s000", "s001"):
        for name in ("registered_template.ply", "repositioned_data.ply"):
            assert (tmp_path / sid / name).read_bytes() == (registered / sid / name).read_bytes()


def test_failed_subject_sets_exit_code(corpus, tmp_path, capsys):
    doc = json.loads(corpus.read_text())
    bad = corpus.parent / "bad_sets.json"
    bad.write_text(json.dumps({"sets": [{"name": "symmetry", "template": [0], "data": [0]}]}))
    doc["subjects"].append({"id": "broken", "scan": doc["subjects"][0]["scan"], "landmarks": bad.name})
    m = corpus.parent / "m_bad.json"
    m.write_text(json.dumps(doc))
    assert main(["register", "--manifest", str(m), "--out", str(tmp_path)]) == 1
    out = capsys.readouterr().out
    assert "broken: FAILED" in out and "s000: ok" in out and "s001: ok" in out
    assert not (tmp_path / "broken" / "registered_template.ply").exists()


def test_dump_config(capsys):
    assert main(["register", "--dump-config"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert [s["termination"]["i_max"] for s in cfg["stages"]] == [1, 15, 58, 31, 27]
    # inheritance is resolved in the dump
    assert cfg["stages"][4]["correspondence_sets"] == cfg["stages"][3]["correspondence_sets"]
    assert main(["register", "--dump-config", "--solver", "pvac"]) == 0
    pv = json.loads(capsys.readouterr().out)
    assert [s["deformation"] for s in pv["stages"]] == ["affine_oneshot", "affine_iterative", "pvac", "pvac", "pvac"]
    for a, b in zip(cfg["stages"], pv["stages"]):
        a.pop("deformation"), b.pop("deformation")
        assert a == b


def test_bad_manifest(tmp_path, capsys):
    (tmp_path / "m.json").write_text(json.dumps({"template": "nope.ply", "subjects": []}))
    assert main(["register", "--manifest", str(tmp_path / "m.json")]) == 2
    assert "missing files" in capsys.readouterr().err
    write_ply(tmp_path / "t.ply", icosphere(1))
    (tmp_path / "m2.json").write_text(json.dumps({"template": "t.ply", "subjects": [
        {"id": "a", "scan": "t.ply"}, {"id": "a", "scan": "t.ply"}]}))
    assert main(["register", "--manifest", str(tmp_path / "m2.json")]) == 2


def test_benchmark_reports_metrics(corpus, registered, capsys):
    assert main(["benchmark", "--manifest", str(corpus), "--out", str(registered), "--save-stage-snapshots"]) == 0
    rep = json.loads((registered / "benchmark_report.json").read_text())
    assert rep["n_subjects"] == 2
    assert 0 < rep["density"] and 0 < rep["homogeneity"] <= 1
    assert abs(sum(r["weight"] for r in rep["per_label"].values()) - 1) < 1e-12
    assert [r["stage"] for r in rep["stages"]] == ["affine_init", "affine_adapt", "laplacian_adapt",
                                                   "dense_morph", "normal_shoot"]
    assert (registered / "density_colormap.ply").exists()
    assert "density" in capsys.readouterr().out


def test_benchmark_perfect_transfer(tmp_path):
    s = icosphere(2, 1.0)
    write_ply(tmp_path / "t.ply", s)
    ann = {"items": [{"label": "eyes", "points": s.vertices[:4].tolist()},
                     {"label": "mouth", "points": s.vertices[10:13].tolist()}]}
    subjects = []
    for sid in ("a", "b"):
        (tmp_path / f"{sid}.json").write_text(json.dumps(ann))
        for name in ("registered_template.ply", "repositioned_data.ply"):
            (tmp_path / "out" / sid).mkdir(parents=True, exist_ok=True)
            shutil.copy(tmp_path / "t.ply", tmp_path / "out" / sid / name)
        subjects.append({"id": sid, "scan": "t.ply", "annotations": f"{sid}.json"})
    (tmp_path / "m.json").write_text(json.dumps({"template": "t.ply", "output_dir": "out", "subjects": subjects}))
    assert main(["benchmark", "--manifest", str(tmp_path / "m.json")]) == 0
    rep = json.loads((tmp_path / "out" / "benchmark_report.json").read_text())
    assert rep["density"] == 1.0 and rep["homogeneity"] == 1.0


def test_benchmark_skips_unregistered(corpus, registered, tmp_path):
    out = tmp_path / "partial"
    shutil.copytree(registered / "s000", out / "s000")
    with pytest.warns(UserWarning, match="s001"):
        assert main(["benchmark", "--manifest", str(corpus), "--out", str(out)]) == 0
    assert json.loads((out / "benchmark_report.json").read_text())["n_subjects"] == 1


def test_benchmark_without_annotations(corpus, registered, tmp_path, capsys):
    doc = json.loads(corpus.read_text())
    for s in doc["subjects"]:
        s.pop("annotations")
    m = corpus.parent / "m_noann.json"
    m.write_text(json.dumps(doc))
    assert main(["benchmark", "--manifest", str(m), "--out", str(registered)]) == 2
    assert "annotation" in capsys.readouterr().err
    empty = corpus.parent / "empty_ann.json"
    empty.write_text(json.dumps({"items": []}))
    for s in doc["subjects"]:
        s["annotations"] = empty.name
    m.write_text(json.dumps(doc))
    assert main(["benchmark", "--manifest", str(m), "--out", str(registered)]) == 2


def test_timing_table(corpus, tmp_path, capsys):
    m = one_subject_manifest(corpus, tmp_path)
    assert main(["timing", "--manifest", str(m), "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3 and lines[1].startswith("L-ICP") and lines[2].startswith("PVAC")
    t = json.loads((tmp_path / "timing.json").read_text())
    assert set(t["cumulative_seconds"]) == {"licp", "pvac"}
    assert all(len(r) == 5 for r in t["cumulative_seconds"].values())
    assert main(["timing", "--manifest", str(m), "--out", str(tmp_path), "--solver", "pvac"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2 and lines[1].startswith("PVAC")


def test_timing_table_formatting():
    tab = timing_table({"licp": [{"a": 1.0, "b": 2.123456}, {"a": 3.0, "b": 4.0}]}, ["a", "b"])
    assert tab == {"licp": [2.0, 3.061728]}
    text = format_timing_table(tab, ["a", "b"])
    assert "3.062" in text and "3.0617" not in text
    # a subject that stopped early carries its last cumulative time forward
    assert timing_table({"x": [{"a": 1.0}]}, ["a", "b"]) == {"x": [1.0, 1.0]}


def test_parser_flags():
    args = build_parser().parse_args(["timing", "--manifest", "m.json", "--workers", "3", "--fixed-budget"])
    assert args.workers == 3 and args.fixed_budget
    with pytest.raises(SystemExit):
        build_parser().parse_args(["register", "--solver", "nicp"])


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "licp", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "licp" in out.stdout
