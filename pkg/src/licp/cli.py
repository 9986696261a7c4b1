"""Batch command line: ``licp register | benchmark | timing``.

A run manifest is a JSON file::

    {"template": "template.ply",
     "output_dir": "out",
     "config": "pipeline.json",            # optional, defaults to the head preset
     "vocabulary": ["eyes", "mouth"],      # optional annotation labels
     "subjects": [{"id": "s001", "scan": "s001.ply",
                   "landmarks": "s001_sets.json", "annotations": "s001_ann.json"}]}

Relative paths are resolved against the manifest's directory. Set
``LICP_LOG_LEVEL`` (e.g. ``DEBUG``) for more console output.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .benchmark import (
    DEFAULT_LABELS,
    AnnotationError,
    MetricError,
    export_density_colormap,
    load_annotation_set,
    merge_tallies,
    metric_report,
    project_annotations,
    reposition_projection,
    transfer_to_template,
    write_metric_report,
)
from .correspond import build_correspondence_sets, load_correspondence_sets
from .io import atomic_write, load_mesh, save_mesh
from .pipeline import PipelineConfig, head_preset, run_pipeline

log = logging.getLogger("licp")

SOLVER_LABELS = {"licp": "L-ICP", "pvac": "PVAC"}
EXIT_OK, EXIT_SUBJECT_FAILED, EXIT_USAGE = 0, 1, 2


class ManifestError(ValueError):
    pass


@dataclass
class SubjectEntry:
    id: str
    scan: Path
    landmarks: Path | None = None
    annotations: Path | None = None


@dataclass
class RunManifest:
    template: Path
    subjects: list[SubjectEntry]
    output_dir: Path
    config: Path | None = None
    vocabulary: tuple = DEFAULT_LABELS
    solver: str | None = None

    def validate(self):
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise ManifestError("subject ids must be unique")
        paths = [self.template] + ([self.config] if self.config else [])
        for s in self.subjects:
            paths += [p for p in (s.scan, s.landmarks, s.annotations) if p is not None]
        missing = [str(p) for p in paths if not p.exists()]
        if missing:
            raise ManifestError(f"missing files: {missing}")


def load_manifest(path) -> RunManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    base = path.parent

    def rel(p):
        return None if p is None else (base / p)

    try:
        subjects = [SubjectEntry(str(s["id"]), rel(s["scan"]), rel(s.get("landmarks")), rel(s.get("annotations")))
                    for s in doc.get("subjects", [])]
        man = RunManifest(
            template=rel(doc["template"]),
            subjects=subjects,
            output_dir=rel(doc.get("output_dir", "out")),
            config=rel(doc.get("config")),
            vocabulary=tuple(doc.get("vocabulary", DEFAULT_LABELS)),
            solver=doc.get("solver"),
        )
    except KeyError as exc:
        raise ManifestError(f"manifest field missing: {exc}") from None
    man.validate()
    return man


def _resolve_config(args, manifest: RunManifest | None) -> PipelineConfig:
    if args.config:
        cfg = PipelineConfig.load(args.config)
    elif manifest is not None and manifest.config is not None:
        cfg = PipelineConfig.load(manifest.config)
    else:
        cfg = head_preset()
    solver = args.solver or (manifest.solver if manifest else None) or "licp"
    return cfg.with_solver(solver)


def _subject_dir(out: Path, sid: str) -> Path:
    return out / sid


def _output_paths(out: Path, sid: str, template_path: Path, scan_path: Path):
    d = _subject_dir(out, sid)
    return (d / f"registered_template{template_path.suffix.lower()}",
            d / f"repositioned_data{scan_path.suffix.lower()}",
            d / "trace.jsonl")


def _snapshot_paths(out: Path, sid: str, k: int, name: str):
    d = _subject_dir(out, sid) / "stages"
    return d / f"{k}_{name}_template.ply", d / f"{k}_{name}_data.ply"


def _load_subject(template_path, subject: SubjectEntry, config: PipelineConfig):
    template = load_mesh(template_path)
    data = load_mesh(subject.scan)
    if subject.landmarks is not None:
        sets = load_correspondence_sets(subject.landmarks, template, data, config.sets)
    else:
        sets = build_correspondence_sets([], template, data, config.sets)
    return template, data, sets


# ---------------------------------------------------------------- register

def _register_one(job):
    template_path, subject, config_dict, out, snapshots = job
    config = PipelineConfig.from_dict(config_dict)
    try:
        template, data, sets = _load_subject(template_path, subject, config)

        def snap(k, name, t, d):
            tp, dp = _snapshot_paths(out, subject.id, k, name)
            tp.parent.mkdir(parents=True, exist_ok=True)
            save_mesh(tp, t)
            save_mesh(dp, d)

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = run_pipeline(config, template, data, sets, snapshot=snap if snapshots else None)
        t_out, d_out, trace_out = _output_paths(out, subject.id, template_path, subject.scan)
        t_out.parent.mkdir(parents=True, exist_ok=True)
        save_mesh(t_out, res.template)
        save_mesh(d_out, res.data)
        with atomic_write(trace_out) as fh:
            fh.write(res.trace.to_jsonl())
        return {"id": subject.id, "ok": True, "iterations": len(res.trace),
                "stage_times": res.trace.stage_end_times()}
    except Exception as exc:  # reported per subject, the batch carries on
        return {"id": subject.id, "ok": False, "error": f"{type(exc).__name__}: {exc}"}


def _map(fn, jobs, workers: int):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            yield from ex.map(fn, jobs)
    else:
        yield from map(fn, jobs)


def cmd_register(manifest: RunManifest, config: PipelineConfig, out: Path, workers: int = 1,
                 snapshots: bool = False) -> int:
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(manifest.template, s, config.to_dict(), out, snapshots) for s in manifest.subjects]
    failed = 0
    for st in _map(_register_one, jobs, workers):
        if st["ok"]:
            print(f"{st['id']}: ok ({st['iterations']} iterations)", flush=True)
        else:
            failed += 1
            print(f"{st['id']}: FAILED {st['error']}", flush=True)
    print(f"registered {len(jobs) - failed}/{len(jobs)} subjects")
    return EXIT_SUBJECT_FAILED if failed else EXIT_OK


# ---------------------------------------------------------------- benchmark

def _transfer_subject(subject: SubjectEntry, vocabulary, scan, registered, repositioned):
    ann = load_annotation_set(subject.annotations, vocabulary)
    proj = project_annotations(ann, scan)
    proj = reposition_projection(proj, scan, repositioned)
    return transfer_to_template(proj.points, registered), proj.misses, len(ann.items)


def cmd_benchmark(manifest: RunManifest, out: Path, stages: bool = False) -> int:
    template = load_mesh(manifest.template)
    annotated = [s for s in manifest.subjects if s.annotations is not None]
    if not annotated:
        print("error: no subject in the manifest lists an annotation file", file=sys.stderr)
        return EXIT_USAGE
    fragments, misses, n_items = [], {}, 0
    stage_frags: dict[tuple, list] = {}
    for s in annotated:
        t_out, d_out, _ = _output_paths(out, s.id, manifest.template, s.scan)
        if not (t_out.exists() and d_out.exists()):
            warnings.warn(f"{s.id}: no registration found under {out}; skipped", stacklevel=1)
            continue
        scan = load_mesh(s.scan)
        try:
            frag, miss, k = _transfer_subject(s, manifest.vocabulary, scan, load_mesh(t_out), load_mesh(d_out))
        except AnnotationError as exc:
            warnings.warn(f"{s.id}: {exc}; skipped", stacklevel=1)
            continue
        fragments.append(frag)
        misses[s.id] = miss
        n_items += k
        if stages:
            sdir = _subject_dir(out, s.id) / "stages"
            for tp in sorted(sdir.glob("*_template.ply")):
                k_str, name = tp.name[:-len("_template.ply")].split("_", 1)
                dp = tp.with_name(tp.name.replace("_template.ply", "_data.ply"))
                f, _, _ = _transfer_subject(s, manifest.vocabulary, scan, load_mesh(tp), load_mesh(dp))
                stage_frags.setdefault((int(k_str), name), []).append(f)
    if not fragments:
        print("error: no registered subject with annotations to evaluate", file=sys.stderr)
        return EXIT_USAGE
    if n_items == 0:
        print("error: the annotation files contain no annotations", file=sys.stderr)
        return EXIT_USAGE
    tally = merge_tallies(fragments)
    try:
        report = metric_report(tally, misses)
    except MetricError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if stage_frags:
        report["stages"] = []
        for (k, name), frags in sorted(stage_frags.items()):
            r = metric_report(merge_tallies(frags))
            report["stages"].append({"index": k, "stage": name, "density": r["density"],
                                     "homogeneity": r["homogeneity"]})
    out.mkdir(parents=True, exist_ok=True)
    write_metric_report(out / "benchmark_report.json", report)
    export_density_colormap(tally, template, out / "density_colormap.ply")
    print(f"subjects {report['n_subjects']}  touched vertices {report['n_touched_vertices']}")
    print(f"density {report['density']:.4g}  homogeneity {report['homogeneity']:.4g}")
    print(f"{'label':<20}{'h_i':>10}{'w_i':>10}")
    for lab, row in report["per_label"].items():
        print(f"{lab:<20}{row['homogeneity']:>10.4g}{row['weight']:>10.4g}")
    for row in report.get("stages", []):
        print(f"stage {row['index'] + 1} {row['stage']:<18} density {row['density']:.4g}  "
              f"homogeneity {row['homogeneity']:.4g}")
    return EXIT_OK


# ---------------------------------------------------------------- timing

def _time_one(job):
    template_path, subject, config_dict = job
    config = PipelineConfig.from_dict(config_dict)
    template, data, sets = _load_subject(template_path, subject, config)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = run_pipeline(config, template, data, sets)
    return res.trace.stage_end_times()


def timing_table(per_solver: dict[str, list[dict]], stage_names) -> dict[str, list[float]]:
    """Average the per-subject cumulative stage times of each solver."""
    table = {}
    for solver, runs in per_solver.items():
        row = []
        for name in stage_names:
            # a stage cut short by an error inherits the previous cumulative time
            vals = []
            for r in runs:
                prev = 0.0
                for n in stage_names:
                    prev = r.get(n, prev)
                    if n == name:
                        break
                vals.append(prev)
            row.append(float(np.mean(vals)))
        table[solver] = row
    return table


def format_timing_table(table: dict[str, list[float]], stage_names) -> str:
    widths = [max(12, len(n) + 2) for n in stage_names]
    lines = [f"{'solver':<8}" + "".join(f"{n:>{w}}" for n, w in zip(stage_names, widths))]
    for solver, row in table.items():
        lines.append(f"{SOLVER_LABELS.get(solver, solver):<8}"
                     + "".join(f"{v:>{w}.4g}" for v, w in zip(row, widths)))
    return "\n".join(lines)


def cmd_timing(manifest: RunManifest, config: PipelineConfig, solvers, out: Path, workers: int = 1,
               fixed_budget: bool = False) -> int:
    if not manifest.subjects:
        print("error: timing needs at least one subject", file=sys.stderr)
        return EXIT_USAGE
    if fixed_budget:
        config = config.with_fixed_budget()
    names = [s.name for s in config.stages]
    per_solver = {}
    for solver in solvers:
        cfg = config.with_solver(solver).to_dict()
        jobs = [(manifest.template, s, cfg) for s in manifest.subjects]
        per_solver[solver] = list(_map(_time_one, jobs, workers))
    table = timing_table(per_solver, names)
    print(format_timing_table(table, names))
    out.mkdir(parents=True, exist_ok=True)
    with atomic_write(out / "timing.json") as fh:
        json.dump({"stages": names, "fixed_budget": fixed_budget,
                   "cumulative_seconds": table}, fh, indent=2)
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", help="run manifest JSON")
    common.add_argument("--config", help="pipeline config JSON (default: manifest entry or head preset)")
    common.add_argument("--out", help="output directory (overrides the manifest)")
    common.add_argument("--solver", choices=("licp", "pvac"),
                        help="deformation model for the Laplacian stages")
    common.add_argument("--workers", type=int, default=1, help="subjects processed in parallel")
    common.add_argument("--dump-config", action="store_true",
                        help="print the resolved pipeline config and exit")
    common.add_argument("--save-stage-snapshots", action="store_true",
                        help="register: keep per-stage meshes; benchmark: also score them")

    p = argparse.ArgumentParser(prog="licp", description="Laplacian ICP template registration")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("register", parents=[common], help="register the template to every subject scan")
    sub.add_parser("benchmark", parents=[common], help="annotation-transfer density and homogeneity")
    t = sub.add_parser("timing", parents=[common], help="cumulative per-stage wall time per solver")
    t.add_argument("--fixed-budget", action="store_true",
                   help="disable threshold termination so every stage runs its full iteration cap")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("LICP_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        manifest = load_manifest(args.manifest) if args.manifest else None
        config = _resolve_config(args, manifest)
    except (ManifestError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.dump_config:
        print(config.to_json(indent=2))
        return EXIT_OK
    if manifest is None:
        print("error: --manifest is required", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out) if args.out else manifest.output_dir
    workers = max(1, args.workers)
    if args.command == "register":
        return cmd_register(manifest, config, out, workers, args.save_stage_snapshots)
    if args.command == "benchmark":
        return cmd_benchmark(manifest, out, args.save_stage_snapshots)
    solvers = [args.solver] if args.solver else ["licp", "pvac"]
    base = PipelineConfig.load(args.config) if args.config else (
        PipelineConfig.load(manifest.config) if manifest.config else head_preset())
    return cmd_timing(manifest, base, solvers, out, workers, args.fixed_budget)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
