"""Batch command-line interface.

Subcommands: ``phantom`` (emit a synthetic dataset + manifest), ``metrics``
(accuracy and consistency reports against reference surfaces), ``template``
(two-stage template deformation), ``lme`` (vertex-wise mixed-model maps),
and ``validate`` (manifest + mesh checks).

Exit codes: 0 success, 1 validation failure, 2 runtime failure. All outputs
are deterministic for equal inputs: reports embed the run config and the
manifest content hash, floats are serialized at full precision, and worker
counts never change any numeric result (work items are pure; the
orchestrator writes in a fixed order).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .flow import (
    GeneralizedVertexSet,
    PerVertexField,
    TrajectoryConfig,
    field_from_json,
    integrate,
    median_template,
    within_subject_template,
)
from .intersect import self_intersecting_faces
from .lme import LmeDesign, LmeError, RankDeficientError, lme_vertexwise
from .manifest import Manifest, ManifestError, RunConfig, load_config, load_manifest
from .mesh import ConnectivityTag, LongitudinalSubject, MeshError, validate
from .meshio import (
    MeshFormatError,
    feature_sidecar_path,
    load_features,
    load_mesh,
    save_mesh,
)
from .metrics import distance_report
from .morphometry import (
    VertexScalarField,
    cortical_thickness,
    load_labeling,
    load_vertex_field,
    mean_curvature,
    longitudinal_variance,
    parc_f1,
    save_labeling,
    save_vertex_field,
)
from .phantom import CohortSpec, PhantomSpec, icosphere, synth_cohort

logger = logging.getLogger("longisurf")

_VALIDATION_ERRORS = (
    ManifestError,
    MeshFormatError,
    LmeError,
    RankDeficientError,
    ValueError,
)


def _fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def _mean_sd(values) -> dict:
    arr = np.asarray([v for v in values if v is not None and np.isfinite(v)])
    if arr.size == 0:
        return {"mean": None, "sd": None, "n": 0}
    sd = float(arr.std(ddof=1)) if arr.size > 1 else None
    return {"mean": float(arr.mean()), "sd": sd, "n": int(arr.size)}


# ---------------------------------------------------------------- phantom


def cmd_phantom(spec_path, out_dir, seed=None) -> int:
    doc = json.loads(Path(spec_path).read_text(encoding="utf-8"))
    pdoc = dict(doc.get("phantom", {}))
    if seed is not None:
        pdoc["seed"] = int(seed)
    for key in ("visit_times", "affected_sectors"):
        if key in pdoc:
            pdoc[key] = tuple(pdoc[key])
    try:
        pspec = PhantomSpec(**pdoc)
        cdoc = doc.get("cohort", {})
        cohort = CohortSpec(
            phantom=pspec,
            n_subjects=int(cdoc.get("n_subjects", 8)),
            n_cases=int(cdoc.get("n_cases", 4)),
            age_range=tuple(cdoc.get("age_range", (65.0, 85.0))),
        )
    except TypeError as exc:
        raise ManifestError(f"bad phantom spec: {exc}") from None

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = TrajectoryConfig()
    template = icosphere(pspec.level, pspec.radius)
    save_mesh(template, out / "template.off")

    subjects_json = []
    labels_written = False
    for synth in synth_cohort(cohort):
        sid = synth.subject.subject_id
        sdir = out / sid
        sdir.mkdir(exist_ok=True)
        if not labels_written:
            save_labeling(
                synth.labels, out / "labels.csv", out / "label_names.json"
            )
            labels_written = True
        wm_stack = [
            GeneralizedVertexSet(m.vertices) for m in synth.subject.visits
        ]
        subject_mean = within_subject_template(wm_stack).coordinates
        visits_json = []
        for j, meta in enumerate(synth.metadata):
            wm = synth.subject.visits[j]
            pial = synth.subject.pial_visits[j]
            names = {
                "wm": f"{sid}/visit{j:02d}_wm.off",
                "pial": f"{sid}/visit{j:02d}_pial.off",
            }
            save_mesh(wm, out / names["wm"])
            save_mesh(pial, out / names["pial"])
            save_vertex_field(
                synth.thickness_truth[j],
                sdir / f"visit{j:02d}_thickness_truth.csv",
            )
            stage1 = PerVertexField(
                (wm.vertices - template.vertices) / cfg.duration
            )
            stage2 = PerVertexField(
                (wm.vertices - subject_mean) / cfg.duration
            )
            s1_name = f"{sid}/visit{j:02d}_stage1.json"
            s2_name = f"{sid}/visit{j:02d}_stage2.json"
            _write_json(out / s1_name, stage1.to_json())
            _write_json(out / s2_name, stage2.to_json())
            visits_json.append(
                {
                    "time_years": meta["time_years"],
                    "wm": names["wm"],
                    "pial": names["pial"],
                    "wm_ref": names["wm"],
                    "pial_ref": names["pial"],
                    "stage1_field": s1_name,
                    "stage2_field": s2_name,
                }
            )
        subjects_json.append(
            {
                "id": sid,
                "age_baseline": synth.metadata[0]["age_baseline"],
                "diagnosis": synth.metadata[0]["diagnosis"],
                "visits": visits_json,
            }
        )
    _write_json(
        out / "manifest.json",
        {
            "root": ".",
            "template": "template.off",
            "labels": "labels.csv",
            "label_names": "label_names.json",
            "subjects": subjects_json,
        },
    )
    logger.info("phantom dataset written to %s", out)
    return 0


# ---------------------------------------------------------------- metrics


def _subject_payload(manifest: Manifest, subject, cfg: RunConfig, seeds):
    return {
        "subject_id": subject.subject_id,
        "visits": [
            {
                "time_years": v.time_years,
                "wm": str(v.wm),
                "pial": str(v.pial) if v.pial else None,
                "wm_ref": str(v.wm_ref) if v.wm_ref else None,
                "pial_ref": str(v.pial_ref) if v.pial_ref else None,
            }
            for v in subject.visits
        ],
        "labels": str(manifest.labels) if manifest.labels else None,
        "label_names": str(manifest.label_names)
        if manifest.label_names
        else None,
        "sampling_n": cfg.sampling_n,
        "percentiles": list(cfg.percentiles),
        "parc_pair_mode": cfg.parc_pair_mode,
        "seeds": seeds,
    }


def _metrics_subject_worker(payload: dict) -> dict:
    sid = payload["subject_id"]
    result = {
        "subject_id": sid,
        "scan_rows": [],
        "subject_row": {},
        "thickness": [],
        "errors": [],
    }
    try:
        wm_meshes = [load_mesh(v["wm"]) for v in payload["visits"]]
        pial_meshes = [
            load_mesh(v["pial"]) if v["pial"] else None
            for v in payload["visits"]
        ]
        for j, visit in enumerate(payload["visits"]):
            for k, surface in enumerate(("wm", "pial")):
                mesh = wm_meshes[j] if surface == "wm" else pial_meshes[j]
                if mesh is None:
                    continue
                ref_path = visit[f"{surface}_ref"]
                if ref_path is None:
                    result["errors"].append(
                        f"{sid} visit {j}: missing {surface} reference mesh"
                    )
                    continue
                ref = load_mesh(ref_path)
                rep = distance_report(
                    mesh,
                    ref,
                    percentiles=payload["percentiles"],
                    n=payload["sampling_n"],
                    seed=tuple(payload["seeds"][f"{j}:{surface}"]),
                )
                sif = self_intersecting_faces(mesh)
                row = {
                    "subject": sid,
                    "visit": j,
                    "surface": surface,
                    "assd_mm": rep.assd_mm,
                }
                for pct in payload["percentiles"]:
                    row[f"hd{pct:g}_mm"] = rep.hd_mm[float(pct)]
                row["sif_count"] = sif.count
                row["sif_ratio"] = sif.ratio
                result["scan_rows"].append(row)

        result["tag"] = (
            wm_meshes[0].tag.n_vertices,
            wm_meshes[0].tag.face_digest,
        )
        thickness_fields = []
        if all(p is not None for p in pial_meshes):
            for j, (wm, pial) in enumerate(zip(wm_meshes, pial_meshes)):
                if wm.tag != pial.tag:
                    result["errors"].append(
                        f"{sid} visit {j}: wm/pial connectivity mismatch"
                    )
                    thickness_fields = []
                    break
                th = cortical_thickness(wm, pial)
                thickness_fields.append(th)
                result["thickness"].append((j, th.values.tolist()))

        srow = {"subject": sid}
        if len(wm_meshes) >= 2:
            try:
                _, srow["mcvar_wm"] = longitudinal_variance(
                    [mean_curvature(m) for m in wm_meshes]
                )
            except (MeshError, ValueError) as exc:
                result["errors"].append(f"{sid}: mcvar_wm: {exc}")
            if all(p is not None for p in pial_meshes):
                try:
                    _, srow["mcvar_pial"] = longitudinal_variance(
                        [mean_curvature(m) for m in pial_meshes]
                    )
                except (MeshError, ValueError) as exc:
                    result["errors"].append(f"{sid}: mcvar_pial: {exc}")
            if len(thickness_fields) >= 2:
                _, srow["cthvar"] = longitudinal_variance(thickness_fields)
            if payload["labels"] and payload["label_names"]:
                labeling = load_labeling(
                    payload["labels"],
                    payload["label_names"],
                    wm_meshes[0].tag,
                )
                _, srow["parcf1_wm"] = parc_f1(
                    LongitudinalSubject(sid, wm_meshes),
                    labeling,
                    payload["parc_pair_mode"],
                )
                if all(p is not None for p in pial_meshes):
                    _, srow["parcf1_pial"] = parc_f1(
                        LongitudinalSubject(sid, pial_meshes),
                        labeling,
                        payload["parc_pair_mode"],
                    )
        result["subject_row"] = srow
    except Exception as exc:  # isolate one bad subject from the cohort
        result["errors"].append(f"{sid}: {type(exc).__name__}: {exc}")
    return result


_SCAN_METRIC_KEYS = ("assd_mm", "sif_count", "sif_ratio")
_SUBJECT_METRIC_KEYS = (
    "mcvar_wm",
    "mcvar_pial",
    "cthvar",
    "parcf1_wm",
    "parcf1_pial",
)


def cmd_metrics(manifest_path, config_path, out_dir, workers=None, seed=None) -> int:
    manifest = load_manifest(manifest_path)
    cfg = load_config(config_path, {"workers": workers, "seed": seed})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    # per-(visit, surface) sample seeds derived once, independent of workers
    ss = np.random.SeedSequence(cfg.seed)
    payloads = []
    flat = 0
    spawned = ss.spawn(sum(2 * len(s.visits) for s in manifest.subjects))
    for subject in manifest.subjects:
        seeds = {}
        for j in range(len(subject.visits)):
            for surface in ("wm", "pial"):
                state = spawned[flat].generate_state(2, dtype=np.uint64)
                seeds[f"{j}:{surface}"] = [int(state[0]), int(state[1])]
                flat += 1
        payloads.append(_subject_payload(manifest, subject, cfg, seeds))

    t0 = time.perf_counter()
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_metrics_subject_worker, payloads))
    else:
        results = [_metrics_subject_worker(p) for p in payloads]
    logger.info(
        "metrics: %d subjects in %.2f s", len(results), time.perf_counter() - t0
    )

    results.sort(key=lambda r: r["subject_id"])
    hd_keys = [f"hd{p:g}_mm" for p in cfg.percentiles]
    scan_header = ["subject", "visit", "surface", "assd_mm", *hd_keys,
                   "sif_count", "sif_ratio"]
    scan_rows = []
    subject_rows = []
    errors = []
    thick_dir = out / "thickness"
    thick_dir.mkdir(parents=True, exist_ok=True)
    for res in results:
        errors.extend(res["errors"])
        for row in res["scan_rows"]:
            scan_rows.append([row.get(k) for k in scan_header])
        subject_rows.append(res["subject_row"])
        if res["thickness"]:
            tag = ConnectivityTag(*res["tag"])
            for j, values in res["thickness"]:
                save_vertex_field(
                    VertexScalarField(np.asarray(values), tag, "mm"),
                    thick_dir / f"{res['subject_id']}_visit{j:02d}.csv",
                )

    subject_header = ["subject", *_SUBJECT_METRIC_KEYS]
    _write_csv(out / "scans.csv", scan_header, scan_rows)
    _write_csv(
        out / "subjects.csv",
        subject_header,
        [
            [row.get("subject"), *[row.get(k) for k in _SUBJECT_METRIC_KEYS]]
            for row in subject_rows
        ],
    )
    scan_cols = {"assd_mm": 3}
    scan_cols.update({k: 4 + i for i, k in enumerate(hd_keys)})
    scan_cols["sif_count"] = 4 + len(hd_keys)
    scan_cols["sif_ratio"] = 5 + len(hd_keys)
    summary = {
        "config": cfg.to_json(),
        "manifest_sha256": manifest.content_hash,
        "n_subjects": len(manifest.subjects),
        "errors": sorted(errors),
        "scan_metrics": {
            key: _mean_sd(row[idx] for row in scan_rows)
            for key, idx in scan_cols.items()
        },
        "subject_metrics": {
            key: _mean_sd(row.get(key) for row in subject_rows)
            for key in _SUBJECT_METRIC_KEYS
        },
    }
    _write_json(out / "summary.json", summary)
    return 0


# ---------------------------------------------------------------- template


def _load_field(path):
    if path is None:
        return field_from_json({"kind": "zero"})
    return field_from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def cmd_template(manifest_path, config_path, out_dir) -> int:
    manifest = load_manifest(manifest_path)
    cfg = load_config(config_path)
    if manifest.template is None:
        raise ManifestError(
            f"{manifest.path}: 'template' entry required for template runs"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    template_mesh = load_mesh(manifest.template)
    sidecar = feature_sidecar_path(manifest.template)
    features = load_features(sidecar) if sidecar.exists() else None
    template = GeneralizedVertexSet(template_mesh.vertices, features)

    outputs = []
    for subject in manifest.subjects:
        sid = subject.subject_id
        sdir = out / sid
        sdir.mkdir(exist_ok=True)
        t0 = time.perf_counter()
        stage1_out = [
            integrate(template, _load_field(v.stage1_field), cfg.trajectory)
            for v in subject.visits
        ]
        t1 = time.perf_counter()
        if cfg.aggregation == "mean":
            subject_template = within_subject_template(stage1_out)
        else:
            subject_template = median_template(stage1_out)
        t2 = time.perf_counter()
        finals = [
            integrate(
                subject_template, _load_field(v.stage2_field), cfg.trajectory
            )
            for v in subject.visits
        ]
        t3 = time.perf_counter()
        logger.info(
            "%s: stage1 %.3f s, aggregate %.3f s, stage2 %.3f s",
            sid, t1 - t0, t2 - t1, t3 - t2,
        )
        tmesh = template_mesh.with_vertices(subject_template.coordinates)
        if subject_template.features is not None:
            tmesh = tmesh.with_features(subject_template.features)
        save_mesh(tmesh, sdir / "template.off")
        outputs.append(f"{sid}/template.off")
        for j, final in enumerate(finals):
            save_mesh(
                template_mesh.with_vertices(final.coordinates),
                sdir / f"visit{j:02d}_surface.off",
            )
            outputs.append(f"{sid}/visit{j:02d}_surface.off")
    _write_json(
        out / "run.json",
        {
            "config": cfg.to_json(),
            "manifest_sha256": manifest.content_hash,
            "outputs": outputs,
        },
    )
    return 0


# ---------------------------------------------------------------- lme


def cmd_lme(manifest_path, thickness_dir, config_path, out_dir, workers=None) -> int:
    manifest = load_manifest(manifest_path)
    cfg = load_config(config_path, {"workers": workers})
    tdir = Path(thickness_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    gaps = []
    rows = []
    for subject in manifest.subjects:
        for j, visit in enumerate(subject.visits):
            path = tdir / f"{subject.subject_id}_visit{j:02d}.csv"
            if not path.exists():
                gaps.append(
                    f"subject {subject.subject_id} visit {j}: missing "
                    f"thickness field {path}"
                )
                continue
            rows.append((subject, j, visit, path))
    if gaps:
        raise ManifestError(
            "incomplete thickness inputs:\n  " + "\n  ".join(gaps)
        )

    tag_mesh = load_mesh(manifest.subjects[0].visits[0].wm)
    tag = tag_mesh.tag
    values = np.empty((len(rows), tag.n_vertices))
    subjects, ages, times, diags = [], [], [], []
    for i, (subject, j, visit, path) in enumerate(rows):
        fld = load_vertex_field(path, tag, units="mm")
        values[i] = fld.values
        subjects.append(subject.subject_id)
        ages.append(subject.age_baseline)
        times.append(visit.time_years)
        diags.append(subject.diagnosis)
    design = LmeDesign(subjects, ages, times, diags)
    t0 = time.perf_counter()
    result = lme_vertexwise(
        design,
        values,
        criterion=cfg.lme_criterion,
        max_iter=cfg.lme_max_iter,
        workers=cfg.workers,
    )
    logger.info(
        "lme: %d vertices in %.2f s (%d failed)",
        tag.n_vertices, time.perf_counter() - t0, result.n_failed,
    )
    save_vertex_field(
        VertexScalarField(result.beta3, tag, "mm"), out / "beta3.csv"
    )
    save_vertex_field(
        VertexScalarField(result.neglog10p, tag, ""), out / "neglog10p.csv"
    )
    _write_json(
        out / "summary.json",
        {
            "config": cfg.to_json(),
            "manifest_sha256": manifest.content_hash,
            "inference": "wald-normal",
            "n_observations": len(rows),
            "n_vertices": tag.n_vertices,
            "n_converged": result.n_converged,
            "n_failed": result.n_failed,
            "failures": [
                {"vertex": int(v), "error": msg} for v, msg in result.failures
            ],
        },
    )
    return 0


# ---------------------------------------------------------------- validate


def cmd_validate(manifest_path) -> int:
    manifest = load_manifest(manifest_path)
    print(f"manifest {manifest.path}: {len(manifest.subjects)} subjects, "
          f"sha256 {manifest.content_hash[:16]}…")
    for subject in manifest.subjects:
        for j, visit in enumerate(subject.visits):
            for surface in ("wm", "pial"):
                path = getattr(visit, surface)
                if path is None:
                    continue
                mesh = load_mesh(path)
                rep = validate(mesh)
                print(
                    f"{subject.subject_id} visit {j} {surface}: "
                    f"V={mesh.n_vertices} F={mesh.n_faces} "
                    f"closed={rep.closed} oriented={rep.oriented} "
                    f"degenerate={rep.degenerate_faces}"
                )
    return 0


# ---------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="longisurf",
        description="Longitudinal surface-analysis pipeline",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="phantom/cohort spec JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("metrics", help="accuracy and consistency reports")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("template", help="two-stage template deformation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("lme", help="vertex-wise mixed-model maps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--thickness-dir", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("validate", help="check a manifest and its meshes")
    p.add_argument("--manifest", required=True)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    args = build_parser().parse_args(argv)
    try:
        if args.command == "phantom":
            return cmd_phantom(args.spec, args.out, args.seed)
        if args.command == "metrics":
            return cmd_metrics(
                args.manifest, args.config, args.out, args.workers, args.seed
            )
        if args.command == "template":
            return cmd_template(args.manifest, args.config, args.out)
        if args.command == "lme":
            return cmd_lme(
                args.manifest, args.thickness_dir, args.config, args.out,
                args.workers,
            )
        if args.command == "validate":
            return cmd_validate(args.manifest)
        raise ValueError(f"unknown command {args.command!r}")
    except _VALIDATION_ERRORS as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
