"""Dataset manifests and run configuration for batch pipeline commands.

A manifest is a JSON file describing a dataset on disk: subjects with
ordered visits, each pointing at mesh files (plus optional reference
meshes, per-visit field specs, shared labels, and a population template).
Manifest validation is fail-fast; every referenced file must exist and
visit times must strictly increase per subject. Reports embed the
run configuration verbatim and the manifest's content hash so equal
inputs are provably equal runs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .flow import TrajectoryConfig


class ManifestError(Exception):
    """Invalid manifest or run configuration."""


@dataclass(frozen=True)
class VisitEntry:
    time_years: float
    wm: Path
    pial: Path | None = None
    wm_ref: Path | None = None
    pial_ref: Path | None = None
    stage1_field: Path | None = None
    stage2_field: Path | None = None


@dataclass(frozen=True)
class SubjectEntry:
    subject_id: str
    age_baseline: float
    diagnosis: int
    visits: tuple


@dataclass(frozen=True)
class Manifest:
    path: Path
    root: Path
    subjects: tuple
    labels: Path | None
    label_names: Path | None
    template: Path | None
    content_hash: str


def _resolve(root: Path, value, key, where):
    if value is None:
        return None
    p = root / value
    if not p.exists():
        raise ManifestError(f"{where}: file for {key!r} not found: {p}")
    return p


def load_manifest(path) -> Manifest:
    p = Path(path)
    if not p.exists():
        raise ManifestError(f"manifest not found: {p}")
    raw = p.read_bytes()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{p}: invalid JSON ({exc})") from None
    root = p.parent / doc.get("root", ".")
    subjects = []
    seen_ids = set()
    for si, sub in enumerate(doc.get("subjects", [])):
        where = f"{p}: subjects[{si}]"
        try:
            sid = str(sub["id"])
            age = float(sub["age_baseline"])
            diag = int(sub["diagnosis"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{where}: {exc}") from None
        if sid in seen_ids:
            raise ManifestError(f"{where}: duplicate subject id {sid!r}")
        seen_ids.add(sid)
        visits = []
        prev_t = None
        for vi, vis in enumerate(sub.get("visits", [])):
            vwhere = f"{where}.visits[{vi}]"
            try:
                t = float(vis["time_years"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"{vwhere}: {exc}") from None
            if prev_t is not None and t <= prev_t:
                raise ManifestError(
                    f"{vwhere}: visit times must strictly increase "
                    f"({t} after {prev_t})"
                )
            prev_t = t
            if "wm" not in vis:
                raise ManifestError(f"{vwhere}: missing 'wm' mesh path")
            visits.append(
                VisitEntry(
                    time_years=t,
                    wm=_resolve(root, vis["wm"], "wm", vwhere),
                    pial=_resolve(root, vis.get("pial"), "pial", vwhere),
                    wm_ref=_resolve(root, vis.get("wm_ref"), "wm_ref", vwhere),
                    pial_ref=_resolve(
                        root, vis.get("pial_ref"), "pial_ref", vwhere
                    ),
                    stage1_field=_resolve(
                        root, vis.get("stage1_field"), "stage1_field", vwhere
                    ),
                    stage2_field=_resolve(
                        root, vis.get("stage2_field"), "stage2_field", vwhere
                    ),
                )
            )
        if not visits:
            raise ManifestError(f"{where}: subject has no visits")
        subjects.append(SubjectEntry(sid, age, diag, tuple(visits)))
    if not subjects:
        raise ManifestError(f"{p}: manifest lists no subjects")
    return Manifest(
        path=p,
        root=root,
        subjects=tuple(subjects),
        labels=_resolve(root, doc.get("labels"), "labels", str(p)),
        label_names=_resolve(
            root, doc.get("label_names"), "label_names", str(p)
        ),
        template=_resolve(root, doc.get("template"), "template", str(p)),
        content_hash=hashlib.sha256(raw).hexdigest(),
    )


@dataclass(frozen=True)
class RunConfig:
    """Knobs shared by pipeline commands; serialized into every report."""

    sampling_n: int = 100_000
    seed: int = 0
    percentiles: tuple = (90.0, 99.0, 100.0)
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    parc_pair_mode: str = "all"
    aggregation: str = "mean"
    lme_criterion: str = "reml"
    lme_max_iter: int = 200
    bracket_width: float = 10.0
    workers: int = 1

    def __post_init__(self):
        if self.sampling_n < 0:
            raise ManifestError("sampling_n must be >= 0")
        for x in self.percentiles:
            if not 0.0 < float(x) <= 100.0:
                raise ManifestError(f"percentile {x} outside (0, 100]")
        if self.parc_pair_mode not in ("all", "consecutive"):
            raise ManifestError(f"bad parc_pair_mode {self.parc_pair_mode!r}")
        if self.aggregation not in ("mean", "median"):
            raise ManifestError(f"bad aggregation {self.aggregation!r}")
        if self.lme_criterion not in ("reml", "ml"):
            raise ManifestError(f"bad lme_criterion {self.lme_criterion!r}")
        if self.lme_max_iter < 1:
            raise ManifestError("lme_max_iter must be >= 1")
        if not self.bracket_width > 0:
            raise ManifestError("bracket_width must be positive")
        if self.workers < 1:
            raise ManifestError("workers must be >= 1")

    def to_json(self) -> dict:
        # workers is an execution detail, not a numeric input: reports must
        # be byte-identical across worker counts, so it is not echoed
        return {
            "sampling_n": self.sampling_n,
            "seed": self.seed,
            "percentiles": [float(x) for x in self.percentiles],
            "trajectory": self.trajectory.to_json(),
            "parc_pair_mode": self.parc_pair_mode,
            "aggregation": self.aggregation,
            "lme_criterion": self.lme_criterion,
            "lme_max_iter": self.lme_max_iter,
            "bracket_width": self.bracket_width,
        }


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    doc = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ManifestError(f"config not found: {p}")
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{p}: invalid JSON ({exc})") from None
    if overrides:
        doc.update({k: v for k, v in overrides.items() if v is not None})
    traj = doc.get("trajectory", {})
    try:
        return RunConfig(
            sampling_n=int(doc.get("sampling_n", 100_000)),
            seed=int(doc.get("seed", 0)),
            percentiles=tuple(doc.get("percentiles", (90.0, 99.0, 100.0))),
            trajectory=TrajectoryConfig.from_json(traj),
            parc_pair_mode=str(doc.get("parc_pair_mode", "all")),
            aggregation=str(doc.get("aggregation", "mean")),
            lme_criterion=str(doc.get("lme_criterion", "reml")),
            lme_max_iter=int(doc.get("lme_max_iter", 200)),
            bracket_width=float(doc.get("bracket_width", 10.0)),
            workers=int(doc.get("workers", 1)),
        )
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"bad run config: {exc}") from None
