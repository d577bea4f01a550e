import csv
import json

import numpy as np
import pytest

from longisurf import load_mesh
from longisurf.cli import main


@pytest.fixture(scope="module")
def phantom_dataset(tmp_path_factory):
    """Small phantom cohort generated through the CLI."""
    root = tmp_path_factory.mktemp("dataset")
    spec = {
        "phantom": {
            "level": 2,
            "radius": 10.0,
            "n_bumps": 4,
            "bump_amplitude": 0.6,
            "thickness_mean": 2.0,
            "thickness_wobble": 0.2,
            "n_visits": 3,
            "atrophy_rate": 0.05,
            "affected_sectors": [3],
            "seed": 21,
        },
        "cohort": {"n_subjects": 4, "n_cases": 2, "age_range": [65, 80]},
    }
    spec_path = root / "spec.json"
    spec_path.write_text(json.dumps(spec))
    out = root / "data"
    assert main(["phantom", "--spec", str(spec_path), "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def run_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    path.write_text(
        json.dumps(
            {
                "sampling_n": 2000,
                "seed": 7,
                "percentiles": [90, 99, 100],
            }
        )
    )
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_phantom_emits_manifest_and_files(phantom_dataset):
    manifest = json.loads((phantom_dataset / "manifest.json").read_text())
    assert len(manifest["subjects"]) == 4
    assert (phantom_dataset / "template.off").exists()
    assert (phantom_dataset / "labels.csv").exists()
    for sub in manifest["subjects"]:
        for vis in sub["visits"]:
            assert (phantom_dataset / vis["wm"]).exists()
            assert (phantom_dataset / vis["pial"]).exists()
            assert vis["wm_ref"] == vis["wm"]
    mesh = load_mesh(phantom_dataset / manifest["subjects"][0]["visits"][0]["wm"])
    assert mesh.n_vertices == 162


def test_validate_command(phantom_dataset, capsys):
    code = main(
        ["validate", "--manifest", str(phantom_dataset / "manifest.json")]
    )
    assert code == 0
    out = capsys.readouterr().out
    assert "closed=True" in out
    assert "sub-000" in out


def test_validate_missing_manifest(tmp_path):
    assert main(["validate", "--manifest", str(tmp_path / "nope.json")]) == 1


def test_manifest_missing_file_fails_validation(phantom_dataset, tmp_path):
    doc = json.loads((phantom_dataset / "manifest.json").read_text())
    doc["subjects"][0]["visits"][0]["wm"] = "missing.off"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert main(["validate", "--manifest", str(bad)]) == 1


def test_metrics_identity_and_determinism(phantom_dataset, run_config, tmp_path):
    manifest = str(phantom_dataset / "manifest.json")
    out1 = tmp_path / "m1"
    out2 = tmp_path / "m2"
    assert main(
        ["metrics", "--manifest", manifest, "--config", str(run_config),
         "--out", str(out1)]
    ) == 0
    assert main(
        ["metrics", "--manifest", manifest, "--config", str(run_config),
         "--out", str(out2)]
    ) == 0

    scans = read_csv(out1 / "scans.csv")
    assert scans, "scan rows expected"
    for row in scans:
        # prediction == reference in the phantom dataset
        assert float(row["assd_mm"]) < 1e-12
        assert float(row["hd100_mm"]) < 1e-12
        assert row["sif_count"] == "0"
    subjects = read_csv(out1 / "subjects.csv")
    for row in subjects:
        assert float(row["parcf1_wm"]) == 1.0
        assert float(row["parcf1_pial"]) == 1.0
        assert float(row["mcvar_wm"]) >= 0.0

    # byte identity across reruns
    for name in ("scans.csv", "subjects.csv", "summary.json"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()
    t1 = sorted(p.name for p in (out1 / "thickness").iterdir())
    for name in t1:
        assert (out1 / "thickness" / name).read_bytes() == (
            out2 / "thickness" / name
        ).read_bytes()

    summary = json.loads((out1 / "summary.json").read_text())
    assert summary["config"]["sampling_n"] == 2000
    assert len(summary["manifest_sha256"]) == 64
    assert summary["errors"] == []


def test_metrics_summary_matches_hand_aggregation(phantom_dataset, run_config, tmp_path):
    manifest = str(phantom_dataset / "manifest.json")
    out = tmp_path / "m"
    assert main(
        ["metrics", "--manifest", manifest, "--config", str(run_config),
         "--out", str(out)]
    ) == 0
    rows = read_csv(out / "subjects.csv")
    vals = np.array([float(r["cthvar"]) for r in rows])
    summary = json.loads((out / "summary.json").read_text())
    agg = summary["subject_metrics"]["cthvar"]
    assert agg["n"] == len(vals)
    assert agg["mean"] == pytest.approx(vals.mean(), abs=1e-15)
    assert agg["sd"] == pytest.approx(vals.std(ddof=1), abs=1e-15)


def test_metrics_missing_reference_reported(phantom_dataset, run_config, tmp_path):
    doc = json.loads((phantom_dataset / "manifest.json").read_text())
    for vis in doc["subjects"][0]["visits"]:
        vis.pop("wm_ref")
        vis.pop("pial_ref")
    alt = phantom_dataset / "manifest_noref.json"
    alt.write_text(json.dumps(doc))
    out = tmp_path / "m"
    assert main(
        ["metrics", "--manifest", str(alt), "--config", str(run_config),
         "--out", str(out)]
    ) == 0  # run continues; errors reported
    summary = json.loads((out / "summary.json").read_text())
    assert any("missing wm reference" in e for e in summary["errors"])
    scans = read_csv(out / "scans.csv")
    assert {r["subject"] for r in scans} == {
        s["id"] for s in doc["subjects"][1:]
    }


def test_template_zero_fields_reproduce_template(phantom_dataset, tmp_path):
    # a manifest without field specs integrates zero fields: every output
    # equals the population template
    doc = json.loads((phantom_dataset / "manifest.json").read_text())
    for sub in doc["subjects"]:
        for vis in sub["visits"]:
            vis.pop("stage1_field")
            vis.pop("stage2_field")
    alt = phantom_dataset / "manifest_zero.json"
    alt.write_text(json.dumps(doc))
    out = tmp_path / "t"
    assert main(["template", "--manifest", str(alt), "--out", str(out)]) == 0
    template = load_mesh(phantom_dataset / "template.off")
    for sid in ("sub-000", "sub-001"):
        t = load_mesh(out / sid / "template.off")
        # averaging identical copies reproduces the input to 1 ulp
        np.testing.assert_allclose(t.vertices, template.vertices, rtol=1e-15)
        v0 = load_mesh(out / sid / "visit00_surface.off")
        # zero stage-2 field: every visit equals the subject template bitwise
        assert np.array_equal(v0.vertices, t.vertices)


def test_template_phantom_field_recovery(phantom_dataset, tmp_path):
    manifest = str(phantom_dataset / "manifest.json")
    out = tmp_path / "t"
    assert main(["template", "--manifest", manifest, "--out", str(out)]) == 0
    doc = json.loads((phantom_dataset / "manifest.json").read_text())
    for sub in doc["subjects"][:2]:
        for j, vis in enumerate(sub["visits"]):
            got = load_mesh(out / sub["id"] / f"visit{j:02d}_surface.off")
            truth = load_mesh(phantom_dataset / vis["wm"])
            assert np.abs(got.vertices - truth.vertices).max() < 1e-9
            assert got.tag == truth.tag  # connectivity preserved


def test_template_single_visit_subject(phantom_dataset, tmp_path):
    doc = json.loads((phantom_dataset / "manifest.json").read_text())
    doc["subjects"] = [dict(doc["subjects"][0])]
    visit = dict(doc["subjects"][0]["visits"][0])
    visit.pop("stage2_field")  # aggregation changes the stage-2 start point
    doc["subjects"][0]["visits"] = [visit]
    alt = phantom_dataset / "manifest_single.json"
    alt.write_text(json.dumps(doc))
    out = tmp_path / "t"
    assert main(["template", "--manifest", str(alt), "--out", str(out)]) == 0
    sid = doc["subjects"][0]["id"]
    template = load_mesh(out / sid / "template.off")
    final = load_mesh(out / sid / "visit00_surface.off")
    # single visit: the within-subject template is the stage-1 output
    truth = load_mesh(phantom_dataset / visit["wm"])
    assert np.abs(template.vertices - truth.vertices).max() < 1e-9
    assert np.array_equal(final.vertices, template.vertices)


def test_template_requires_template_entry(phantom_dataset, tmp_path):
    doc = json.loads((phantom_dataset / "manifest.json").read_text())
    doc.pop("template")
    alt = phantom_dataset / "manifest_notmpl.json"
    alt.write_text(json.dumps(doc))
    assert main(
        ["template", "--manifest", str(alt), "--out", str(tmp_path / "t")]
    ) == 1


def test_lme_pipeline_and_missing_rows(phantom_dataset, run_config, tmp_path):
    manifest = str(phantom_dataset / "manifest.json")
    mout = tmp_path / "metrics"
    assert main(
        ["metrics", "--manifest", manifest, "--config", str(run_config),
         "--out", str(mout)]
    ) == 0
    lout = tmp_path / "lme"
    assert main(
        ["lme", "--manifest", manifest, "--thickness-dir",
         str(mout / "thickness"), "--out", str(lout)]
    ) == 0
    summary = json.loads((lout / "summary.json").read_text())
    assert summary["inference"] == "wald-normal"
    assert summary["n_observations"] == 12
    beta = read_csv(lout / "beta3.csv")
    assert len(beta) == 162

    # removing one thickness file must abort with a precise message
    victim = sorted((mout / "thickness").iterdir())[2]
    victim.unlink()
    code = main(
        ["lme", "--manifest", manifest, "--thickness-dir",
         str(mout / "thickness"), "--out", str(tmp_path / "lme2")]
    )
    assert code == 1


def test_lme_constant_response_p_one(phantom_dataset, tmp_path):
    manifest_doc = json.loads((phantom_dataset / "manifest.json").read_text())
    tdir = tmp_path / "thickness"
    tdir.mkdir()
    mesh = load_mesh(
        phantom_dataset / manifest_doc["subjects"][0]["visits"][0]["wm"]
    )
    lines = ["vertex_id,value"] + [
        f"{i},2.5" for i in range(mesh.n_vertices)
    ]
    for sub in manifest_doc["subjects"]:
        for j in range(len(sub["visits"])):
            (tdir / f"{sub['id']}_visit{j:02d}.csv").write_text(
                "\n".join(lines) + "\n"
            )
    out = tmp_path / "lme"
    assert main(
        ["lme", "--manifest", str(phantom_dataset / "manifest.json"),
         "--thickness-dir", str(tdir), "--out", str(out)]
    ) == 0
    rows = read_csv(out / "neglog10p.csv")
    assert all(float(r["value"]) == 0.0 for r in rows)
    beta = read_csv(out / "beta3.csv")
    assert all(float(r["value"]) == 0.0 for r in beta)


def test_unknown_bad_spec_exit_code(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"phantom": {"level": 99}}))
    assert main(["phantom", "--spec", str(spec), "--out", str(tmp_path / "o")]) == 1
