import json

import pytest

from porohyper import artifacts as art
from porohyper.cli import _decay_time, build_parser, main


def manifest(path):
    return json.loads((path / art.MANIFEST).read_text())


def test_dimensionalize_prints_units(capsys):
    assert main(["dimensionalize", "--preset", "brain", "--quantity", "time", "--value", "1"]) == 0
    assert capsys.readouterr().out.strip() == "250 s"
    assert main(["dimensionalize", "--preset", "soil", "--quantity", "pressure", "--value", "2"]) == 0
    assert capsys.readouterr().out.strip() == "3e+06 Pa"
    assert main(["dimensionalize", "--preset", "brain", "--quantity", "pressure", "--value", "1e3",
                 "--inverse"]) == 0
    assert capsys.readouterr().out.strip() == "1"


def test_errors_are_one_structured_line(capsys, tmp_path):
    assert main(["dimensionalize", "--preset", "mars", "--quantity", "time", "--value", "1"]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: ValueError: unknown preset") and err.count("\n") == 1
    assert main(["rve-gen", "--out", str(tmp_path / "a"), "--set", "geometry.resolution=3",
                 "--set", "material.poisson_ratio=0.6"]) == 1
    err = capsys.readouterr().err
    assert "geometry.resolution" in err and "material.poisson_ratio" in err and err.count("\n") == 1
    assert not (tmp_path / "a").exists()


def test_bad_set_syntax(capsys, tmp_path):
    assert main(["rve-gen", "--out", str(tmp_path / "a"), "--set", "resolution"]) == 1
    assert "expected section.field=value" in capsys.readouterr().err


def test_missing_input_flag(capsys, tmp_path):
    assert main(["cell-fluid", "--out", str(tmp_path / "f")]) == 1
    assert "--rve: required" in capsys.readouterr().err
    assert manifest(tmp_path / "f")["status"] == "incomplete"


def test_failed_stage_is_flagged_incomplete(capsys, tmp_path):
    assert main(["rve-gen", "--out", str(tmp_path / "r"), "--set", "geometry.channel_radius=0.01"]) == 1
    assert "GeometryError" in capsys.readouterr().err
    man = manifest(tmp_path / "r")
    assert man["status"] == "incomplete" and "GeometryError" in man["error"]
    assert main(["cell-fluid", "--rve", str(tmp_path / "r"), "--out", str(tmp_path / "f")]) == 1
    assert "flagged 'incomplete'" in capsys.readouterr().err


def test_outputs_are_never_overwritten(capsys, small_pipeline):
    rve = small_pipeline["rve"]
    before = (rve / "rve.tsv").read_bytes()
    assert main(["rve-gen", "--set", "geometry.resolution=8", "--out", str(rve)]) == 1
    assert "never overwritten" in capsys.readouterr().err
    assert (rve / "rve.tsv").read_bytes() == before


def test_pipeline_manifests_link_their_inputs(small_pipeline):
    ale = manifest(small_pipeline["ale"])
    model = manifest(small_pipeline["model"])
    assert ale["status"] == "complete"
    assert ale["inputs"]["model"]["manifest_sha256"] == art.sha256_file(small_pipeline["model"] / art.MANIFEST)
    assert model["info"]["gate_passed"] is True
    assert model["info"]["holdout_max_abs_error"] <= 1e-3
    assert ale["config"]["macro"]["load"] == -0.01
    for name, d in small_pipeline.items():
        art.verify(d)


def test_pipeline_tables(small_pipeline):
    header, rows = art.read_table(small_pipeline["compare"] / "compare.tsv")
    assert header[:3] == ["step", "time", "time_s"]
    assert rows[-1][2] == pytest.approx(250.0 * rows[-1][1])
    summary = art.read_kv(small_pipeline["solid"] / "summary.tsv")
    assert float(summary["M2222"]) < 0
    header, rows = art.read_table(small_pipeline["sweep"] / "sweep.tsv")
    assert len(rows) == 3 and header[-1] == "K33"


def test_gate_failure_blocks_macro_use(capsys, small_pipeline, tmp_path):
    d = small_pipeline
    assert main(["train", "--dataset", str(d["dataset"]), "--out", str(tmp_path / "m"),
                 "--set", "training.max_epochs=2", "--set", "training.gate=1e-12"]) == 0
    assert "FAIL" in capsys.readouterr().out
    assert main(["consolidate", "--rve", str(d["rve"]), "--fluid", str(d["fluid"]), "--model", str(tmp_path / "m"),
                 "--out", str(tmp_path / "c")]) == 1
    assert "accuracy gate" in capsys.readouterr().err


@pytest.mark.parametrize("stage", ["rve", "fluid", "dataset", "model", "ale", "linear", "compare"])
def test_rerun_is_byte_identical(small_pipeline, tmp_path, stage):
    src = small_pipeline[stage]
    assert main(["rerun", str(src), "--out", str(tmp_path / "again")]) == 0
    assert manifest(tmp_path / "again")["outputs"] == manifest(src)["outputs"]


def test_config_doc(capsys):
    assert main(["config-doc"]) == 0
    assert "`macro.load`" in capsys.readouterr().out


def test_parser_lists_every_stage():
    text = build_parser().format_help()
    for name in ("rve-gen", "cell-fluid", "cell-solid", "rve-sweep", "dataset", "train", "consolidate",
                 "compare", "dimensionalize", "rerun"):
        assert name in text


def test_decay_time():
    assert _decay_time([0, 1, 2, 3], [0.0, 1.0, 0.5, 0.04]) == 3
    assert _decay_time([0, 1], [0.0, 1.0]) != _decay_time([0, 1], [0.0, 1.0])
