import argparse
import json
import subprocess
import sys

import numpy as np
import pytest

from liverseg import augment as aug
from liverseg.cli import build_parser, main
from liverseg.phantom import PhantomConfig, generate_phantom
from liverseg.volume_io import load, save

from pipeline import run_pipeline


def fake_manifest(path, n):
    entries = [{"id": f"case{i:03d}", "image": f"case{i:03d}_image.nii", "labels": f"case{i:03d}_labels.nii",
                "provenance": {"kind": "original"}} for i in range(n)]
    aug.write_manifest(entries, path)


@pytest.fixture(scope="module")
def case_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("case")
    case = generate_phantom(PhantomConfig(dims=(8, 16, 16), warp_magnitude=1.0), seed=1)
    save(case.image, d / "img.nii")
    save(case.labels, d / "lab.nii")
    return d


def test_evaluate_perfect(tmp_path, case_files, capsys):
    lab = str(case_files / "lab.nii")
    assert main(["evaluate", "--pred", lab, "--truth", lab, "--out", str(tmp_path / "r")]) == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert "1.000" in capsys.readouterr().out
    rows = (tmp_path / "r.csv").read_text().splitlines()[1:10]
    assert all(r.split(",")[2] == "1.000" for r in rows)
    assert report


def test_augment_dry_run_counts(tmp_path, capsys):
    m = tmp_path / "m.json"
    fake_manifest(m, 87)
    assert main(["augment", "--manifest", str(m), "--templates", "case000", "--out", str(tmp_path / "o"),
                 "--dry-run"]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "synthesized: 172"
    assert main(["augment", "--manifest", str(m), "--templates", "case000,case001", "--templates", "case002",
                 "--out", str(tmp_path / "o"), "--dry-run"]) == 0
    out = capsys.readouterr().out
    assert "synthesized: 516" in out and "510" in out
    assert not (tmp_path / "o").exists()


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as e:
        main(["evaluate", "--bogus"])
    assert e.value.code == 2
    assert "usage:" in capsys.readouterr().err


def test_data_errors_exit_1(tmp_path, capsys):
    assert main(["evaluate", "--pred", str(tmp_path / "none.nii"), "--truth", str(tmp_path / "x.nii"),
                 "--out", str(tmp_path / "r")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("liverseg: error:") and err.count("\n") == 1
    (tmp_path / "junk.nii").write_bytes(b"\0" * 100)
    assert main(["view", "--in", str(tmp_path / "junk.nii"), "--index", "0", "--out", str(tmp_path / "v.pgm")]) == 1
    m = tmp_path / "m.json"
    fake_manifest(m, 3)
    assert main(["augment", "--manifest", str(m), "--templates", "nope", "--out", str(tmp_path / "o")]) == 1


def test_config_error_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("train.nope = 1\n")
    assert main(["phantom", "gen", "--n", "1", "--out", str(tmp_path / "p"), "--config", str(bad)]) == 2
    assert "config error" in capsys.readouterr().err


def _subparsers(parser, prefix=()):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for name, sp in action.choices.items():
                has_children = any(isinstance(a, argparse._SubParsersAction) for a in sp._actions)
                if has_children:
                    yield from _subparsers(sp, prefix + (name,))
                else:
                    yield prefix + (name,), sp


def test_help_covers_every_flag():
    subs = list(_subparsers(build_parser()))
    assert {" ".join(n) for n, _ in subs} >= {"phantom gen", "preprocess", "register", "augment", "train",
                                               "predict", "evaluate", "compare", "view"}
    for name, sp in subs:
        text = sp.format_help()
        for action in sp._actions:
            for opt in action.option_strings:
                assert opt in text, (name, opt)
            if action.option_strings and action.dest != "help":
                assert action.help, (name, action.dest)


def test_view_and_register(tmp_path, case_files):
    img = str(case_files / "img.nii")
    assert main(["view", "--in", img, "--axis", "coronal", "--index", "3", "--out", str(tmp_path / "v.pgm")]) == 0
    assert (tmp_path / "v.pgm").read_bytes().startswith(b"P5")
    cfg = tmp_path / "r.cfg"
    cfg.write_text("augment.pyramid_levels = 1\naugment.iterations_per_level = 2\n")
    assert main(["register", "--fixed", img, "--moving", img, "--out-field", str(tmp_path / "v.bin"),
                 "--config", str(cfg)]) == 0


def test_preprocess_subcommand(tmp_path, case_files):
    case = aug.LabeledCase("c", load(case_files / "img.nii", kind="image"), load(case_files / "lab.nii", kind="labels"))
    m = aug.write_dataset([case], tmp_path / "in")
    cfg = tmp_path / "p.cfg"
    cfg.write_text("preprocess.target_dims = 8 8 8\npreprocess.normalization = minmax\n")
    assert main(["preprocess", "--in", str(m), "--out", str(tmp_path / "out"), "--config", str(cfg)]) == 0
    (back,) = aug.load_dataset(tmp_path / "out" / "manifest.json")
    assert back.dims == (8, 8, 8)
    assert back.image.data.min() >= 0 and back.image.data.max() <= 1


def test_pipeline_idempotent_and_compare(tmp_path, capsys):
    first = run_pipeline(tmp_path / "a")
    snapshot = {p: p.read_bytes() for p in (tmp_path / "a").rglob("*") if p.is_file()}
    again = run_pipeline(tmp_path / "a")
    assert first == again
    for p, data in snapshot.items():
        assert p.read_bytes() == data, p
    split = json.loads((tmp_path / "a" / "run" / "split.json").read_text())
    assert sum(len(v) for v in split.values()) >= 4
    r = str(tmp_path / "a" / "report.json")
    capsys.readouterr()
    assert main(["compare", "--reports", r, r, "--out", str(tmp_path / "cmp.json")]) == 0
    assert json.loads((tmp_path / "cmp.json").read_text())


def test_console_script_runs():
    out = subprocess.run([sys.executable, "-m", "liverseg.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "phantom" in out.stdout
