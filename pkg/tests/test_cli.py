import json
import subprocess
import sys

import numpy as np
import pytest

from panfield.cli import EXIT_CODES, main
from panfield.dataset_io import load_dataset, read_u16

from conftest import TINY


def error_record(capsys):
    line = [l for l in capsys.readouterr().err.splitlines() if l.startswith("panfield-error ")][-1]
    return json.loads(line[len("panfield-error "):])


def tiny_ini(path, dataset, iterations=2):
    lines = ["[data]", f"dataset = {dataset}", "[train]", f"iterations = {iterations}"]
    lines += [f"{k} = {v}" for k, v in TINY.items() if k not in ("holdout_every",)]
    lines += ["holdout_every = 3"]
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--scene", "three-boxes", "--views", "4", "--res", "16x16", "--permute-instances",
                 "--seed", "3", "--out", str(root / "ds")]) == 0
    cfg = tiny_ini(root / "run.ini", root / "ds")
    assert main(["train", "--config", str(cfg), "--seed", "1", "--out", str(root / "run")]) == 0
    return root


def test_synth_writes_a_loadable_dataset(pipeline):
    ds = load_dataset(pipeline / "ds")
    assert len(ds.frames) == 4 and ds.frames[0].color.shape == (16, 16, 3)
    assert ds.has_gt


def test_train_writes_checkpoint_log_and_config(pipeline):
    run = pipeline / "run"
    assert (run / "checkpoint" / "manifest.txt").is_file()
    assert len((run / "train_log.tsv").read_text().splitlines()) == 3
    assert "iterations = 2" in (run / "config.ini").read_text()
    assert "seed = 1" in (run / "config.ini").read_text()


def test_cli_flag_overrides_config_file(pipeline, tmp_path):
    assert main(["train", "--config", str(pipeline / "run.ini"), "--iterations", "1", "--out", str(tmp_path)]) == 0
    assert "iterations = 1" in (tmp_path / "config.ini").read_text()


def test_render_by_frame_and_orbit_is_repeatable(pipeline, tmp_path):
    ck = str(pipeline / "run" / "checkpoint")
    assert main(["render", "--checkpoint", ck, "--frame", "2", "--dataset", str(pipeline / "ds"),
                 "--out", str(tmp_path / "a")]) == 0
    assert main(["render", "--checkpoint", ck, "--frame", "2", "--out", str(tmp_path / "b")]) == 0
    for suffix in (".ppm", ".sem.u16", ".inst.u16", ".depth.f32", ".vis.ppm"):
        a = (tmp_path / "a" / f"frame_0002{suffix}").read_bytes()
        assert a == (tmp_path / "b" / f"frame_0002{suffix}").read_bytes()
    assert main(["render", "--checkpoint", ck, "--camera", "orbit:n=8,res=6x5", "--out", str(tmp_path / "o")]) == 0
    assert len(list((tmp_path / "o").glob("view_*.sem.u16"))) == 8
    assert read_u16(tmp_path / "o" / "view_0007.sem.u16").shape == (5, 6)


def test_eval_writes_reports(pipeline, tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(pipeline / "run" / "checkpoint"), "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "eval_report.json").read_text())
    assert report["views"] == [2]
    assert abs(report["pq"] - report["sq"] * report["rq"]) < 1e-9
    assert "psnr" in capsys.readouterr().out


def test_gradcheck_subset_passes(tmp_path, capsys):
    assert main(["gradcheck", "--terms", "color,disp", "--n-probe", "2", "--out", str(tmp_path)]) == 0
    assert "disp" in (tmp_path / "gradcheck.txt").read_text()


def test_gradcheck_failure_exits_with_offenders(capsys):
    # a huge step turns the central difference into a poor estimate
    assert main(["gradcheck", "--terms", "color", "--h", "0.5", "--tolerance", "1e-12"]) == EXIT_CODES["gradcheck"]
    rec = error_record(capsys)
    assert rec["kind"] == "gradcheck" and "color/" in rec["message"]


@pytest.mark.parametrize("argv, kind", [
    (["train", "--config", "/nonexistent.ini"], "load"),
    (["train"], "usage"),
    (["render", "--checkpoint", "/nonexistent"], "load"),
    (["synth", "--res", "tall", "--out", "x"], "parse"),
    (["synth", "--flip", "2", "--out", "x"], "validation"),
    (["eval"], "usage"),
    (["fly"], "usage"),
    (["gradcheck", "--terms", "colour"], "usage"),
])
def test_errors_print_one_machine_readable_line(argv, kind, capsys):
    code = main(argv)
    assert code == EXIT_CODES[kind] and code != 0
    rec = error_record(capsys)
    assert rec["kind"] == kind and rec["code"] == code


def test_render_needs_exactly_one_camera_source(pipeline, capsys):
    ck = str(pipeline / "run" / "checkpoint")
    assert main(["render", "--checkpoint", ck]) == EXIT_CODES["usage"]
    assert main(["render", "--checkpoint", ck, "--camera", "orbit:n=1", "--frame", "0"]) == EXIT_CODES["usage"]
    assert main(["render", "--checkpoint", ck, "--camera", "circle"]) == EXIT_CODES["parse"]


def test_console_script_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "panfield.cli", "synth", "--views", "2", "--res", "8x8",
                          "--out", str(tmp_path / "d")], capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    bad = subprocess.run([sys.executable, "-m", "panfield.cli", "render"], capture_output=True, text=True)
    assert bad.returncode == 2 and "panfield-error" in bad.stderr
