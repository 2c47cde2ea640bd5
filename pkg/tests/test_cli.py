"""End-to-end runs of the levyfp command line driver."""

import filecmp
import os

import pytest

from levyfp.cli import derive_seed, main

BASE = """\
schema = 1
seed = 7
run = ["validate", "lemmas", "assemble", "certify", "evolve"]

[model]
d = 1
K = 1.0
alpha = 1.0

  [model.drift]
  kind = "ou"

  [model.sigma]
  kind = "constant"
  value = 1.0

  [model.jump]
  kind = "geometric"

[measure]
atoms = [[0.25, 0.25]]

  [measure.density]
  c = 0.05
  beta = 0.5
  z_max = 0.25

[grid]
x_max = 8.0
h = 0.04

[split]
r = 0.0625

[evolution]
T = 0.1
dt = 0.02
u0_center = 0.5
u0_sigma = 0.05

[certify]
lambdas = [0.5, 2.0]
n_functions = 10
"""


def write_config(tmp_path, text=BASE, name="run.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_full_pipeline_passes(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    rc = main(["run", cfg, "--out", str(out)])
    stdout = capsys.readouterr().out
    assert rc == 0
    assert "checks passed" in stdout
    assert "[FAIL]" not in stdout
    for name in ("summary.csv", "validate.csv", "lemmas.csv", "assemble.csv",
                 "certify.csv", "evolution.csv", "final_density.txt"):
        assert (out / name).is_file(), name


def test_reruns_are_byte_identical(tmp_path):
    cfg = write_config(tmp_path)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["run", cfg, "--out", str(out1)]) == 0
    assert main(["run", cfg, "--out", str(out2)]) == 0
    names = sorted(os.listdir(out1))
    assert names == sorted(os.listdir(out2))
    match, mismatch, errors = filecmp.cmpfiles(out1, out2, names,
                                               shallow=False)
    assert mismatch == [] and errors == []


def test_stage_flag_pulls_dependencies(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    rc = main(["run", cfg, "--out", str(out), "--stage", "certify"])
    assert rc == 0
    summary = (out / "summary.csv").read_text()
    # certify cannot run without the assembled operators
    assert "assemble," in summary
    assert "certify," in summary
    assert "validate," not in summary


def test_default_out_dir_next_to_config(tmp_path):
    cfg = write_config(tmp_path, name="small.toml")
    rc = main(["run", cfg, "--stage", "validate"])
    assert rc == 0
    assert (tmp_path / "small_out" / "summary.csv").is_file()


def test_mc_compare_stage(tmp_path):
    text = BASE.replace('run = ["validate", "lemmas", "assemble", '
                        '"certify", "evolve"]',
                        'run = ["mc_compare"]')
    text += "\n[mc]\nn_paths = 4000\nn_steps = 20\ntol = 0.5\n"
    cfg = write_config(tmp_path, text)
    out = tmp_path / "out"
    rc = main(["run", cfg, "--out", str(out)])
    assert rc == 0
    assert (out / "mc_compare.csv").is_file()
    assert (out / "evolution.csv").is_file()


def test_unknown_key_is_rejected_with_line(tmp_path, capsys):
    text = BASE.replace("seed = 7", "seed = 7\nbogus_key = 3")
    cfg = write_config(tmp_path, text, name="bad.toml")
    rc = main(["run", cfg])
    err = capsys.readouterr().err
    assert rc == 2
    assert "bad.toml:3" in err
    assert "bogus_key" in err


def test_inadmissible_radius_rejected(tmp_path, capsys):
    text = BASE.replace("r = 0.0625", "r = 0.3")
    cfg = write_config(tmp_path, text)
    rc = main(["run", cfg])
    err = capsys.readouterr().err
    assert rc == 2
    assert "1/(8 d K)" in err


def test_schema_version_required(tmp_path, capsys):
    cfg = write_config(tmp_path, BASE.replace("schema = 1", "schema = 2"))
    rc = main(["run", cfg])
    assert rc == 2
    assert "schema = 1" in capsys.readouterr().err


def test_unknown_stage_rejected(tmp_path, capsys):
    text = BASE.replace('"evolve"]', '"evolve", "warp"]')
    cfg = write_config(tmp_path, text)
    rc = main(["run", cfg])
    assert rc == 2
    assert "warp" in capsys.readouterr().err


def test_u0_too_close_to_boundary(tmp_path, capsys):
    text = BASE.replace("u0_center = 0.5", "u0_center = 6.5")
    cfg = write_config(tmp_path, text)
    rc = main(["run", cfg])
    err = capsys.readouterr().err
    assert rc == 2
    assert "u0_sigma" in err or "clearance" in err


def test_missing_required_key(tmp_path, capsys):
    text = BASE.replace("x_max = 8.0\n", "")
    cfg = write_config(tmp_path, text)
    rc = main(["run", cfg])
    assert rc == 2
    assert "x_max" in capsys.readouterr().err


def test_unreadable_config(tmp_path, capsys):
    rc = main(["run", str(tmp_path / "nope.toml")])
    assert rc == 2
    assert "cannot read" in capsys.readouterr().err


def test_malformed_toml(tmp_path, capsys):
    cfg = write_config(tmp_path, "=== not toml ===\n")
    rc = main(["run", cfg])
    assert rc == 2


def test_derive_seed_is_stable():
    # stage seeds are documented as reproducible across runs and platforms
    assert derive_seed(7, "assemble") == derive_seed(7, "assemble")
    assert derive_seed(7, "assemble") != derive_seed(7, "pairing")
    assert derive_seed(8, "assemble") != derive_seed(7, "assemble")


def test_auto_radius(tmp_path):
    text = BASE.replace("r = 0.0625", 'r = "auto"')
    cfg = write_config(tmp_path, text)
    out = tmp_path / "out"
    assert main(["run", cfg, "--out", str(out), "--stage", "assemble"]) == 0
