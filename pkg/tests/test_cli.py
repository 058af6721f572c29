import json
import subprocess
import sys

import pytest

from cbma import cli
from cbma.data import load_foci_csv
from cbma.io import read_volume

from conftest import DATA

TABLE1 = str(DATA / "table1.csv")


def run(argv, capsys=None):
    code = cli.main([str(a) for a in argv])
    err = capsys.readouterr().err if capsys is not None else ""
    return code, err


def parse(argv):
    return cli.resolve(cli.build_parser().parse_args(argv))


class TestConfig:
    def test_defaults_and_presets(self):
        cfg = parse(["analyze", TABLE1, "--out", "x"])
        assert cfg["kernel"] == "ale" and cfg["inference"] == "fdr"
        cfg = parse(["analyze", TABLE1, "--out", "x", "--preset", "paper-mkda"])
        assert (cfg["kernel"], cfg["radius"], cfg["inference"], cfg["n_iter"]) == ("mkda", 10.0, "fwe", 10000)
        cfg = parse(["analyze", TABLE1, "--out", "x", "--preset", "paper-sdm"])
        assert (cfg["sigma"], cfg["inference"], cfg["p_cut"]) == ("20", "fixed", 0.001)
        cfg = parse(["power", "--out", "x", "--preset", "paper-sim"])
        assert cfg["B"] == 1000 and len(cli._grid(cfg["p_grid"], float)) == 21
        assert cli._grid(cfg["i_grid"], int) == [20, 40, 60, 80, 100, 120]

    def test_power_desk_defaults(self):
        cfg = parse(["power", "--out", "x"])
        assert len(cli._grid(cfg["i_grid"], int)) * len(cli._grid(cfg["p_grid"], float)) == 15
        assert cfg["B"] == 100 and cfg["mask"] == "default-4mm"

    def test_layering(self, tmp_path):
        conf = tmp_path / "run.conf"
        conf.write_text("# settings\nkernel = mkda\nradius = 8\nalpha = '0.01'\n")
        cfg = parse(["analyze", TABLE1, "--out", "x", "--preset", "paper-ale", "--config", str(conf),
                     "--radius", "6"])
        assert cfg["kernel"] == "mkda" and cfg["alpha"] == 0.01 and cfg["radius"] == 6.0

    def test_bad_config(self, tmp_path):
        conf = tmp_path / "bad.conf"
        conf.write_text("no equals sign here\n")
        with pytest.raises(cli.CLIError):
            cli.read_config_file(conf)


def test_analyze_outputs(tmp_path, capsys):
    out = tmp_path / "ale"
    code, err = run(["analyze", TABLE1, "--mask", "default-4mm", "--sigma", "6", "--seed", "1",
                     "--format", "both", "--out", out], capsys)
    assert code == 0, err
    for stem in ("stat", "p_uncorrected", "p_corrected", "significant"):
        assert (out / f"{stem}.nii").exists() and (out / f"{stem}.vgrid").exists()
    prov = json.loads((out / "provenance.json").read_text())
    assert prov["seed"] == 1 and prov["rerun"][:2] == ["cbma", "analyze"]
    assert "jobs" not in prov["config"]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_studies"] == 6 and summary["n_foci"] == 13
    assert (out / "clusters.csv").read_text().startswith("cluster,size,")
    stat = read_volume(out / "stat.vgrid")
    assert stat.data.max() > 0


def test_rerun_reproduces(tmp_path, capsys):
    out = tmp_path / "a"
    assert run(["analyze", TABLE1, "--mask", "default-4mm", "--kernel", "mkda", "--inference", "fwe",
                "--n-iter", "100", "--format", "vgrid", "--out", out], capsys)[0] == 0
    prov = json.loads((out / "provenance.json").read_text())
    argv = prov["rerun"][1:]
    argv[argv.index("--out") + 1] = str(tmp_path / "b")
    assert run(argv, capsys)[0] == 0
    for name in ("stat.vgrid", "p_corrected.vgrid", "significant.vgrid"):
        assert (out / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_fwe_cache(tmp_path, capsys):
    args = ["analyze", TABLE1, "--mask", "default-4mm", "--kernel", "mkda", "--inference", "fwe",
            "--n-iter", "100", "--seed", "3", "--format", "vgrid", "--cache-dir", tmp_path / "cache"]
    assert run(args + ["--out", tmp_path / "a"], capsys)[0] == 0
    cached = list((tmp_path / "cache").glob("mcnull-*.npz"))
    assert len(cached) == 1
    assert run(args + ["--out", tmp_path / "b"], capsys)[0] == 0
    assert (tmp_path / "a/p_corrected.vgrid").read_bytes() == (tmp_path / "b/p_corrected.vgrid").read_bytes()
    # a cache file for another configuration is refused
    with pytest.raises(cli.CLIError, match="cache mismatch"):
        cli.load_null(cached[0], {"something": "else"})


def test_null_command(tmp_path, capsys):
    code, err = run(["null", TABLE1, "--mask", "default-4mm", "--kernel", "mkda", "--n-iter", "100",
                     "--seed", "2", "--out", tmp_path], capsys)
    assert code == 0, err
    nulls = cli.load_null(tmp_path / "null.npz")
    assert nulls.max_stat.n_iter == 100 and nulls.max_stat.method == "MKDA"


def test_empty_dataset_analyze(tmp_path, capsys):
    csv = tmp_path / "empty.csv"
    csv.write_text("Author,Year,Label,X,Y,Z,Participants\nA,2001,x,,,,10\nB,2002,x,,,,12\n")
    code, err = run(["analyze", csv, "--mask", "default-4mm", "--sigma", "4", "--format", "vgrid",
                     "--out", tmp_path / "o"], capsys)
    assert code == 0, err
    summary = json.loads((tmp_path / "o/summary.json").read_text())
    assert summary["n_significant"] == 0 and summary["n_clusters"] == 0 and summary["n_foci"] == 0
    assert read_volume(tmp_path / "o/stat.vgrid").data.max() == 0


def test_simulate_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(["simulate", "--mask", "default-4mm", "--seed", "7", "--n-studies", "12",
                    "--valid-fraction", "0.5", "--out", tmp_path / name], capsys)[0] == 0
    assert (tmp_path / "a/foci.csv").read_bytes() == (tmp_path / "b/foci.csv").read_bytes()
    data = load_foci_csv(tmp_path / "a/foci.csv")
    assert [s.label for s in data.studies].count("valid") == 6
    truth = json.loads((tmp_path / "a/truth.json").read_text())
    assert len(truth["studies"]) == 12


def test_power_command(tmp_path, capsys):
    code, err = run(["power", "--seed", "1", "--i-grid", "10", "--p-grid", "0,1", "--B", "2",
                     "--out", tmp_path], capsys)
    assert code == 0, err
    assert len(list(tmp_path.glob("*.svg"))) == 8
    assert (tmp_path / "report.csv").read_text().count("\n") == 3


def test_convert_round_trip(tmp_path, capsys):
    run(["analyze", TABLE1, "--mask", "default-4mm", "--sigma", "6", "--seed", "1", "--format", "vgrid",
         "--out", tmp_path], capsys)
    src = tmp_path / "stat.vgrid"
    assert run(["convert", src, tmp_path / "stat.nii"], capsys)[0] == 0
    assert run(["convert", tmp_path / "stat.nii", tmp_path / "back.vgrid"], capsys)[0] == 0
    assert src.read_bytes() == (tmp_path / "back.vgrid").read_bytes()


@pytest.mark.parametrize("argv,kind", [
    (["analyze", "missing.csv", "--out", "{tmp}"], "FileNotFoundError"),
    (["analyze", TABLE1, "--kernel", "sdm", "--mask", "default-4mm", "--out", "{tmp}"], "CLIError"),
    (["analyze", TABLE1, "--kernel", "sdm", "--sigma", "4", "--mask", "default-4mm", "--out", "{tmp}"],
     "MissingTValue"),
    (["analyze", TABLE1, "--inference", "fwe", "--n-iter", "10", "--out", "{tmp}"], "CLIError"),
])
def test_error_records(tmp_path, capsys, argv, kind):
    code, err = run([a.replace("{tmp}", str(tmp_path)) for a in argv], capsys)
    assert code == 1
    lines = err.strip().splitlines()
    record = json.loads(lines[-1])
    assert record["error"] == kind and record["command"] == "analyze" and record["message"]


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "cbma", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "cbma" in proc.stdout


def test_mask_atlas_mismatch_warns(tmp_path, caplog):
    import nibabel as nib
    import numpy as np

    from cbma.data import ellipsoid_mask
    from cbma.io import nifti_space

    m = ellipsoid_mask(4.0).grid
    affine = np.diag([*m.voxel_size, 1.0])
    affine[:3, 3] = m.origin
    img = nib.Nifti1Image(m.data.astype(np.uint8), affine)
    img.set_sform(affine, code=4)
    nib.save(img, tmp_path / "mni.nii")
    assert nifti_space(tmp_path / "mni.nii") == "MNI"

    csv = tmp_path / "foci.csv"
    csv.write_text((DATA / "table1.csv").read_text())
    (tmp_path / "foci.csv.json").write_text(json.dumps({"atlas": "Talairach"}))
    with caplog.at_level("WARNING", logger="cbma"):
        code = cli.main(["analyze", str(csv), "--mask", str(tmp_path / "mni.nii"), "--sigma", "4",
                         "--format", "vgrid", "--out", str(tmp_path / "o")])
    assert code == 0
    assert "MNI space but the dataset is tagged Talairach" in caplog.text
