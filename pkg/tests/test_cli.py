import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from tcenter.cli import EXIT_INPUT, EXIT_NUMERIC, EXIT_OK, main
from tcenter.fitting import fit_ramsey, fit_stretched_exp, read_xy_csv, write_xy_csv


def _run(tmp_path, *argv, name="out"):
    out = tmp_path / name
    code = main(list(argv) + ["--out", str(out)])
    return code, out


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_catalog_lists_four_esr_lines(tmp_path):
    code, out = _run(tmp_path, "catalog", "--preset", "paper-T1")
    assert code == EXIT_OK
    rows = _rows(out / "transitions.csv")
    assert sum(r["kind"] == "electron_flipping_nuclear_conserving" for r in rows) == 4
    assert (out / "levels.csv").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert {f["name"] for f in manifest["files"]} == {"transitions.csv", "levels.csv"}


def test_catalog_nucleus_free_config(tmp_path):
    cfg = tmp_path / "bare.ini"
    cfg.write_text("[register]\nb_field_t = 0.26\n", encoding="utf-8")
    code, out = _run(tmp_path, "catalog", "--config", str(cfg))
    assert code == EXIT_OK
    assert len(_rows(out / "transitions.csv")) == 1


def test_full_mode_adds_nuclear_flipping_rows(tmp_path):
    counts = {}
    for mode in ("secular", "full"):
        code, out = _run(tmp_path, "catalog", "--mode", mode, "--drive-threshold", "1e-9", name=mode)
        assert code == EXIT_OK
        counts[mode] = sum(r["kind"] == "nuclear_flipping" for r in _rows(out / "transitions.csv"))
    assert counts["full"] > counts["secular"]


def test_bad_config_is_line_anchored(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[register]\nb_field_t = 0.26\nbogus = 1\n", encoding="utf-8")
    code, _ = _run(tmp_path, "catalog", "--config", str(cfg))
    assert code == EXIT_INPUT
    assert f"{cfg}:3:" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["simulate", "bogus"], ["simulate", "ramsey", "--noise", "nope"],
                                  ["simulate", "ramsey", "--values", "1:0"], ["catalog", "--preset", "x"],
                                  ["fit", "stretched", "/nonexistent.csv"], ["frobnicate"]])
def test_input_errors_exit_2(tmp_path, argv):
    assert _run(tmp_path, *argv)[0] == EXIT_INPUT


def test_ramsey_fringe_at_virtual_detuning(tmp_path):
    code, out = _run(tmp_path, "simulate", "ramsey", "--virtual-detuning", "5MHz")
    assert code == EXIT_OK
    x, y, err = read_xy_csv((out / "sweep.csv").read_text())
    assert err is None
    assert fit_ramsey(x, y).freq == pytest.approx(5.0, abs=1e-3)


def test_xy8_outlives_hahn_echo(tmp_path):
    t2 = {}
    for kind in ("hahn_echo", "xy8"):
        code, out = _run(tmp_path, "simulate", kind, "--noise", "electron-ou", "--traj", "200",
                         "--values", "0:4000:21", name=kind)
        assert code == EXIT_OK
        x, y, err = read_xy_csv((out / "sweep.csv").read_text())
        assert err is not None
        t2[kind] = fit_stretched_exp(x, y, fix_offset=0.0).t2
    assert t2["xy8"] > t2["hahn_echo"]


def test_bell_tomography_feeds_fit(tmp_path, capsys):
    code, out = _run(tmp_path, "simulate", "bell-tomography", "--state", "phi-minus")
    assert code == EXIT_OK
    assert json.loads((out / "tomography.json").read_text())["fidelity"] == pytest.approx(1.0, abs=1e-6)
    code, fit_out = _run(tmp_path, "fit", "bell-offdiag", str(out / "sweep.csv"), "--state", "phi-", name="fit")
    assert code == EXIT_OK
    assert json.loads((fit_out / "fit.json").read_text())["re"] == pytest.approx(-0.5, abs=1e-6)


def test_fit_dd_scaling_reference_points(tmp_path):
    data = tmp_path / "fig2c.csv"
    data.write_text("N,T_ms\n1,0.411\n2,0.623\n4,1.33\n8,1.68\n", encoding="utf-8")
    code, out = _run(tmp_path, "fit", "dd-scaling", str(data))
    assert code == EXIT_OK
    assert 0.55 <= json.loads((out / "fit.json").read_text())["exponent"] <= 0.72


def test_fit_stretched_fixed_exponent(tmp_path):
    t = np.linspace(0, 1.5, 30)
    data = tmp_path / "echo.csv"
    data.write_text(write_xy_csv(t, np.exp(-(t / 0.411) ** 2.5)), encoding="utf-8")
    code, out = _run(tmp_path, "fit", "stretched", str(data), "--fix-n", "2.5")
    assert code == EXIT_OK
    result = json.loads((out / "fit.json").read_text())
    assert result["t2"] == pytest.approx(0.411, rel=1e-6)
    assert len(result["covariance"]) == 4


def test_fit_failure_exits_3(tmp_path, capsys):
    data = tmp_path / "flat.csv"
    data.write_text("".join(f"{k},{math.exp(-k / 5)}\n" for k in range(12)), encoding="utf-8")
    code, _ = _run(tmp_path, "fit", "ramsey", str(data))
    assert code == EXIT_NUMERIC
    assert "numerical failure" in capsys.readouterr().err
    data.write_text("2,1\n2,1.1\n2,0.9\n", encoding="utf-8")
    assert _run(tmp_path, "fit", "dd-scaling", str(data))[0] == EXIT_NUMERIC


def test_hyperfine_census(tmp_path, capsys):
    code, out = _run(tmp_path, "hyperfine", "--samples", "20000")
    assert code == EXIT_OK
    stats = json.loads((out / "hyperfine.json").read_text())
    by = {e["threshold"]: e for e in stats["thresholds"]}
    assert by[1.0]["count"] == 46 and by[2.0]["count"] == 26
    assert by[2.0]["expected"] == pytest.approx(1.21, abs=0.01)
    assert "28" in capsys.readouterr().out


def test_hyperfine_zero_abundance(tmp_path):
    code, out = _run(tmp_path, "hyperfine", "--abundance", "0", "--threshold", "1", "--samples", "100")
    assert code == EXIT_OK
    assert json.loads((out / "hyperfine.json").read_text())["thresholds"][0]["expected"] == 0


def test_hyperfine_table_error_exit_2(tmp_path, capsys):
    bad = tmp_path / "t.csv"
    bad.write_text("label,distance_a,a_zz_mhz,a_xz_left_mhz,a_xz_right_mhz\nA,,x,1,\n", encoding="utf-8")
    assert _run(tmp_path, "hyperfine", "--table", str(bad))[0] == EXIT_INPUT
    assert ":2:" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["hyperfine", "--samples", "5000", "--seed", "3"],
    ["simulate", "hahn_echo", "--noise", "electron-ou", "--traj", "20", "--values", "0:2000:5", "--seed", "4"],
    ["simulate", "bell-tomography", "--budget", "error-budget", "--readout", "default", "--shots", "500"],
    ["catalog"],
])
def test_replay_is_byte_identical(tmp_path, argv):
    code, out = _run(tmp_path, *argv)
    assert code == EXIT_OK
    assert main(["replay", str(out / "manifest.json"), "--out", str(tmp_path / "again")]) == EXIT_OK
    for f in json.loads((out / "manifest.json").read_text())["files"]:
        assert (out / f["name"]).read_bytes() == (tmp_path / "again" / f["name"]).read_bytes()


def test_replay_detects_tampering(tmp_path):
    code, out = _run(tmp_path, "hyperfine", "--samples", "100")
    manifest = json.loads((out / "manifest.json").read_text())
    manifest["files"][0]["sha256"] = "0" * 64
    (out / "manifest.json").write_text(json.dumps(manifest))
    assert main(["replay", str(out / "manifest.json")]) == EXIT_NUMERIC
    (out / "manifest.json").write_text("{not json")
    assert main(["replay", str(out / "manifest.json")]) == EXIT_INPUT


def test_replay_rejects_changed_config(tmp_path):
    cfg = tmp_path / "r.ini"
    cfg.write_text("[register]\nb_field_t = 0.26\n", encoding="utf-8")
    code, out = _run(tmp_path, "catalog", "--config", str(cfg))
    assert code == EXIT_OK
    cfg.write_text("[register]\nb_field_t = 0.27\n", encoding="utf-8")
    assert main(["replay", str(out / "manifest.json")]) == EXIT_INPUT


def test_out_directory_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("TCENTER_OUT", str(tmp_path / "env"))
    assert main(["hyperfine", "--samples", "100"]) == EXIT_OK
    assert (tmp_path / "env" / "hyperfine.json").exists()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "tcenter", "hyperfine", "--samples", "100", "--out", str(tmp_path)],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0, proc.stderr
    assert "46 sites" in proc.stdout


def test_default_transition_follows_register_size(tmp_path):
    cfg = tmp_path / "h.ini"
    cfg.write_text("[register]\nb_field_t = 0.2601\n\n[nucleus.H]\na_zz = -2.136\n", encoding="utf-8")
    code, out = _run(tmp_path, "simulate", "ramsey", "--config", str(cfg), "--values", "0:1:11")
    assert code == EXIT_OK
    code, out = _run(tmp_path, "simulate", "nmr", "--config", str(cfg), name="nmr")
    assert code == EXIT_OK
    x, y, _ = read_xy_csv((out / "sweep.csv").read_text())
    assert x[np.argmax(y)] == pytest.approx(11.074 - 1.068, abs=2e-3)
