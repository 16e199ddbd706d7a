import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from antibunch.cli import main
from antibunch.io import parse_table, read_histogram, read_timestamps
from antibunch.physics import g2_resonant_weak_expsum
from antibunch.irf import IrfParams

FIX = Path(__file__).parent / "fixtures"
CLI = [sys.executable, "-m", "antibunch.cli"]


def run(*argv):
    return main([str(a) for a in argv])


def report(path):
    return json.loads(Path(path).read_text())


def test_simulate_is_deterministic(tmp_path):
    a, b = tmp_path / "a.abt", tmp_path / "b.abt"
    assert run("simulate", FIX / "auto_cross.json", "--out", a) == 0
    assert run("simulate", FIX / "auto_cross.json", "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()
    assert run("simulate", FIX / "auto_cross.json", "--out", b, "--seed", 12) == 0
    assert a.read_bytes() != b.read_bytes()
    man = report(str(a) + ".manifest.json")
    assert man["seed"] == 11 and man["config"]["emitter"]["t1_ps"] == 670
    assert set(man["outputs"]) == {str(a)} and str(FIX / "auto_cross.json") in man["inputs"]


def test_zero_drive_gives_empty_stream_and_warning(tmp_path, capsys):
    out = tmp_path / "z.abt"
    assert run("simulate", FIX / "zero_drive.json", "--out", out) == 0
    assert "warning" in capsys.readouterr().err
    st = read_timestamps(out)
    assert len(st.times) == 0


def test_config_error_names_key(tmp_path, capsys):
    cfg = json.loads((FIX / "zero_drive.json").read_text())
    cfg["emitter"]["t3_ps"] = 1
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(cfg))
    assert run("simulate", p, "--out", tmp_path / "x") == 2
    assert "emitter.t3_ps" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_usage_errors_exit_2(tmp_path):
    assert run("frobnicate") == 2
    assert run("correlate", "x", "--out", "-") == 2
    assert run("correlate", "x", "--start-ch", 0, "--stop-ch", 1, "--bin-ps", 0,
               "--window-ps", 10, "--out", "-") in (1, 2)


def test_missing_channel_exits_1(tmp_path, capsys):
    st = tmp_path / "s.abt"
    run("simulate", FIX / "auto_cross.json", "--out", st)
    assert run("correlate", st, "--start-ch", 0, "--stop-ch", 5, "--bin-ps", 50,
               "--window-ps", 1000, "--out", tmp_path / "h.csv") == 1
    assert "channel 5" in capsys.readouterr().err


def test_raw_then_normalize_equals_one_shot(tmp_path):
    st = tmp_path / "s.abt"
    run("simulate", FIX / "auto_cross.json", "--out", st)
    args = ["--start-ch", 0, "--stop-ch", 1, "--bin-ps", 64, "--window-ps", 3000]
    run("correlate", st, *args, "--raw", "--out", tmp_path / "raw.csv")
    run("normalize", tmp_path / "raw.csv", "--out", tmp_path / "two.csv")
    run("correlate", st, *args, "--out", tmp_path / "one.csv")
    assert (tmp_path / "two.csv").read_bytes() == (tmp_path / "one.csv").read_bytes()


def test_segments_and_threads_do_not_change_output(tmp_path, monkeypatch):
    st = tmp_path / "s.abt"
    run("simulate", FIX / "auto_cross.json", "--out", st)
    args = ["--start-ch", 2, "--stop-ch", 0, "--bin-ps", 50, "--window-ps", 3000]
    run("correlate", st, *args, "--out", tmp_path / "a.csv")
    monkeypatch.setenv("ANTIBUNCH_THREADS", "4")
    run("correlate", st, *args, "--segments", 7, "--out", tmp_path / "b.csv")
    run("simulate", FIX / "auto_cross.json", "--out", tmp_path / "s4.abt")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert st.read_bytes() == (tmp_path / "s4.abt").read_bytes()


def test_auto_and_cross_shapes(tmp_path):
    st = tmp_path / "s.abt"
    run("simulate", FIX / "auto_cross.json", "--out", st)
    for start, stop in ((0, 1), (2, 0)):
        out = tmp_path / f"h{start}{stop}.csv"
        assert run("correlate", st, "--start-ch", start, "--stop-ch", stop, "--bin-ps", 100,
                   "--window-ps", 5000, "--out", out) == 0
        h = read_histogram(out)
        centre = h.normalized[np.abs(h.taus) <= 100].mean()
        wings = h.normalized[np.abs(h.taus) >= 3000].mean()
        assert centre < 0.2
        assert wings == pytest.approx(1.0, abs=0.1)


def test_poisson_fixture_is_flat(tmp_path):
    cfg = json.loads((FIX / "zero_drive.json").read_text())
    cfg["channels"] = {"background_rate_per_ps": {"mode": 2e-4}}
    cfg["detectors"] = {"0": {"source": "mode"}, "1": {"source": "mode"}}
    cfg["simulation"]["duration_ps"] = 2e8
    p = tmp_path / "poisson.json"
    p.write_text(json.dumps(cfg))
    run("simulate", p, "--out", tmp_path / "p.abt")
    run("correlate", tmp_path / "p.abt", "--start-ch", 0, "--stop-ch", 1, "--bin-ps", 500,
        "--window-ps", 50000, "--out", tmp_path / "h.csv")
    h = read_histogram(tmp_path / "h.csv")
    assert h.normalized.mean() == pytest.approx(1.0, abs=0.02)


def test_replay_reproduces_outputs(tmp_path, capsys):
    st = tmp_path / "s.abt"
    run("simulate", FIX / "auto_cross.json", "--out", st)
    run("correlate", st, "--start-ch", 0, "--stop-ch", 1, "--bin-ps", 64, "--window-ps", 3000,
        "--out", tmp_path / "h.csv")
    assert run("replay", str(st) + ".manifest.json") == 0
    assert run("replay", tmp_path / "h.csv.manifest.json") == 0
    assert '"match": true' in capsys.readouterr().err
    st.write_bytes(st.read_bytes()[:-9])
    assert run("replay", tmp_path / "h.csv.manifest.json") == 1


def test_piped_equals_staged(tmp_path):
    if shutil.which(sys.executable) is None:
        pytest.skip("no interpreter path")
    cfg = FIX / "hbt_irf400.json"
    corr = ["correlate", "-", "--start-ch", "0", "--stop-ch", "1", "--bin-ps", "50",
            "--window-ps", "5000"]
    fit = ["fit", "-", "--model", "g2_resonant_weak_irf", "--irf-fwhm-ps", "400"]
    piped = subprocess.run(
        " | ".join([" ".join(CLI + ["simulate", str(cfg), "--out", "-"]),
                    " ".join(CLI + corr + ["--out", "-"]),
                    " ".join(CLI + fit + ["--out", "-"])]),
        shell=True, capture_output=True, check=True).stdout
    st, h, f = tmp_path / "s.abt", tmp_path / "h.csv", tmp_path / "f.json"
    assert run("simulate", cfg, "--out", st) == 0
    assert run("correlate", st, *corr[2:], "--out", h) == 0
    assert run("fit", h, *fit[2:], "--out", f) == 0
    piped_rep, staged_rep = json.loads(piped), report(f)
    piped_rep.pop("input"), staged_rep.pop("input")
    assert piped_rep == staged_rep


def test_fit_report_has_convolved_and_deconvolved(tmp_path):
    """Weak-pump HBT pipeline with a 400 ps IRF: the convolved value tracks the analytic IRF-convolved
    model at zero delay; the deconvolved value is exactly zero."""
    st, h, f = tmp_path / "s.abt", tmp_path / "h.csv", tmp_path / "f.json"
    run("simulate", FIX / "hbt_irf400.json", "--out", st)
    run("correlate", st, "--start-ch", 0, "--stop-ch", 1, "--bin-ps", 50, "--window-ps", 5000,
        "--out", h)
    assert run("fit", h, "--model", "g2_resonant_weak_irf", "--irf-fwhm-ps", 400,
               "--irf-sensitivity", "--out", f) == 0
    g = report(f)["g2_zero"]
    analytic = float(g2_resonant_weak_expsum(670.0, 460.0).convolved(0.0, IrfParams(400.0).sigma))
    assert g["convolved"] == pytest.approx(analytic, abs=0.015)
    assert g["deconvolved"] == 0.0
    assert len(g["irf_sensitivity"]) >= 2


def test_scan_doublet_fit_splitting(tmp_path):
    scan, f = tmp_path / "scan.csv", tmp_path / "f.json"
    assert run("scan", FIX / "doublet_scan.json", "--out", scan) == 0
    assert run("fit", scan, "--model", "lorentzian_doublet", "--x", "detuning_uev",
               "--y", "emitter_noisy", "--sigma", "emitter_sigma", "--out", f) == 0
    d = report(f)["doublet"]
    assert d["splitting_uev"] == pytest.approx(11.3, abs=0.3)
    assert 0 < d["splitting_err_uev"] < 0.3
    assert not d["unresolved"]


def test_scan_spectra_table(tmp_path):
    out = tmp_path / "spec.csv"
    assert run("scan", FIX / "doublet_scan.json", "--spectra", "--out", out) == 0
    t = parse_table(out.read_text())
    assert {"detuning_uev", "energy_uev", "spectrum"} <= set(t)


def test_saturation_ratios(tmp_path):
    out = tmp_path / "sat.csv"
    assert run("saturation", FIX / "saturation.json", "--out", out) == 0
    t = parse_table(out.read_text())
    np.testing.assert_allclose(t["intensity_fraction"], [1 / 3, 1 / 2, 2 / 3], rtol=1e-14)
    np.testing.assert_allclose(t["intensity"], 0.5 * t["intensity_fraction"], rtol=1e-15)


def test_tcspc_then_fit(tmp_path):
    tab, f = tmp_path / "tc.csv", tmp_path / "f.json"
    assert run("tcspc", FIX / "tcspc.json", "--out", tab) == 0
    assert run("fit", tab, "--model", "tcspc_decay_irf", "--x", "t_ps", "--y", "counts",
               "--sigma", "sigma", "--irf-fwhm-ps", 400, "--out", f) == 0
    r = report(f)["fit"]
    assert r["params"]["t1"] == pytest.approx(650.0, abs=20.0)


def test_power_series_fit(tmp_path):
    cfg = json.loads((FIX / "saturation.json").read_text())
    cfg["saturation"] = {"saturation_values": [0.1, 0.3, 0.6, 1, 2, 4, 8], "noise_fraction": 0.01}
    p = tmp_path / "ps.json"
    p.write_text(json.dumps(cfg))
    tab, f = tmp_path / "ps.csv", tmp_path / "f.json"
    assert run("saturation", p, "--out", tab) == 0
    assert run("fit", tab, "--model", "power_series", "--fix", "beta",
               "--init", "beta=1e-6", "--out", f) == 0
    r = report(f)
    assert r["fit"]["params"]["t1"] == pytest.approx(670, abs=50)
    assert r["fit"]["params"]["t2"] == pytest.approx(460, abs=50)


def test_stdout_output_has_no_manifest_unless_asked(tmp_path, capsysbinary):
    man = tmp_path / "m.json"
    assert run("saturation", FIX / "saturation.json", "--out", "-", "--manifest", man) == 0
    data = capsysbinary.readouterr().out
    assert data.startswith(b"#") and json.loads(man.read_text())["outputs"]["-"]
