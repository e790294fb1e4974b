import json
from pathlib import Path

import pytest

from coldloop.cli import RunManifest, main
from coldloop.io import read_spectrum_csv, read_time_trace

TINY = str(Path(__file__).parent / "data" / "tiny.yaml")


def _run(tmp_path, *argv):
    out = tmp_path / argv[0]
    rc = main(list(argv) + ["--config", TINY, "--out", str(out)])
    return rc, out


def _manifest(out):
    return RunManifest(**json.loads((out / "manifest.json").read_text()))


def test_budget_on_reference(tmp_path, capsys):
    rc = main(["budget", "--config", "lhe_het", "--out", str(tmp_path)])
    assert rc == 0
    rep = json.loads((tmp_path / "budget.json").read_text())
    assert rep["inputs"]["n_th"] == pytest.approx(3.65e5, rel=0.01)
    assert len(rep["config_sha256"]) == 64
    assert '"budget"' in capsys.readouterr().out


def test_manifest_records_config_hash(tmp_path):
    rc, out = _run(tmp_path, "budget")
    assert rc == 0
    m = _manifest(out)
    assert m.verify() and m.command == "budget" and "budget.json" in m.outputs


def test_schema_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(Path(TINY).read_text().replace("  q_factor: 1000.0\n", ""))
    assert main(["budget", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "mode.q_factor" in capsys.readouterr().err


def test_missing_config_exit_code(tmp_path):
    assert main(["budget", "--config", str(tmp_path / "none.yaml"), "--out", str(tmp_path)]) == 1


def test_simulate_outputs_readable(tmp_path):
    rc, out = _run(tmp_path, "simulate", "--seed", "4")
    assert rc == 0
    tr = read_time_trace(out / "measurement.trace")
    spec = read_spectrum_csv(out / "spectrum.csv")
    assert tr.samples.size > 0 and spec.n_avg >= 1
    assert _manifest(out).seeds == [4]


def test_sweep_is_deterministic(tmp_path):
    rc1, a = _run(tmp_path / "a", "sweep", "--gains", "3000", "30000")
    rc2, b = _run(tmp_path / "b", "sweep", "--gains", "3000", "30000")
    assert rc1 == rc2 == 0
    assert (a / "sweep.csv").read_bytes() == (b / "sweep.csv").read_bytes()
    rep = json.loads((a / "sweep.json").read_text())
    assert len(rep["points"]) == 2 and not rep["failed"]


def test_fit_round_trip_from_simulate(tmp_path):
    rc, sim = _run(tmp_path, "simulate")
    assert rc == 0
    rc, out = _run(tmp_path, "fit", "--data", str(sim / "spectrum.csv"))
    assert rc == 0
    rep = json.loads((out / "fit.json").read_text())
    assert rep["occupation"]["n_bar"] > 0


def test_fit_requires_data(tmp_path):
    rc, _ = _run(tmp_path, "fit")
    assert rc == 1


def test_heterodyne_recovers_requested_occupation(tmp_path):
    rc, out = _run(tmp_path, "heterodyne", "--n-bar", "2.0")
    assert rc == 0
    rep = json.loads((out / "heterodyne.json").read_text())
    assert rep["n_true"] == 2.0
    assert abs(rep["n_fit"] - 2.0) < 4 * rep["n_fit_sigma"]


def test_design_writes_loadable_config(tmp_path):
    from coldloop import config

    rc, out = _run(tmp_path, "design")
    assert rc == 0
    sc = config.load(out / "designed.yaml")
    assert sc.loop.filter.sections


def test_calibrate(tmp_path):
    rc, out = _run(tmp_path, "calibrate")
    assert rc == 0
    rep = json.loads((out / "calibrate.json").read_text())
    assert rep["factor"] == pytest.approx(1e-18, rel=0.05)
    assert rep["snr_db"] >= 10


def test_characterize_within_two_percent(tmp_path):
    rc, out = _run(tmp_path, "characterize")
    assert rc == 0
    rep = json.loads((out / "characterize.json").read_text())
    assert rep["q_factor"] == pytest.approx(1000.0, rel=0.02)
    assert rep["kappa_hz"] == pytest.approx(8.8e9, rel=0.02)
    assert rep["kappa_e_hz"] == pytest.approx(6.9e9, rel=0.02)
    assert rep["g0_hz"] == pytest.approx(2.24e5, rel=0.02)
    # re-fitting the written files gives the same answer
    rc, again = _run(tmp_path / "re", "characterize", "--data", str(out))
    assert rc == 0
    assert json.loads((again / "characterize.json").read_text())["g0_hz"] == rep["g0_hz"]
