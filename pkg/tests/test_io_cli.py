import json
import math

import numpy as np
import pytest

from sopsense import cli
from sopsense.channel import SopDirectSource, sop_direct_series
from sopsense.detect import BREAK, LOSS_OF_SIGNAL, PRECURSOR_IMPULSIVE, Alarm
from sopsense.equalizer import JonesSeries
from sopsense.io import (
    ALARM_COLUMNS,
    SopFile,
    SopFormatError,
    open_sop,
    read_alarms_csv,
    read_jones_binary,
    read_sop_binary,
    read_sop_csv,
    read_spectrogram_csv,
    sop_header,
    write_alarms_csv,
    write_jones_binary,
    write_sop_binary,
    write_sop_csv,
)
from sopsense.scenario import builtin_preset, serialize_scenario
from sopsense.sop import SopSeries


def _series(n=5000, seed=0):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=(n, 4))
    s[:, 0] = np.abs(s[:, 0]) + 1e-300
    valid = rng.random(n) > 0.1
    return SopSeries(1e-4, 12.345678901234567, s, valid)


def _scenario_file(tmp_path, preset, duration_s, name="scen.yaml"):
    path = tmp_path / name
    path.write_text(serialize_scenario(builtin_preset(preset).with_duration(duration_s)), encoding="utf-8")
    return str(path)


def _assert_same(a: SopSeries, b: SopSeries):
    np.testing.assert_array_equal(a.stokes, b.stokes)
    np.testing.assert_array_equal(a.valid_mask(), b.valid_mask())
    assert a.sample_period_s == b.sample_period_s and a.start_t_s == b.start_t_s


# ----------------------------------------------------------------------------
# file formats
# ----------------------------------------------------------------------------


def test_binary_round_trip_is_bit_exact(tmp_path):
    s = _series()
    write_sop_binary(tmp_path / "a.bin", s, "abc", chunk=777)
    back = read_sop_binary(tmp_path / "a.bin")
    _assert_same(s, back)
    f = SopFile(tmp_path / "a.bin")
    assert len(f) == len(s) and f.scenario_sha256 == "abc"
    _assert_same(f.slice(100, 200), s.slice(100, 200))


def test_csv_round_trip_is_bit_exact(tmp_path):
    s = _series(800, seed=3)
    s.stokes[5] = [1e-300, -0.0, 1 / 3, math.pi]
    write_sop_csv(tmp_path / "a.csv", s, "xyz")
    back = read_sop_csv(tmp_path / "a.csv")
    _assert_same(s, back)
    header = [line for line in (tmp_path / "a.csv").read_text().splitlines() if not line.startswith("#")][0]
    assert header == "t_s,s0,s1,s2,s3,valid"
    _assert_same(open_sop(tmp_path / "a.csv"), s)


def test_truncated_and_foreign_files(tmp_path):
    write_sop_binary(tmp_path / "a.bin", _series(100))
    raw = (tmp_path / "a.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(raw[:-5])
    with pytest.raises(SopFormatError, match="truncated|length"):
        read_sop_binary(tmp_path / "cut.bin")
    (tmp_path / "v2.bin").write_bytes(raw[:4] + b"\x02\x00" + raw[6:])
    with pytest.raises(SopFormatError, match="version 2"):
        read_sop_binary(tmp_path / "v2.bin")
    (tmp_path / "empty.bin").write_bytes(b"")
    with pytest.raises(SopFormatError, match="empty"):
        read_sop_binary(tmp_path / "empty.bin")
    (tmp_path / "junk.bin").write_bytes(b"hello world, not data")
    with pytest.raises(SopFormatError):
        read_sop_binary(tmp_path / "junk.bin")


def test_jones_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    n = 300
    m = rng.normal(size=(n, 2, 2)) + 1j * rng.normal(size=(n, 2, 2))
    js = JonesSeries(1e-4, 1e-4 * np.arange(1, n + 1), m, rng.random(n) > 0.2, rng.random(n))
    write_jones_binary(tmp_path / "j.bin", js, "h")
    back = read_jones_binary(tmp_path / "j.bin")
    np.testing.assert_array_equal(back.t_s, js.t_s)
    np.testing.assert_array_equal(back.matrices, js.matrices)
    np.testing.assert_array_equal(back.power, js.power)
    np.testing.assert_array_equal(back.valid, js.valid)


def test_alarm_csv(tmp_path):
    alarms = [Alarm(1.5, PRECURSOR_IMPULSIVE, 7.25, "mid", 0.3072), Alarm(9.0, LOSS_OF_SIGNAL, 0.0, "", 0.0)]
    write_alarms_csv(tmp_path / "a.csv", alarms)
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == ",".join(ALARM_COLUMNS) == "t_s,class,band,score,run_length_s"
    assert read_alarms_csv(tmp_path / "a.csv") == alarms
    write_alarms_csv(tmp_path / "none.csv", [])
    assert (tmp_path / "none.csv").read_text() == "t_s,class,band,score,run_length_s\n"


def test_two_hour_baseline_sample_count():
    src = SopDirectSource(builtin_preset("baseline"))
    assert len(src) == 72_000_000
    assert sop_header(len(src), src.sample_period_s, 0.0)["n_samples"] == 72_000_000
    assert src.sample_period_s == 1e-4


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def test_simulate_writes_file_and_manifest(tmp_path, capsys):
    scen = _scenario_file(tmp_path, "baseline", 3.0)
    out = tmp_path / "sim"
    assert cli.main(["simulate", "--scenario", scen, "--out", str(out)]) == 0
    assert "30000 samples" in capsys.readouterr().out
    s = read_sop_binary(out / "sop.bin")
    assert len(s) == 30_000 and s.sample_period_s == 1e-4
    _assert_same(s, sop_direct_series(builtin_preset("baseline").with_duration(3.0)))
    manifest = json.loads((out / "manifest.json").read_text())
    assert {e["path"] for e in manifest["outputs"]} == {"scenario.yaml", "sop.bin"}
    assert manifest["scenario_sha256"] == SopFile(out / "sop.bin").scenario_sha256


def test_simulate_is_deterministic(tmp_path):
    scen = _scenario_file(tmp_path, "mains-only", 20.0)
    for name in ("a", "b"):
        assert cli.main(["simulate", scen, "--format", "csv", "--out", str(tmp_path / name)]) == 0
    for f in ("sop.csv", "manifest.json", "scenario.yaml"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_simulate_full_stack_writes_jones(tmp_path):
    scen = _scenario_file(tmp_path, "mains-only", 0.05)
    out = tmp_path / "fs"
    assert cli.main(["simulate", scen, "--mode", "full-stack", "--out", str(out)]) == 0
    js = read_jones_binary(out / "jones.bin")
    # the last entry can fall inside the transmit and matched-filter latency
    assert len(js) == len(read_sop_binary(out / "sop.bin")) in (499, 500)
    assert 0 <= js.t_s[0] and js.t_s[-1] < 0.05


def test_default_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "root"))
    scen = _scenario_file(tmp_path, "baseline", 1.0)
    assert cli.main(["simulate", scen]) == 0
    assert (tmp_path / "root" / "simulate" / "sop.bin").exists()


def test_bad_inputs_exit_codes(tmp_path, capsys):
    assert cli.main(["simulate", "no-such-preset"]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: 1\ntotal_duration_s: -5\nevents: []\n")
    assert cli.main(["simulate", str(bad), "--out", str(tmp_path / "x")]) == 2
    (tmp_path / "empty.bin").write_bytes(b"")
    assert cli.main(["analyze", str(tmp_path / "empty.bin"), "--out", str(tmp_path / "y")]) == 2
    assert "empty" in capsys.readouterr().err
    assert cli.main(["analyze", str(tmp_path / "missing.bin")]) == 3
    assert cli.main(["frobnicate"]) == 2


def test_analyze_notch_off_and_on(tmp_path):
    scen = _scenario_file(tmp_path, "mains-only", 20.0)
    assert cli.main(["simulate", scen, "--out", str(tmp_path / "sim")]) == 0
    sop = str(tmp_path / "sim" / "sop.bin")
    peaks = {}
    for mode in ("off", "on"):
        out = tmp_path / mode
        assert cli.main(["analyze", sop, "--notch", mode, "--no-plots", "--out", str(out)]) == 0
        t, f, db = read_spectrogram_csv(out / "spectrogram_S2.csv")
        k50 = int(np.argmin(np.abs(f - 50.0)))
        if mode == "off":
            assert np.all(np.argmax(db, axis=1) == k50)
        peaks[mode] = db[:, k50]
        assert (out / "deviation.csv").read_text().startswith("t_s,dS1,dS2,dS3\n")
    assert np.all(peaks["off"] - peaks["on"] >= 40)


def test_analyze_writes_svg_plots(tmp_path):
    scen = _scenario_file(tmp_path, "mains-only", 15.0)
    assert cli.main(["simulate", scen, "--format", "csv", "--out", str(tmp_path / "sim")]) == 0
    out = tmp_path / "ana"
    assert cli.main(["analyze", str(tmp_path / "sim" / "sop.csv"), "--out", str(out)]) == 0
    for name in ("spectrogram_S1.svg", "spectrogram_S2.svg", "spectrogram_S3.svg", "deviation.svg"):
        assert (out / name).read_text().lstrip().startswith("<?xml")
    listed = {e["path"] for e in json.loads((out / "manifest.json").read_text())["outputs"]}
    assert "deviation.svg" in listed and "spectrogram_S2.csv" in listed


def test_detect_needs_a_baseline(tmp_path, capsys):
    scen = _scenario_file(tmp_path, "baseline", 2.0)
    assert cli.main(["simulate", scen, "--out", str(tmp_path / "sim")]) == 0
    sop = str(tmp_path / "sim" / "sop.bin")
    assert cli.main(["detect", sop, "--out", str(tmp_path / "d")]) == 2
    assert "--baseline" in capsys.readouterr().err
    # far fewer than 100 frames to train on
    assert cli.main(["detect", sop, "--train-s", "2", "--out", str(tmp_path / "d")]) == 2


def test_detect_on_baseline_file_is_quiet(tmp_path, capsys):
    scen = _scenario_file(tmp_path, "baseline", 300.0)
    assert cli.main(["simulate", scen, "--out", str(tmp_path / "sim")]) == 0
    capsys.readouterr()
    sop = str(tmp_path / "sim" / "sop.bin")
    assert cli.main(["detect", sop, "--train-s", "150", "--out", str(tmp_path / "d")]) == 0
    line = capsys.readouterr().out.strip()
    assert line == "alarms: precursor_impulsive=0 precursor_sustained=0 break=0 loss_of_signal=0"
    assert read_alarms_csv(tmp_path / "d" / "alarms.csv") == []
    # the saved model works as --baseline
    model = str(tmp_path / "d" / "baseline_model.json")
    assert cli.main(["detect", sop, "--baseline", model, "--out", str(tmp_path / "e")]) == 0
    assert capsys.readouterr().out.strip() == line


@pytest.fixture(scope="module")
def demo_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo")
    assert cli.main(["demo-break", "--no-plots", "--out", str(out)]) == 0
    return out


def test_demo_break_report_and_artifacts(demo_dir):
    report = (demo_dir / "report.txt").read_text()
    assert "result: PASS" in report and "[FAIL]" not in report
    manifest = json.loads((demo_dir / "manifest.json").read_text())
    listed = {e["path"] for e in manifest["outputs"]}
    assert {"sop.bin", "alarms.csv", "report.txt", "spectrogram_S2.csv", "baseline_model.json"} <= listed
    assert all(manifest["checks"].values())


def test_demo_sop_ends_before_break(demo_dir):
    script = builtin_preset("break-demo")
    f = SopFile(demo_dir / "sop.bin")
    last = np.flatnonzero(f.valid_mask())[-1] * f.sample_period_s
    assert last < script.break_completion_s()
    assert script.break_event().start_s < script.break_completion_s()


def test_detect_command_on_break_demo(demo_dir, tmp_path, capsys):
    capsys.readouterr()
    out = tmp_path / "det"
    assert cli.main(["detect", str(demo_dir / "sop.bin"), "--train-s", "300", "--out", str(out)]) == 0
    counts = dict(kv.split("=") for kv in capsys.readouterr().out.split()[1:])
    assert int(counts["precursor_impulsive"]) + int(counts["precursor_sustained"]) >= 1
    assert counts[BREAK] == "1" and counts[LOSS_OF_SIGNAL] == "1"
    assert (out / "alarms.csv").read_bytes() == (demo_dir / "alarms.csv").read_bytes()


def test_corrupted_scenario_fails_demo(tmp_path):
    bad = tmp_path / "broken.yaml"
    bad.write_text("seed: 1\ntotal_duration_s: 100\nevents:\n  - kind: warp\n    start_s: 1\n")
    assert cli.main(["demo-break", "--scenario", str(bad), "--out", str(tmp_path / "x")]) != 0
