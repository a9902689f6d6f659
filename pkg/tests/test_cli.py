import json
import re
import socket
import subprocess
import sys
import time

import pytest

from patchkeeper import codec
from patchkeeper.cli import main
from patchkeeper.core import PhysioProfile, SensorConfig, SensorId
from patchkeeper.simulator import generate_session


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def field(out, key):
    return [line.split("\t") for line in out.splitlines() if line.startswith(key + "\t")]


def report(out):
    return {parts[0]: (float(parts[1]), parts[3]) for parts in (line.split() for line in out.splitlines())}


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture(scope="module")
def sim60(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim60")
    assert main(["simulate", "--duration", "60", "--seed", "1", "--out", str(out)]) == 0
    return out / "session.pks"


def test_simulate_twice_identical(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "simulate", "--duration", 20, "--seed", 7, "--out", tmp_path / name)[0] == 0
    for ext in ("pks", "wav", "truth"):
        assert (tmp_path / "a" / f"session.{ext}").read_bytes() == (tmp_path / "b" / f"session.{ext}").read_bytes()


def test_simulate_hr60_truth_lines(tmp_path, capsys):
    run(capsys, "simulate", "--hr", 60, "--duration", 60, "--out", tmp_path)
    lines = (tmp_path / "session.truth").read_text().splitlines()
    assert abs(sum(line.startswith("RPEAK ") for line in lines) - 60) <= 1


def test_simulate_disable_imu(tmp_path, capsys):
    run(capsys, "simulate", "--disable", "imu", "--duration", 5, "--out", tmp_path)
    code, out, _ = run(capsys, "dump", tmp_path / "session.pks")
    assert code == 0
    assert not any(row[1] == "IMU" for row in field(out, "sensor"))
    code, out, _ = run(capsys, "dump", tmp_path / "session.pks", "--json-lines")
    assert all(json.loads(line)["sensor_id"] != 3 for line in out.splitlines())


def test_simulate_env_out(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("PATCHKEEPER_OUT", str(tmp_path))
    assert run(capsys, "simulate", "--duration", 2, "--disable", "audio")[0] == 0
    assert (tmp_path / "session.pks").exists() and not (tmp_path / "session.wav").exists()


def test_simulate_config_file(tmp_path, capsys):
    cfg = tmp_path / "pk.ini"
    cfg.write_text("[imu]\nrate_hz = 100\n[profile]\nheart_rate_bpm = 90\n")
    run(capsys, "simulate", "--config", cfg, "--duration", 4, "--out", tmp_path)
    log = codec.SessionLog.load(tmp_path / "session.pks")
    assert log.config.imu.rate_hz == 100
    assert sum(r.sensor_id == SensorId.IMU for r in log.records) == 400


@pytest.mark.parametrize("argv", [["--hr", "500"], ["--ecg-rate", "0"], ["--audio-rate", "44100"], ["--leds", "blue"]])
def test_simulate_bad_flags_exit_2(tmp_path, capsys, argv):
    with pytest.raises(SystemExit) as info:
        main(["simulate", "--duration", "1", "--out", str(tmp_path), *argv])
    assert info.value.code == 2


def test_simulate_unwritable_exit_1(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run(capsys, "simulate", "--duration", 1, "--out", blocker / "sub")[0] == 1


def test_dump_rates(sim60, capsys):
    code, out, _ = run(capsys, "dump", sim60)
    assert code == 0
    rows = {row[1]: (int(row[3]), float(row[5])) for row in field(out, "sensor")}
    assert rows["ECG_RESP"][0] == 7500 and abs(rows["ECG_RESP"][1] - 125) <= 0.5
    assert rows["PPG"][0] == 6000 and abs(rows["PPG"][1] - 100) <= 0.5
    assert rows["IMU"][0] == 3000 and abs(rows["IMU"][1] - 50) <= 0.5


def test_json_lines_count(sim60, capsys):
    code, out, err = run(capsys, "dump", sim60, "--json-lines")
    _, it = codec.read_session(sim60.read_bytes())
    assert len(out.splitlines()) == sum(1 for _ in it)
    assert "records\t16500" in err


def test_dump_empty_session(tmp_path, capsys):
    path = tmp_path / "empty.pks"
    path.write_bytes(codec.SessionHeader().encode())
    code, out, _ = run(capsys, "dump", path)
    assert code == 0
    assert all(int(row[3]) == 0 for row in field(out, "sensor"))


def test_dump_corrupt(tmp_path, capsys):
    log, _ = generate_session(PhysioProfile(), 1.0, SensorConfig(), seed=0)
    blob = bytearray(log.header.encode() + b"".join(codec.encode_record(r) for r in log.records))
    offset = len(log.header.encode()) + sum(len(codec.encode_record(r)) for r in log.records[:10])
    blob[offset + 3] ^= 0xFF
    path = tmp_path / "bad.pks"
    path.write_bytes(bytes(blob))

    code, _, err = run(capsys, "dump", path)
    assert code == 1 and f"offset {offset}" in err

    code, out, err = run(capsys, "dump", path, "--tolerant", "--json-lines")
    assert code == 0 and "warning" in err
    assert [json.loads(line)["t_us"] for line in out.splitlines()] == [r.timestamp_us for r in log.records[:10]]


def test_dump_aligned(tmp_path, capsys):
    run(capsys, "simulate", "--duration", 2, "--out", tmp_path)
    code, out, _ = run(capsys, "dump", tmp_path / "session.pks", "--aligned", 50)
    lines = out.splitlines()
    assert lines[0].split("\t")[:3] == ["t_us", "ecg", "resp"]
    assert len(lines) == 1 + 100


def test_analyze_default(sim60, capsys):
    code, out, _ = run(capsys, "analyze", sim60)
    assert code == 0
    truth = codec.read_events(sim60.with_suffix(".truth"))
    r = [e.time_us for e in truth if e.kind == "RPEAK"]
    truth_hr = sum(60e6 / (b - a) for a, b in zip(r, r[1:])) / (len(r) - 1)
    rep = report(out)
    assert abs(rep["hr_ecg"][0] - truth_hr) <= 1
    assert abs(rep["hr_ppg"][0] - truth_hr) <= 2
    assert abs(rep["rr_resp"][0] - 15) <= 1
    assert rep["s1_count"][0] == sum(e.kind == "S1" for e in truth)
    assert abs(rep["systolic_interval"][0] - 300) <= 10
    assert sim60.with_suffix(".report").read_text() == out
    assert sim60.with_suffix(".events").exists()


def test_analyze_rr_gyro_z(sim60, capsys, tmp_path):
    code, out, _ = run(capsys, "analyze", sim60, "--metrics", "rr", "--input", "gyro-z",
                       "--report", tmp_path / "r", "--events", tmp_path / "e")
    rep = report(out)
    assert set(rep) == {"rr_gyro_z"}
    assert abs(rep["rr_gyro_z"][0] - 15) <= 1


def test_analyze_without_audio(tmp_path, capsys):
    run(capsys, "simulate", "--duration", 40, "--disable", "audio", "--out", tmp_path)
    code, out, _ = run(capsys, "analyze", tmp_path / "session.pks", "--metrics", "hr,s1s2")
    rep = report(out)
    assert code == 0
    assert rep["hr_ecg"][1] == "ok"
    assert rep["s1_count"][1] == "fail:channel-absent"


def test_analyze_all_failing_exit_1(tmp_path, capsys):
    run(capsys, "simulate", "--duration", 5, "--disable", "audio", "--disable", "ecg", "--out", tmp_path)
    code, out, _ = run(capsys, "analyze", tmp_path / "session.pks", "--metrics", "hr,s1s2")
    assert code == 1


def test_monitor_closed_port(capsys):
    code, _, err = run(capsys, "monitor", "--port", free_port(), "--timeout", 1)
    assert code == 1 and "cannot connect" in err


def test_serve_replay_totals(tmp_path, capsys):
    run(capsys, "simulate", "--duration", 10, "--seed", 3, "--out", tmp_path)
    port = free_port()
    proc = subprocess.Popen([sys.executable, "-m", "patchkeeper", "serve", "--port", str(port), "--max-connections", "1",
                             "--fast", "--replay", str(tmp_path / "session.pks")],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    try:
        code = None
        for _ in range(100):
            code, out, _ = run(capsys, "monitor", "--port", port, "--subscribe", "all")
            if code == 0:
                break
            time.sleep(0.1)
        assert code == 0
        total = [line for line in out.splitlines() if line.startswith("total ")][-1]
        assert "ecg_resp=1250" in total and "ppg=1000" in total and "imu=500" in total
        assert "dropped=0" in total
    finally:
        proc.wait(10)


def test_serve_live_hr(capsys):
    port = free_port()
    proc = subprocess.Popen([sys.executable, "-m", "patchkeeper", "serve", "--port", str(port), "--max-connections", "1",
                             "--fast", "--hr", "72", "--duration", "30"],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    try:
        for _ in range(100):
            code, out, _ = run(capsys, "monitor", "--port", port, "--subscribe", "ecg")
            if code == 0:
                break
            time.sleep(0.1)
        hr = float(re.search(r"hr=([\d.]+)", out.splitlines()[-1]).group(1))
        assert abs(hr - 72) <= 2
    finally:
        proc.wait(10)


def test_help_documents_env(capsys):
    with pytest.raises(SystemExit):
        main(["simulate", "--help"])
    assert "PATCHKEEPER_OUT" in capsys.readouterr().out
