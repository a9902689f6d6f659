import io
from dataclasses import replace

import numpy as np
import pytest
from scipy import signal

from patchkeeper import codec
from patchkeeper.analysis import session_channels
from patchkeeper.core import AmbientProfile, PhysioProfile, SensorConfig, SensorId
from patchkeeper.simulator import (
    BatteryModel,
    IntervalExceedsBeat,
    RateTooLowForMorphology,
    beat_times_us,
    estimate_battery_life,
    generate_session,
    heart_sound_times_us,
    mix_into_stethoscope,
    sample_times_us,
    synth_ambient,
    synth_ecg,
    synth_pcg,
    synth_ppg,
    synth_resp_and_imu,
)

STEADY = PhysioProfile(heart_rate_bpm=60, hr_variability_frac=0.0)


def session_bytes(log):
    buf = io.BytesIO()
    codec.write_session(log.header, log.records, buf)
    return buf.getvalue()


def test_deterministic():
    a, _ = generate_session(PhysioProfile(), 5.0, SensorConfig(), seed=11)
    b, _ = generate_session(PhysioProfile(), 5.0, SensorConfig(), seed=11)
    c, _ = generate_session(PhysioProfile(), 5.0, SensorConfig(), seed=12)
    assert session_bytes(a) == session_bytes(b)
    np.testing.assert_array_equal(a.audio, b.audio)
    assert a.truth == b.truth
    assert session_bytes(a) != session_bytes(c)


def test_20s_trace_set(session_20s):
    log, _ = session_20s
    names = set(session_channels(log))
    assert names == {"ecg", "resp", "ppg_green", "ax", "ay", "az", "gx", "gy", "gz"}
    assert len(log.audio) == 2 * 20 * 8000


def test_hr60_beat_count():
    truth = generate_session(PhysioProfile(heart_rate_bpm=60), 60.0, SensorConfig(), seed=5)[1]
    assert abs(len(truth.r_peak_times_us) - 60) <= 1


def test_imu_disabled_means_no_imu_records():
    log, _ = generate_session(PhysioProfile(), 3.0, SensorConfig().with_disabled("imu"), seed=0)
    assert not any(r.sensor_id == SensorId.IMU for r in log.records)
    assert any(r.sensor_id == SensorId.ECG_RESP for r in log.records)


def test_disabling_a_sensor_leaves_others_unchanged():
    full, _ = generate_session(PhysioProfile(), 4.0, SensorConfig(), seed=9)
    partial, _ = generate_session(PhysioProfile(), 4.0, SensorConfig().with_disabled("ppg", "audio"), seed=9)
    keep = lambda log: [r for r in log.records if r.sensor_id in (SensorId.ECG_RESP, SensorId.IMU)]
    assert keep(full) == keep(partial)


def test_jitter_free_beats():
    r = beat_times_us(STEADY, 10.0, seed=3)
    assert r[0] == 500_000
    assert set(np.diff(r).tolist()) == {1_000_000}


def test_jittered_intervals_bounded():
    p = PhysioProfile(heart_rate_bpm=90, hr_variability_frac=0.05)
    rr = np.diff(beat_times_us(p, 60.0, seed=2)) / 1e6
    nominal = 60 / 90
    assert rr.min() >= nominal * 0.95 - 1e-6 and rr.max() <= nominal * 1.05 + 1e-6


def test_systolic_gap_exact():
    pcg, s1, s2 = synth_pcg(beat_times_us(STEADY, 10.0, 1), STEADY, 8000, 10.0, seed=1)
    gaps = s2 - s1[: len(s2)]
    assert np.all(np.abs(gaps - 300_000) <= 125)


def test_no_beats_no_sounds():
    pcg, s1, s2 = synth_pcg(np.array([], dtype=np.int64), STEADY, 8000, 2.0, seed=1)
    assert len(s1) == len(s2) == 0
    assert np.std(pcg.samples) < 3 * STEADY.pcg_noise


def test_s2_past_next_beat_rejected():
    with pytest.raises(IntervalExceedsBeat):
        heart_sound_times_us(np.array([0, 200_000]), STEADY, 1.0)


def test_low_ecg_rate_rejected():
    with pytest.raises(RateTooLowForMorphology):
        synth_ecg(STEADY, 50, 5.0, seed=0)


def _xcorr_peak(a, b, max_lag=20):
    a = (a - a.mean()) / a.std()
    b = (b - b.mean()) / b.std()
    lags = np.arange(-max_lag, max_lag + 1)
    vals = [np.mean(a[max_lag + k : len(a) - max_lag + k] * b[max_lag : len(b) - max_lag]) for k in lags]
    i = int(np.argmax(np.abs(vals)))
    return int(lags[i]), float(vals[i])


def test_leak_coupling():
    amb = AmbientProfile(mode="noisy", noise_dbfs=-20)
    chest, _, _ = synth_pcg(np.array([], dtype=np.int64), STEADY, 8000, 4.0, seed=4)
    ambient = synth_ambient(amb, 8000, 4.0, seed=4)
    n = len(chest)
    chance = 4 / np.sqrt(n)

    _, r0 = _xcorr_peak(mix_into_stethoscope(chest, ambient, 0.0).samples, ambient.samples)
    assert abs(r0) < chance

    lag, r = _xcorr_peak(mix_into_stethoscope(chest, ambient, 0.5, 5).samples, ambient.samples)
    assert lag == 5 and r > 0.5


def _periodogram(x, fs):
    return signal.periodogram(x - x.mean(), fs=fs, window="hann")


def test_clean_ppg_peak_at_heart_rate():
    p = replace(STEADY, ppg_snr_db=None)
    ppg = synth_ppg(beat_times_us(p, 60.0, 2), p, 100, 60.0, seed=2)
    f, pxx = _periodogram(ppg.samples, 100)
    band = (f > 0.7) & (f < 3)
    k = np.flatnonzero(band)[np.argmax(pxx[band])]
    assert abs(f[k] - 1.0) <= f[1]


def test_ppg_without_respiration_has_no_low_peak():
    p = replace(STEADY, ppg_snr_db=None, ppg_resp_counts=0.0)
    ppg = synth_ppg(beat_times_us(p, 60.0, 2), p, 100, 60.0, seed=2)
    f, pxx = _periodogram(ppg.samples, 100)
    low = (f > 0.05) & (f < 0.6)
    assert pxx[low].max() < 1e-4 * pxx.max()


def test_default_ppg_snr_near_zero_db():
    clean_p = replace(STEADY, ppg_snr_db=None, ppg_resp_counts=0.0)
    noisy_p = replace(STEADY, ppg_resp_counts=0.0)
    r = beat_times_us(STEADY, 60.0, 8)
    clean = synth_ppg(r, clean_p, 100, 60.0, seed=8).samples
    noisy = synth_ppg(r, noisy_p, 100, 60.0, seed=8).samples
    t = np.arange(len(clean)) / 100
    # amplitude of the 1 Hz component by projection over whole periods
    amp = 2 * abs(np.mean((clean - clean.mean()) * np.exp(-2j * np.pi * 1.0 * t)))
    noise_power = np.var(noisy - clean)
    snr_db = 10 * np.log10(amp**2 / 2 / noise_power)
    assert -6 <= snr_db <= 6


def test_resp_peak_at_quarter_hertz():
    resp, imu = synth_resp_and_imu(PhysioProfile(resp_rate_brpm=15), 125, 50, 60.0, seed=1)
    f, pxx = _periodogram(resp.samples, 125)
    assert abs(f[np.argmax(pxx)] - 0.25) <= f[1]
    assert np.std(imu["gx"].samples) < 3 * PhysioProfile().imu_gyro_noise_dps


def test_s1_on_r_and_ppg_foot_lag():
    p = replace(STEADY, ppg_snr_db=None, ppg_resp_counts=0.0)
    log, truth = generate_session(p, 20.0, SensorConfig(), seed=6)
    r = truth.r_peak_times_us
    for s in truth.s1_times_us:
        assert np.min(np.abs(r - s)) <= 20_000
    ppg = session_channels(log)["ppg_green"]
    for rt in r[:-1]:
        win = (ppg.times_us >= rt) & (ppg.times_us < rt + 600_000)
        vals = ppg.values[win]
        # last minimum: flat, rounded counts before the first pulse tie
        foot = ppg.times_us[win][len(vals) - 1 - np.argmin(vals[::-1])]
        assert abs(foot - rt - 250_000) <= 10_000


@pytest.mark.parametrize("rate", [50, 100, 125, 333, 1000])
def test_timestamps_no_drift(rate):
    n_hour = 3600 * rate
    t = sample_times_us(n_hour + 1, rate)
    assert t[-1] == 3600 * 1_000_000
    steps = set(np.diff(t[:5000]).tolist())
    assert steps <= {1_000_000 // rate, -(-1_000_000 // rate)}


def test_sidecar_counts(session_60s):
    _, truth = session_60s
    hr, rr = PhysioProfile().heart_rate_bpm, PhysioProfile().resp_rate_brpm
    assert abs(len(truth.r_peak_times_us) - 60 * hr / 60) <= 1
    assert abs(len(truth.breath_times_us) - 60 * rr / 60) <= 1
    assert len(truth.s1_times_us) == len(truth.r_peak_times_us)
    assert abs(len(truth.s2_times_us) - len(truth.s1_times_us)) <= 1


def test_truth_events_round_trip(session_20s):
    log, truth = session_20s
    back = type(truth).from_events(log.truth)
    np.testing.assert_array_equal(back.r_peak_times_us, truth.r_peak_times_us)
    np.testing.assert_array_equal(back.breath_times_us, truth.breath_times_us)


def test_battery_calibration():
    assert estimate_battery_life(SensorConfig()) == 20.0
    model = BatteryModel()
    off = SensorConfig().with_disabled("ecg", "ppg", "imu", "audio")
    assert estimate_battery_life(off, model) == model.capacity_mah / model.base_current_ma


@pytest.mark.parametrize("name", ["ecg", "ppg", "imu", "audio"])
def test_battery_disabling_helps(name):
    assert estimate_battery_life(SensorConfig().with_disabled(name)) > 20.0
