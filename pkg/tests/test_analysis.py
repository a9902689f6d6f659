from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchkeeper import analysis
from patchkeeper.analysis import (
    AlignMode,
    AmbiguousPairing,
    BadRate,
    EmptySession,
    LengthMismatch,
    NoEventsFound,
    NoSpectralPeak,
    NotEnoughPeaks,
    RateTooLow,
    TooShort,
    align_arrays,
    align_streams,
    cancel_noise,
    detect_heart_sounds,
    detect_r_peaks,
    heart_rate,
    ppg_heart_rate,
    respiration_rate,
    session_channels,
    session_series,
    spectral_peak,
)
from patchkeeper.codec import SessionHeader, SessionLog
from patchkeeper.core import AmbientProfile, ImuSample, PhysioProfile, PpgSample, SensorConfig, SensorId, SensorRecord, TimeSeries, Unit
from patchkeeper.simulator import (
    beat_times_us,
    generate_session,
    leak_scenario,
    mix_into_stethoscope,
    synth_ambient,
    synth_ecg,
    synth_pcg,
    synth_ppg,
)

STEADY = PhysioProfile(heart_rate_bpm=60, hr_variability_frac=0.0)


def latest_at_or_before(times, values, t):
    """Reference hold semantics by linear scan."""
    out = None
    for ti, v in zip(times, values):
        if ti <= t:
            out = v
        else:
            break
    return out


# --- alignment -------------------------------------------------------------------


def test_single_channel_identity():
    log, _ = generate_session(PhysioProfile(), 4.0, SensorConfig().with_disabled("ppg", "imu", "audio"), seed=1)
    frames = align_streams(log, 125, "hold")
    ecg = session_channels(log)["ecg"]
    assert [f.t_us for f in frames] == ecg.times_us.tolist()
    assert [f.values["ecg"] for f in frames] == ecg.values.tolist()


def _ramp_session():
    recs = [SensorRecord(SensorId.IMU, k * 20_000, ImuSample(100 * k, 0, 0, 0, 0, 0)) for k in range(50)]
    recs += [SensorRecord(SensorId.PPG, k * 10_000, PpgSample(1, (0,))) for k in range(100)]
    cfg = SensorConfig().with_disabled("ecg")
    return SessionLog(SessionHeader(cfg), sorted(recs, key=lambda r: (r.timestamp_us, int(r.sensor_id))))


def test_linear_ramp_midpoints():
    t, cols = align_arrays(_ramp_session(), 100, AlignMode.LINEAR)
    ax = cols["ax"]
    odd = np.arange(1, 97, 2)
    # frame 2k+1 sits halfway between IMU samples k and k+1
    expected = (100 * ((odd - 1) // 2) + 50) / 16384
    np.testing.assert_allclose(ax[odd], expected, rtol=0, atol=1e-15)
    np.testing.assert_allclose(ax[::2][:48], 100 * np.arange(48) / 16384, rtol=0, atol=1e-15)


def test_default_session_frames(session_20s):
    log, _ = session_20s
    frames = align_streams(log, 50)
    assert len(frames) == 1000
    warm = frames[5:]
    for name in ("ecg", "resp", "ppg_green", "ax", "gy", "gz"):
        assert all(f.values[name] is not None for f in warm)
    ts = [f.t_us for f in frames]
    assert all(b > a for a, b in zip(ts, ts[1:]))


def test_hold_semantics_exhaustive_small():
    log, _ = generate_session(PhysioProfile(), 1.0, SensorConfig(), seed=4)
    chans = session_channels(log)
    for f in align_streams(log, 40, "hold"):
        for name, ch in chans.items():
            assert f.values[name] == latest_at_or_before(ch.times_us.tolist(), ch.values.tolist(), f.t_us)


def test_align_errors(session_20s):
    log, _ = session_20s
    with pytest.raises(BadRate):
        align_streams(log, 200)
    with pytest.raises(BadRate):
        align_streams(log, 0)
    with pytest.raises(EmptySession):
        align_streams(SessionLog(SessionHeader(), []), 10)


# --- ECG -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def clean_ecg_60():
    p = replace(STEADY, ecg_noise_mv=0.0)
    ecg, r = synth_ecg(p, 125, 60.0, seed=3)
    return ecg, r


def test_r_peaks_clean(clean_ecg_60):
    ecg, truth = clean_ecg_60
    found = detect_r_peaks(ecg)
    assert abs(len(found) - 60) <= 1
    nearest = np.array([np.min(np.abs(truth - t)) for t in found])
    assert nearest.max() <= 10_000


def test_r_peaks_scale_and_offset_invariant(clean_ecg_60):
    ecg, _ = clean_ecg_60
    base = detect_r_peaks(ecg)
    np.testing.assert_array_equal(detect_r_peaks(ecg.with_samples(2 * ecg.samples)), base)
    np.testing.assert_array_equal(detect_r_peaks(ecg.with_samples(ecg.samples + 0.7)), base)


def test_r_peaks_flat():
    assert len(detect_r_peaks(TimeSeries(0, 125, Unit.MILLIVOLTS, np.zeros(1000)))) == 0


def test_r_peak_preconditions():
    with pytest.raises(RateTooLow):
        detect_r_peaks(TimeSeries(0, 50, Unit.MILLIVOLTS, np.zeros(500)))
    with pytest.raises(TooShort):
        detect_r_peaks(TimeSeries(0, 125, Unit.MILLIVOLTS, np.zeros(300)))


def test_refractory_enforced(session_60s):
    log, _ = session_60s
    peaks = detect_r_peaks(session_series(log, "ecg"))
    assert np.diff(peaks).min() >= 250_000


def test_heart_rate_formula():
    assert heart_rate([0, 1_000_000, 2_000_000])[0] == 60.0
    assert heart_rate([0, 500_000])[0] == 120.0
    with pytest.raises(NotEnoughPeaks):
        heart_rate([5])


def test_heart_rate_against_sidecar():
    p = PhysioProfile(heart_rate_bpm=72, hr_variability_frac=0.05)
    log, truth = generate_session(p, 60.0, SensorConfig().with_disabled("ppg", "imu", "audio"), seed=21)
    bpm, _ = heart_rate(detect_r_peaks(session_series(log, "ecg")))
    assert abs(bpm - truth.mean_hr_bpm) <= 1.0


# --- heart sounds ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def clean_pcg_60():
    r = beat_times_us(STEADY, 60.0, 2)
    pcg, s1, s2 = synth_pcg(r, STEADY, 8000, 60.0, seed=2)
    return pcg, r, s1, s2


def test_heart_sounds_with_r(clean_pcg_60):
    pcg, r, s1, s2 = clean_pcg_60
    events = detect_heart_sounds(pcg, r)
    got_s1 = np.array([e.time_us for e in events if e.kind == "S1"])
    got_s2 = np.array([e.time_us for e in events if e.kind == "S2"])
    assert abs(len(got_s1) - 60) <= 1 and abs(len(got_s2) - 60) <= 1
    assert max(np.min(np.abs(s1 - t)) for t in got_s1) <= 20_000
    assert max(np.min(np.abs(s2 - t)) for t in got_s2) <= 20_000


def test_heart_sounds_alternate_and_gap(clean_pcg_60):
    pcg, r, _, _ = clean_pcg_60
    events = detect_heart_sounds(pcg, r)
    kinds = [e.kind for e in events]
    assert all(a != b for a, b in zip(kinds, kinds[1:]))
    times = [e.time_us for e in events]
    assert times == sorted(times)
    gaps = [b.time_us - a.time_us for a, b in zip(events, events[1:]) if a.kind == "S1"]
    assert all(abs(g - 300_000) <= 2 * 5_000 for g in gaps)


def test_heart_sounds_without_r_agree(clean_pcg_60):
    pcg, r, _, _ = clean_pcg_60
    assert detect_heart_sounds(pcg) == detect_heart_sounds(pcg, r)


def test_silence_has_no_heart_sounds():
    with pytest.raises(NoEventsFound):
        detect_heart_sounds(TimeSeries(0, 8000, Unit.NORMALIZED, np.zeros(8000)))


def test_equal_gaps_are_ambiguous():
    # S1/S2 evenly spaced: systole equals diastole
    p = PhysioProfile(heart_rate_bpm=60, hr_variability_frac=0.0, s1_s2_interval_s=0.5, pcg_noise=0.0)
    pcg, _, _ = synth_pcg(beat_times_us(p, 10.0, 0), p, 8000, 10.0, seed=0)
    with pytest.raises(AmbiguousPairing):
        detect_heart_sounds(pcg)


# --- spectral rates -------------------------------------------------------------------


def test_ppg_rate_default_noise():
    p = PhysioProfile(heart_rate_bpm=60)
    ppg = synth_ppg(beat_times_us(p, 60.0, 4), p, 100, 60.0, seed=4)
    assert abs(ppg_heart_rate(ppg).rate_per_min - 60) <= 2


def test_pure_tone_72():
    t = np.arange(30 * 100) / 100
    est = ppg_heart_rate(TimeSeries(0, 100, Unit.COUNTS, np.sin(2 * np.pi * 1.2 * t)))
    assert abs(est.rate_per_min - 72.0) <= 60 * 0.005
    assert not est.band_edge


@pytest.mark.parametrize("f0", np.round(np.arange(0.75, 2.96, 0.11), 3).tolist())
def test_tone_sweep_within_one_bin(f0):
    fs = 50.0
    t = np.arange(int(30 * fs)) / fs
    est = spectral_peak(TimeSeries(0, fs, Unit.COUNTS, np.cos(2 * np.pi * f0 * t + 0.3)), (0.7, 3.0), 8.0)
    n = 8 * 50
    nfft = max(n, int(2 ** np.ceil(np.log2(fs / 0.005))))
    assert abs(est.frequency_hz - f0) <= fs / nfft


def test_white_noise_has_no_peak():
    x = np.random.default_rng(0).normal(size=6000)
    with pytest.raises(NoSpectralPeak):
        ppg_heart_rate(TimeSeries(0, 100, Unit.COUNTS, x))


def test_ppg_too_short():
    with pytest.raises(TooShort):
        ppg_heart_rate(TimeSeries(0, 100, Unit.COUNTS, np.zeros(1000)))


@pytest.fixture(scope="module")
def session_rr15():
    p = PhysioProfile(resp_rate_brpm=15)
    return generate_session(p, 60.0, SensorConfig().with_disabled("ppg", "audio"), seed=5)[0]


@pytest.mark.parametrize("channel", ["resp", "gz", "gy", "az"])
def test_respiration_rate(session_rr15, channel):
    est = respiration_rate(session_series(session_rr15, channel))
    assert abs(est.rate_per_min - 15) <= 1


@pytest.mark.parametrize("channel", ["gx", "ax"])
def test_noise_axes_have_no_respiration(session_rr15, channel):
    with pytest.raises(NoSpectralPeak):
        respiration_rate(session_series(session_rr15, channel))


def test_respiration_too_short(session_20s):
    with pytest.raises(TooShort):
        respiration_rate(session_series(session_20s[0], "resp"))


# --- noise cancellation ---------------------------------------------------------------


def test_zero_ambient_passes_through():
    x = np.random.default_rng(1).normal(0, 0.1, 4000)
    out = cancel_noise(TimeSeries(0, 8000, Unit.NORMALIZED, x), TimeSeries(0, 8000, Unit.NORMALIZED, np.zeros(4000)))
    np.testing.assert_array_equal(out.samples, x)


def test_pure_leak_converges():
    ambient = synth_ambient(AmbientProfile(mode="noisy", noise_dbfs=-20, tone_dbfs=-30), 8000, 4.0, seed=3)
    silent = TimeSeries(0, 8000, Unit.NORMALIZED, np.zeros(len(ambient)))
    steth = mix_into_stethoscope(silent, ambient, 0.3, 5)
    out = cancel_noise(steth, ambient).samples
    tail = slice(2 * 8000, None)
    assert np.sqrt(np.mean(out[tail] ** 2)) <= 0.05 * np.sqrt(np.mean(steth.samples[tail] ** 2))


def test_length_mismatch():
    a = TimeSeries(0, 8000, Unit.NORMALIZED, np.zeros(10))
    with pytest.raises(LengthMismatch):
        cancel_noise(a, TimeSeries(0, 8000, Unit.NORMALIZED, np.zeros(11)))


@settings(max_examples=6, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.1, 0.5, 1.0]), st.sampled_from([-6.0, 0.0, 6.0]))
def test_cancel_never_hurts(seed, leak, snr_db):
    clean, ambient, steth = leak_scenario(PhysioProfile(), 4000, 3.0, seed, snr_db=snr_db, leak_gain=leak)
    out = cancel_noise(steth, ambient)
    tail = slice(4000, None)
    before = np.mean((steth.samples - clean.samples)[tail] ** 2)
    after = np.mean((out.samples - clean.samples)[tail] ** 2)
    assert after <= before
