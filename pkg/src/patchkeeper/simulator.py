"""Virtual device: coupled multimodal signals on one session clock.

Every random stream is drawn from its own generator seeded with
``[seed, CHANNEL_OFFSET]`` so that switching one sensor on or off never
changes the samples of another.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal

from . import codec
from .core import (
    ACCEL_LSB_PER_G,
    GYRO_LSB_PER_DPS,
    AmbientProfile,
    EcgRespSample,
    ImuSample,
    PhysioProfile,
    PpgSample,
    SensorConfig,
    SensorId,
    SensorRecord,
    TimeSeries,
    Unit,
    led_list,
    mv_to_ecg_counts,
    physical_to_imu_raw,
    validate_config,
)

# 2024-01-01T00:00:00Z; a fixed anchor keeps seeded output byte-identical
DEFAULT_EPOCH_US = 1_704_067_200_000_000

SEED_OFFSETS = {
    "beats": 0,
    "ecg": 1,
    "resp": 2,
    "pcg": 3,
    "ambient": 4,
    "ppg": 5,
    "imu": 6,
    "phase": 7,
}

PPG_LAG_S = 0.250
PPG_RISE_S = 0.12
PPG_DC = {0b001: 200_000.0, 0b010: 150_000.0, 0b100: 250_000.0}

# (offset_s at 60 bpm, relative amplitude, sigma_s, offset scales with sqrt(RR))
ECG_WAVES = (
    (-0.200, 0.12, 0.025, True),   # P
    (-0.030, -0.12, 0.008, False),  # Q
    (0.000, 1.00, 0.010, False),    # R
    (0.030, -0.25, 0.008, False),   # S
    (0.280, 0.30, 0.045, True),     # T
)

S1_CENTER_HZ, S1_DURATION_S = 60.0, 0.070
S2_CENTER_HZ, S2_DURATION_S = 90.0, 0.050
S2_RELATIVE_AMPLITUDE = 0.6
PCG_BAND_HZ = (20.0, 2000.0)


class SimulationError(ValueError):
    pass


class RateTooLowForMorphology(SimulationError):
    pass


class IntervalExceedsBeat(SimulationError):
    pass


class NoLoad(ValueError):
    pass


def channel_rng(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, SEED_OFFSETS[name], *extra])


def sample_times_us(n: int, rate_hz: int) -> np.ndarray:
    """Integer timestamps of a uniform grid, rounded half-up, with no cumulative drift."""
    k = np.arange(n, dtype=np.int64)
    return (k * 1_000_000 + rate_hz // 2) // rate_hz


def _grid(duration_s: float, rate_hz: float) -> tuple[np.ndarray, np.ndarray]:
    n = int(round(duration_s * rate_hz))
    t_us = sample_times_us(n, int(rate_hz)) if float(rate_hz).is_integer() else np.rint(np.arange(n) * 1e6 / rate_hz).astype(np.int64)
    return t_us, t_us / 1e6


# --- events -----------------------------------------------------------------


def beat_times_us(profile: PhysioProfile, duration_s: float, seed: int) -> np.ndarray:
    """R-peak times: first at half a nominal interval, then jittered intervals."""
    rng = channel_rng(seed, "beats")
    rr = 60.0 / profile.heart_rate_bpm
    v = profile.hr_variability_frac
    times = []
    t = 0.5 * rr
    while t < duration_s:
        times.append(t)
        t += rr * (1.0 + (rng.uniform(-v, v) if v else 0.0))
    return np.rint(np.asarray(times) * 1e6).astype(np.int64)


def resp_phase0(seed: int) -> float:
    return float(channel_rng(seed, "phase").uniform(0, 2 * np.pi))


def breath_times_us(profile: PhysioProfile, duration_s: float, seed: int) -> np.ndarray:
    """Inspiration peaks: where the respiration phase crosses pi/2."""
    f = profile.resp_rate_brpm / 60.0
    phi0 = resp_phase0(seed)
    first = ((np.pi / 2 - phi0) % (2 * np.pi)) / (2 * np.pi * f)
    times = np.arange(first, duration_s, 1.0 / f)
    return np.rint(times * 1e6).astype(np.int64)


def heart_sound_times_us(r_times_us: np.ndarray, profile: PhysioProfile, duration_s: float):
    s1 = np.asarray(r_times_us, dtype=np.int64)
    s2 = s1 + int(round(profile.s1_s2_interval_s * 1e6))
    if len(s1) > 1 and np.any(s2[:-1] >= s1[1:]):
        raise IntervalExceedsBeat("S2 would land at or after the next S1")
    return s1, s2[s2 < duration_s * 1e6]


# --- waveforms ---------------------------------------------------------------


def synth_ecg(profile: PhysioProfile, rate_hz: float, duration_s: float, seed: int,
              r_times_us: np.ndarray | None = None) -> tuple[TimeSeries, np.ndarray]:
    """Sum-of-Gaussians PQRST per beat, in millivolts."""
    if rate_hz < 100:
        raise RateTooLowForMorphology(f"ECG morphology needs >= 100 Hz, got {rate_hz}")
    if r_times_us is None:
        r_times_us = beat_times_us(profile, duration_s, seed)
    _, t = _grid(duration_s, rate_hz)
    x = np.zeros_like(t)
    stretch = np.sqrt(60.0 / profile.heart_rate_bpm)
    for r in np.asarray(r_times_us) / 1e6:
        lo, hi = np.searchsorted(t, [r - 0.6, r + 0.7])
        tt = t[lo:hi]
        for offset, amp, sigma, scales in ECG_WAVES:
            centre = r + offset * (stretch if scales else 1.0)
            x[lo:hi] += amp * np.exp(-0.5 * ((tt - centre) / sigma) ** 2)
    x *= profile.ecg_amplitude_mv
    if profile.ecg_noise_mv:
        x += channel_rng(seed, "ecg").normal(0.0, profile.ecg_noise_mv, len(t))
    return TimeSeries(0, float(rate_hz), Unit.MILLIVOLTS, x), np.asarray(r_times_us, dtype=np.int64)


def _bandlimit(x: np.ndarray, rate_hz: float) -> np.ndarray:
    hi = min(PCG_BAND_HZ[1], 0.45 * rate_hz)
    sos = signal.butter(4, [PCG_BAND_HZ[0], hi], btype="bandpass", fs=rate_hz, output="sos")
    return signal.sosfiltfilt(sos, x)


def _add_burst(x: np.ndarray, t: np.ndarray, centre: float, freq: float, duration: float, amp: float) -> None:
    tau = duration / 6.0  # envelope down to e^-3 at the burst edges
    lo, hi = np.searchsorted(t, [centre - 5 * tau, centre + 5 * tau])
    d = t[lo:hi] - centre
    x[lo:hi] += amp * np.cos(2 * np.pi * freq * d) * np.exp(-np.abs(d) / tau)


def synth_pcg(r_times_us, profile: PhysioProfile, audio_rate_hz: int, duration_s: float, seed: int):
    """Chest-microphone heart sounds normalised to full scale.

    S1 is a decaying 60 Hz burst centred on each R peak, S2 a shorter 90 Hz
    burst one systolic interval later; body noise and both bursts are
    band-limited to the head's 20 Hz - 2 kHz passband.
    """
    if audio_rate_hz < 4000:
        raise SimulationError(f"audio rate {audio_rate_hz} below 4000 Hz")
    s1, s2 = heart_sound_times_us(np.asarray(r_times_us, dtype=np.int64), profile, duration_s)
    _, t = _grid(duration_s, audio_rate_hz)
    x = np.zeros_like(t)
    for c in s1 / 1e6:
        _add_burst(x, t, c, S1_CENTER_HZ, S1_DURATION_S, profile.pcg_amplitude)
    for c in s2 / 1e6:
        _add_burst(x, t, c, S2_CENTER_HZ, S2_DURATION_S, profile.pcg_amplitude * S2_RELATIVE_AMPLITUDE)
    if profile.pcg_noise:
        x += channel_rng(seed, "pcg").normal(0.0, profile.pcg_noise, len(t))
    if len(x) > 27:
        x = _bandlimit(x, audio_rate_hz)
    return TimeSeries(0, float(audio_rate_hz), Unit.NORMALIZED, x), s1, s2


def synth_ambient(ambient: AmbientProfile, rate_hz: int, duration_s: float, seed: int) -> TimeSeries:
    """Air-coupled microphone: white noise, plus a tone in noisy mode."""
    _, t = _grid(duration_s, rate_hz)
    x = channel_rng(seed, "ambient").normal(0.0, 10 ** (ambient.noise_dbfs / 20), len(t))
    if ambient.mode == "noisy":
        x += np.sqrt(2) * 10 ** (ambient.tone_dbfs / 20) * np.sin(2 * np.pi * ambient.tone_hz * t)
    return TimeSeries(0, float(rate_hz), Unit.NORMALIZED, x)


def mix_into_stethoscope(chest: TimeSeries, ambient: TimeSeries, leak_gain: float, delay_samples: int = 5) -> TimeSeries:
    if not 0 <= leak_gain <= 1:
        raise SimulationError(f"leak_gain {leak_gain} not in [0, 1]")
    leak = np.zeros(len(chest))
    if leak_gain and delay_samples < len(chest):
        leak[delay_samples:] = leak_gain * ambient.samples[: len(chest) - delay_samples]
    return chest.with_samples(chest.samples + leak)


def leak_scenario(profile: PhysioProfile, rate_hz: int, duration_s: float, seed: int,
                  snr_db: float = 0.0, leak_gain: float = 0.5, delay_samples: int = 5):
    """Clean chest PCG, noisy ambient and their mix at a set interference SNR.

    The ambient channel is rescaled so that the leaked component has
    ``snr_db`` less power than the clean heart sounds. Returns
    ``(clean, ambient, stethoscope)``.
    """
    clean, _, _ = synth_pcg(beat_times_us(profile, duration_s, seed), profile, rate_hz, duration_s, seed)
    ambient = synth_ambient(replace(profile.ambient, mode="noisy"), rate_hz, duration_s, seed)
    p_clean = np.mean(clean.samples**2)
    p_leak = np.mean((leak_gain * ambient.samples) ** 2)
    ambient = ambient.with_samples(ambient.samples * np.sqrt(p_clean / p_leak * 10 ** (-snr_db / 10)))
    return clean, ambient, mix_into_stethoscope(clean, ambient, leak_gain, delay_samples)


def _pulse(tau: np.ndarray) -> np.ndarray:
    out = np.zeros_like(tau)
    pos = tau >= 0
    u = tau[pos] / PPG_RISE_S
    out[pos] = u * np.exp(1.0 - u)
    return out


def ppg_fundamental_amplitude(profile: PhysioProfile) -> float:
    """Amplitude of the heart-rate sinusoid in a periodic train of PPG pulses."""
    f = profile.heart_rate_bpm / 60.0
    w = 2 * np.pi * f * PPG_RISE_S
    return 2 * profile.ppg_pulse_counts * np.e * PPG_RISE_S * f / (1 + w * w)


def ppg_noise_sigma(profile: PhysioProfile) -> float:
    if profile.ppg_snr_db is None:
        return 0.0
    return ppg_fundamental_amplitude(profile) / np.sqrt(2) * 10 ** (-profile.ppg_snr_db / 20)


def synth_ppg(r_times_us, profile: PhysioProfile, rate_hz: float, duration_s: float, seed: int,
              led: int = 0b001) -> TimeSeries:
    """Reflectance counts for one LED.

    Each beat adds a pulse whose foot sits 250 ms after the R peak; the
    baseline wanders with respiration and the noise level is set from
    ``profile.ppg_snr_db`` relative to the heart-rate fundamental.
    """
    if rate_hz < 25:
        raise SimulationError(f"PPG rate {rate_hz} below 25 Hz")
    _, t = _grid(duration_s, rate_hz)
    x = np.zeros_like(t)
    for r in np.asarray(r_times_us) / 1e6:
        foot = r + PPG_LAG_S
        lo, hi = np.searchsorted(t, [foot, foot + 2.0])
        x[lo:hi] += _pulse(t[lo:hi] - foot)
    x *= profile.ppg_pulse_counts
    phase = 2 * np.pi * profile.resp_rate_brpm / 60.0 * t + resp_phase0(seed)
    x += profile.ppg_resp_counts * np.sin(phase)
    sigma = ppg_noise_sigma(profile)
    if sigma:
        x += channel_rng(seed, "ppg", led).normal(0.0, sigma, len(t))
    return TimeSeries(0, float(rate_hz), Unit.COUNTS, PPG_DC.get(led, 200_000.0) + x)


def synth_resp_and_imu(profile: PhysioProfile, resp_rate_hz: float, imu_rate_hz: float,
                       duration_s: float, seed: int) -> tuple[TimeSeries, dict[str, TimeSeries]]:
    """Respiration on RESP, gyro-y, gyro-z and az; gx, ax, ay carry noise only."""
    f = profile.resp_rate_brpm / 60.0
    phi0 = resp_phase0(seed)

    _, t = _grid(duration_s, resp_rate_hz)
    resp = profile.resp_amplitude_counts * np.sin(2 * np.pi * f * t + phi0)
    if profile.resp_noise_counts:
        resp = resp + channel_rng(seed, "resp").normal(0.0, profile.resp_noise_counts, len(t))

    _, ti = _grid(duration_s, imu_rate_hz)
    phase = 2 * np.pi * f * ti + phi0
    rng = channel_rng(seed, "imu")
    n = len(ti)
    noise_a = rng.normal(0.0, profile.imu_accel_noise_g, (3, n))
    noise_g = rng.normal(0.0, profile.imu_gyro_noise_dps, (3, n))
    axes = {
        "ax": noise_a[0],
        "ay": noise_a[1],
        "az": 1.0 + profile.resp_accel_g * np.sin(phase) + noise_a[2],
        "gx": noise_g[0],
        "gy": profile.resp_gyro_y_dps * np.cos(phase) + noise_g[1],
        "gz": profile.resp_gyro_z_dps * np.sin(phase) + noise_g[2],
    }
    imu = {
        name: TimeSeries(0, float(imu_rate_hz), Unit.G if name[0] == "a" else Unit.DPS, values)
        for name, values in axes.items()
    }
    return TimeSeries(0, float(resp_rate_hz), Unit.COUNTS, resp), imu


# --- session ----------------------------------------------------------------


@dataclass
class GroundTruth:
    r_peak_times_us: np.ndarray
    s1_times_us: np.ndarray
    s2_times_us: np.ndarray
    breath_times_us: np.ndarray
    mean_hr_bpm: float
    mean_rr_brpm: float

    def to_events(self) -> list[codec.Event]:
        events = []
        for kind, times in (("RPEAK", self.r_peak_times_us), ("S1", self.s1_times_us),
                            ("S2", self.s2_times_us), ("BREATH", self.breath_times_us)):
            events.extend(codec.Event(int(t), kind) for t in times)
        return events

    @classmethod
    def from_events(cls, events) -> "GroundTruth":
        by_kind = {k: np.array(sorted(e.time_us for e in events if e.kind == k), dtype=np.int64)
                   for k in codec.EVENT_KINDS}
        return cls(by_kind["RPEAK"], by_kind["S1"], by_kind["S2"], by_kind["BREATH"],
                   _mean_rate(by_kind["RPEAK"]), _mean_rate(by_kind["BREATH"]))


def _mean_rate(times_us: np.ndarray) -> float:
    """Mean of per-interval rates, per minute."""
    if len(times_us) < 2:
        return float("nan")
    return float(np.mean(60e6 / np.diff(times_us)))


def _ecg_records(ecg_mv: TimeSeries, resp_counts: TimeSeries) -> list[SensorRecord]:
    ts = sample_times_us(len(ecg_mv), int(ecg_mv.rate_hz)).tolist()
    ch1 = mv_to_ecg_counts(ecg_mv.samples).tolist()
    ch2 = np.clip(np.rint(resp_counts.samples), -(1 << 23), (1 << 23) - 1).astype(np.int64).tolist()
    return [SensorRecord(SensorId.ECG_RESP, t, EcgRespSample(a, b)) for t, a, b in zip(ts, ch1, ch2)]


def generate_session(profile: PhysioProfile, duration_s: float, cfg: SensorConfig, seed: int,
                     start_epoch_us: int = DEFAULT_EPOCH_US) -> tuple[codec.SessionLog, GroundTruth]:
    """Simulate a full recording; deterministic for fixed (profile, cfg, seed)."""
    validate_config(cfg)
    if not 0 < duration_s <= 86400:
        raise SimulationError(f"duration {duration_s} s not in (0, 86400]")

    r_times = beat_times_us(profile, duration_s, seed)
    s1, s2 = heart_sound_times_us(r_times, profile, duration_s)
    truth = GroundTruth(
        r_times, s1, s2, breath_times_us(profile, duration_s, seed),
        _mean_rate(r_times), float(profile.resp_rate_brpm),
    )

    records: list[SensorRecord] = []
    if cfg.ecg.enabled:
        ecg, _ = synth_ecg(profile, cfg.ecg.rate_hz, duration_s, seed, r_times)
        resp, _ = synth_resp_and_imu(profile, cfg.ecg.rate_hz, cfg.imu.rate_hz, duration_s, seed)
        records += _ecg_records(ecg, resp)
    if cfg.ppg.enabled:
        leds = led_list(cfg.ppg_led_mask)
        chans = [synth_ppg(r_times, profile, cfg.ppg.rate_hz, duration_s, seed, led) for led in leds]
        ts = _grid(duration_s, cfg.ppg.rate_hz)[0].tolist()
        counts = np.clip(np.rint(np.vstack([c.samples for c in chans])), 0, 0xFFFFFFFF).astype(np.int64).T.tolist()
        records += [SensorRecord(SensorId.PPG, t, PpgSample(cfg.ppg_led_mask, tuple(c))) for t, c in zip(ts, counts)]
    if cfg.imu.enabled:
        _, imu = synth_resp_and_imu(profile, cfg.ecg.rate_hz, cfg.imu.rate_hz, duration_s, seed)
        raw = [physical_to_imu_raw(imu[a].samples, ACCEL_LSB_PER_G).tolist() for a in ("ax", "ay", "az")]
        raw += [physical_to_imu_raw(imu[g].samples, GYRO_LSB_PER_DPS).tolist() for g in ("gx", "gy", "gz")]
        ts = _grid(duration_s, cfg.imu.rate_hz)[0].tolist()
        records += [SensorRecord(SensorId.IMU, t, ImuSample(*vals)) for t, *vals in zip(ts, *raw)]

    audio = None
    if cfg.audio.enabled:
        rate = cfg.audio.sample_rate_hz
        chest, _, _ = synth_pcg(r_times, profile, rate, duration_s, seed)
        ambient = synth_ambient(profile.ambient, rate, duration_s, seed)
        chest = mix_into_stethoscope(chest, ambient, profile.ambient.leak_gain, profile.ambient.leak_delay_samples)
        audio = to_pcm16(chest.samples, ambient.samples)

    header = codec.SessionHeader(cfg, start_epoch_us)
    log = codec.SessionLog(header, codec.sort_records(records), audio, truth.to_events())
    return log, truth


def to_pcm16(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Interleave two normalised channels as int16, clipping at full scale."""
    stereo = np.empty(2 * len(left), dtype=np.int16)
    stereo[0::2] = np.clip(np.rint(np.asarray(left) * 32768.0), -32768, 32767)
    stereo[1::2] = np.clip(np.rint(np.asarray(right) * 32768.0), -32768, 32767)
    return stereo


# --- battery ----------------------------------------------------------------


@dataclass(frozen=True)
class BatteryModel:
    """Linear current model, calibrated so the default config lasts 400 mAh / 20 mA.

    The per-sensor split is an internal default, not a measured figure.
    """

    capacity_mah: float = 400.0
    base_current_ma: float = 3.0
    current_ma: dict = field(default_factory=lambda: {
        SensorId.ECG_RESP: 3.0,
        SensorId.PPG: 4.0,
        SensorId.IMU: 2.0,
        "audio": 8.0,
    })


def estimate_battery_life(cfg: SensorConfig, model: BatteryModel = BatteryModel()) -> float:
    load = model.base_current_ma
    for sensor in cfg.enabled_sensors():
        load += model.current_ma[sensor]
    if cfg.audio.enabled:
        load += model.current_ma["audio"]
    if load <= 0:
        raise NoLoad("no current drawn; battery life is unbounded")
    return model.capacity_mah / load
