"""Multi-rate alignment and vital-sign extraction from recorded sessions."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import signal

from .codec import SessionLog
from .core import (
    GYRO_LSB_PER_DPS,
    ACCEL_LSB_PER_G,
    LED_NAMES,
    SensorId,
    TimeSeries,
    Unit,
    ecg_counts_to_mv,
    led_list,
)


class AnalysisError(ValueError):
    pass


class EmptySession(AnalysisError):
    pass


class BadRate(AnalysisError):
    pass


class TooShort(AnalysisError):
    pass


class RateTooLow(AnalysisError):
    pass


class NotEnoughPeaks(AnalysisError):
    pass


class NoEventsFound(AnalysisError):
    pass


class AmbiguousPairing(AnalysisError):
    pass


class NoSpectralPeak(AnalysisError):
    pass


class LengthMismatch(AnalysisError):
    pass


class ChannelAbsent(AnalysisError):
    pass


# --- channel extraction -----------------------------------------------------

_LED_NAME = {bit: name for name, bit in LED_NAMES.items()}
IMU_AXES = ("ax", "ay", "az", "gx", "gy", "gz")


@dataclass(frozen=True)
class Channel:
    """Irregular view of one recorded channel: record timestamps and values."""

    name: str
    rate_hz: float
    unit: Unit
    times_us: np.ndarray
    values: np.ndarray

    def as_series(self) -> TimeSeries:
        start = int(self.times_us[0]) if len(self.times_us) else 0
        return TimeSeries(start, self.rate_hz, self.unit, self.values)


def session_channels(session: SessionLog) -> dict[str, Channel]:
    """Split records into named channels in physical units.

    Names: ``ecg`` (mV), ``resp`` (counts), ``ppg_<led>`` (counts),
    ``ax/ay/az`` (g), ``gx/gy/gz`` (dps).
    """
    cfg = session.config
    ecg_t, ecg = [], []
    ppg_t, ppg = [], []
    imu_t, imu = [], []
    for rec in session.records:
        sid = rec.sensor_id
        if sid == SensorId.ECG_RESP:
            ecg_t.append(rec.timestamp_us)
            ecg.append((rec.payload.ch1_counts, rec.payload.ch2_counts))
        elif sid == SensorId.PPG:
            ppg_t.append(rec.timestamp_us)
            ppg.append(dict(zip(led_list(rec.payload.led_mask), rec.payload.counts)))
        elif sid == SensorId.IMU:
            p = rec.payload
            imu_t.append(rec.timestamp_us)
            imu.append((p.ax, p.ay, p.az, p.gx, p.gy, p.gz))

    out: dict[str, Channel] = {}
    if ecg_t:
        t = np.asarray(ecg_t, dtype=np.int64)
        arr = np.asarray(ecg, dtype=np.int64)
        rate = float(cfg.ecg.rate_hz)
        out["ecg"] = Channel("ecg", rate, Unit.MILLIVOLTS, t, ecg_counts_to_mv(arr[:, 0]))
        out["resp"] = Channel("resp", rate, Unit.COUNTS, t, arr[:, 1].astype(float))
    if ppg_t:
        t = np.asarray(ppg_t, dtype=np.int64)
        for bit in led_list(0b111):
            vals = [d.get(bit) for d in ppg]
            if any(v is not None for v in vals):
                mask = np.array([v is not None for v in vals])
                out[f"ppg_{_LED_NAME[bit]}"] = Channel(
                    f"ppg_{_LED_NAME[bit]}", float(cfg.ppg.rate_hz), Unit.COUNTS, t[mask],
                    np.array([v for v in vals if v is not None], dtype=float))
    if imu_t:
        t = np.asarray(imu_t, dtype=np.int64)
        arr = np.asarray(imu, dtype=float)
        for i, axis in enumerate(IMU_AXES):
            scale, unit = (ACCEL_LSB_PER_G, Unit.G) if axis[0] == "a" else (GYRO_LSB_PER_DPS, Unit.DPS)
            out[axis] = Channel(axis, float(cfg.imu.rate_hz), unit, t, arr[:, i] / scale)
    return out


def session_series(session: SessionLog, name: str) -> TimeSeries:
    """One named channel as a TimeSeries; ``stethoscope``/``ambient`` come from audio."""
    if name in ("stethoscope", "ambient"):
        if session.audio is None:
            raise ChannelAbsent("audio")
        pcm = np.asarray(session.audio).reshape(-1, 2) / 32768.0
        return TimeSeries(0, float(session.audio_rate_hz), Unit.NORMALIZED, pcm[:, 0 if name == "stethoscope" else 1])
    chans = session_channels(session)
    if name not in chans:
        raise ChannelAbsent(name)
    return chans[name].as_series()


# --- alignment ----------------------------------------------------------------


class AlignMode(enum.Enum):
    HOLD = "hold"
    LINEAR = "linear"


@dataclass(frozen=True)
class AlignedFrame:
    t_us: int
    values: dict  # channel name -> float | None


def frame_times_us(n: int, rate_hz: float) -> np.ndarray:
    return np.rint(np.arange(n) * (1e6 / rate_hz)).astype(np.int64)


def align_arrays(session: SessionLog, target_rate_hz: float, mode: AlignMode | str = AlignMode.HOLD):
    """Vectorised core of :func:`align_streams`: frame times and per-channel arrays (NaN = empty)."""
    mode = AlignMode(mode)
    chans = session_channels(session)
    if not chans:
        raise EmptySession("session has no records")
    max_rate = max(c.rate_hz for c in chans.values())
    if not 0 < target_rate_hz <= max_rate:
        raise BadRate(f"target {target_rate_hz} Hz not in (0, {max_rate}]")
    end_us = max(int(c.times_us[-1]) + 1e6 / c.rate_hz for c in chans.values())
    n = int(np.floor(end_us * target_rate_hz / 1e6 + 1e-9))
    t = frame_times_us(n, target_rate_hz)
    out = {}
    for name, ch in chans.items():
        idx = np.searchsorted(ch.times_us, t, side="right") - 1
        vals = np.full(n, np.nan)
        ok = idx >= 0
        if mode is AlignMode.HOLD:
            vals[ok] = ch.values[idx[ok]]
        else:
            nxt = np.minimum(idx + 1, len(ch.values) - 1)
            i0, i1 = idx[ok], nxt[ok]
            t0, t1 = ch.times_us[i0], ch.times_us[i1]
            span = np.where(t1 > t0, t1 - t0, 1)
            w = np.where(t1 > t0, (t[ok] - t0) / span, 0.0)
            vals[ok] = ch.values[i0] + w * (ch.values[i1] - ch.values[i0])
        out[name] = vals
    return t, out


def align_streams(session: SessionLog, target_rate_hz: float, mode: AlignMode | str = AlignMode.HOLD) -> list[AlignedFrame]:
    """Resample every record channel onto a uniform frame grid from session start.

    ``hold`` takes the latest sample at or before each frame time; ``linear``
    interpolates between the neighbouring samples and holds the last value
    past the end. Channels stay ``None`` until their first sample.
    """
    t, arrays = align_arrays(session, target_rate_hz, mode)
    names = list(arrays)
    cols = [arrays[k].tolist() for k in names]
    frames = []
    for i, ti in enumerate(t.tolist()):
        frames.append(AlignedFrame(ti, {k: (None if c[i] != c[i] else c[i]) for k, c in zip(names, cols)}))
    return frames


# --- ECG ----------------------------------------------------------------------

REFRACTORY_S = 0.25
QRS_BAND_HZ = (5.0, 15.0)
INTEGRATION_S = 0.150


def _qrs_feature(x: np.ndarray, fs: float) -> np.ndarray:
    """Band-pass, differentiate, square, moving-window integrate (zero phase)."""
    sos = signal.butter(2, QRS_BAND_HZ, btype="bandpass", fs=fs, output="sos")
    y = signal.sosfiltfilt(sos, x)
    d = np.gradient(y)
    w = max(1, int(round(INTEGRATION_S * fs)))
    return np.convolve(d * d, np.ones(w) / w, mode="same")


def detect_r_peaks(ecg: TimeSeries) -> np.ndarray:
    """R-peak times (us) with an adaptive signal/noise threshold and search-back.

    Thresholds are relative to running peak levels, so peak times do not
    change under positive scaling or a DC offset of the input.
    """
    fs = ecg.rate_hz
    if fs < 100:
        raise RateTooLow(f"{fs} Hz below 100 Hz")
    if ecg.duration_s < 3:
        raise TooShort(f"{ecg.duration_s:.2f} s below 3 s")
    x = ecg.samples - np.median(ecg.samples)
    if not np.any(x):
        return np.array([], dtype=np.int64)
    feat = _qrs_feature(x, fs)
    refractory = int(round(REFRACTORY_S * fs))
    cands, _ = signal.find_peaks(feat, distance=refractory)
    if len(cands) == 0:
        return np.array([], dtype=np.int64)

    learn = feat[: int(2 * fs)]
    spk = 0.25 * learn.max()
    npk = 0.5 * learn.mean()
    accepted: list[int] = []
    rr_avg = None
    for c in cands:
        thr = npk + 0.25 * (spk - npk)
        if feat[c] > thr and (not accepted or c - accepted[-1] >= refractory):
            if accepted and rr_avg is not None and c - accepted[-1] > 1.66 * rr_avg:
                # search back for a missed beat at half threshold
                lo, hi = accepted[-1] + refractory, c - refractory
                missed = [m for m in cands if lo <= m <= hi and feat[m] > 0.5 * thr]
                if missed:
                    best = max(missed, key=lambda m: feat[m])
                    accepted.append(best)
                    spk = 0.25 * feat[best] + 0.75 * spk
            accepted.append(c)
            spk = 0.125 * feat[c] + 0.875 * spk
            if len(accepted) >= 2:
                recent = np.diff(accepted[-9:])
                rr_avg = float(np.mean(recent))
        else:
            npk = 0.125 * feat[c] + 0.875 * npk

    half = int(round(0.075 * fs))
    times = []
    for c in accepted:
        lo, hi = max(0, c - half), min(len(x), c + half + 1)
        k = lo + int(np.argmax(x[lo:hi]))
        offset = 0.0
        if 0 < k < len(x) - 1:
            a, b, cc = x[k - 1], x[k], x[k + 1]
            denom = a - 2 * b + cc
            if denom < 0:
                offset = 0.5 * (a - cc) / denom
        times.append(ecg.start_us + (k + offset) * 1e6 / fs)
    out = np.unique(np.rint(times).astype(np.int64))
    return out


def heart_rate(r_times_us) -> tuple[float, np.ndarray]:
    """Mean bpm and the per-interval bpm series."""
    r = np.asarray(r_times_us, dtype=float)
    if len(r) < 2:
        raise NotEnoughPeaks(f"{len(r)} peaks; need at least 2")
    bpm = 60e6 / np.diff(r)
    return float(np.mean(bpm)), bpm


# --- heart sounds -------------------------------------------------------------

ENVELOPE_HOP_S = 0.005
ENVELOPE_SMOOTH_S = 0.020
HEART_SOUND_BAND_HZ = (20.0, 150.0)
MIN_GAP_RATIO = 1.2


@dataclass(frozen=True)
class HeartSoundEvent:
    kind: str  # "S1" | "S2"
    time_us: int
    amplitude: float


def heart_sound_envelope(pcg: TimeSeries) -> TimeSeries:
    """Band-passed Hilbert envelope, smoothed and decimated to a 5 ms hop."""
    fs = pcg.rate_hz
    sos = signal.butter(4, HEART_SOUND_BAND_HZ, btype="bandpass", fs=fs, output="sos")
    y = signal.sosfiltfilt(sos, pcg.samples)
    env = np.abs(signal.hilbert(y))
    w = max(1, int(round(ENVELOPE_SMOOTH_S * fs)))
    env = np.convolve(env, np.ones(w) / w, mode="same")
    hop = max(1, int(round(ENVELOPE_HOP_S * fs)))
    return TimeSeries(pcg.start_us, fs / hop, pcg.unit, env[::hop])


def _envelope_peaks(env: TimeSeries) -> tuple[np.ndarray, np.ndarray]:
    e = env.samples
    top = np.percentile(e, 99)
    floor = np.median(e)
    if top <= 0 or top <= 1e-9:
        return np.array([], dtype=float), np.array([])
    height = floor + 0.15 * (top - floor)
    idx, _ = signal.find_peaks(e, height=height, distance=max(1, int(0.05 * env.rate_hz)),
                               prominence=0.1 * (top - floor))
    # parabolic refinement on the hop grid
    pos = idx.astype(float)
    inner = (idx > 0) & (idx < len(e) - 1)
    a, b, c = e[idx[inner] - 1], e[idx[inner]], e[idx[inner] + 1]
    denom = a - 2 * b + c
    pos[inner] += np.where(denom < 0, 0.5 * (a - c) / np.where(denom < 0, denom, -1), 0.0)
    times = env.start_us + pos * 1e6 / env.rate_hz
    return times, e[idx]


def detect_heart_sounds(pcg: TimeSeries, r_times_us=None) -> list[HeartSoundEvent]:
    """Label envelope peaks as S1/S2.

    With R peaks, the envelope peak nearest each R is S1 and the following
    peak is S2. Without them, consecutive peaks separated by the shorter
    (systolic) gap form S1/S2 pairs. In both paths an S2 only follows an S1,
    so a leading lone S2 is dropped and a trailing lone S1 is kept.
    """
    if pcg.rate_hz < 4000:
        raise RateTooLow(f"{pcg.rate_hz} Hz below 4000 Hz")
    if len(pcg) < 64 or not np.any(pcg.samples):
        raise NoEventsFound("silent input")
    env = heart_sound_envelope(pcg)
    times, amps = _envelope_peaks(env)
    if len(times) == 0:
        raise NoEventsFound("no envelope peaks above threshold")

    if r_times_us is not None and len(r_times_us):
        labels = _label_with_r(times, np.asarray(r_times_us, dtype=float))
    else:
        labels = _label_by_gaps(times)
    events = [HeartSoundEvent(k, int(round(times[i])), float(amps[i])) for i, k in labels]
    if not events:
        raise NoEventsFound("no S1/S2 pairs")
    return events


def _label_with_r(times: np.ndarray, r: np.ndarray) -> list[tuple[int, str]]:
    s1 = set()
    for rt in r:
        i = int(np.argmin(np.abs(times - rt)))
        s1.add(i)
    out = []
    for i in sorted(s1):
        out.append((i, "S1"))
        if i + 1 < len(times) and i + 1 not in s1:
            out.append((i + 1, "S2"))
    return out


def _label_by_gaps(times: np.ndarray) -> list[tuple[int, str]]:
    if len(times) < 3:
        if len(times) == 2:
            raise AmbiguousPairing("two peaks cannot establish systole vs diastole")
        return [(0, "S1")]
    gaps = np.diff(times)
    # two-cluster split of gap lengths
    lo_c, hi_c = gaps.min(), gaps.max()
    for _ in range(20):
        short = np.abs(gaps - lo_c) <= np.abs(gaps - hi_c)
        if short.all() or not short.any():
            break
        new_lo, new_hi = gaps[short].mean(), gaps[~short].mean()
        if new_lo == lo_c and new_hi == hi_c:
            break
        lo_c, hi_c = new_lo, new_hi
    if short.all() or not short.any() or hi_c / lo_c < MIN_GAP_RATIO:
        raise AmbiguousPairing(f"gap ratio {hi_c / lo_c:.2f} below {MIN_GAP_RATIO}")
    out = []
    i = 0
    while i < len(times):
        if i < len(gaps) and short[i]:
            out += [(i, "S1"), (i + 1, "S2")]
            i += 2
        elif i == len(times) - 1 and out and i - 1 >= 0 and not short[i - 1]:
            out.append((i, "S1"))
            i += 1
        else:
            i += 1
    return out


# --- spectral rates -----------------------------------------------------------

PROMINENCE_MIN = 12.0
PPG_BAND_HZ = (0.7, 3.0)
RESP_BAND_HZ = (0.08, 0.8)


@dataclass(frozen=True)
class RateEstimate:
    """Spectral rate estimate, per minute; ``band_edge`` flags a peak on a band limit."""

    rate_per_min: float
    frequency_hz: float
    band_edge: bool
    prominence: float


def spectral_peak(series: TimeSeries, band_hz: tuple[float, float], segment_s: float,
                  resolution_hz: float = 0.005) -> RateEstimate:
    """Welch periodogram peak inside ``band_hz`` with a noise-floor prominence test.

    Prominence is the peak density over the median density of all non-DC
    bins; below :data:`PROMINENCE_MIN` the series is treated as having no
    periodic component. Ties resolve to the lowest frequency.
    """
    fs = series.rate_hz
    x = signal.detrend(series.samples)
    nperseg = min(len(x), int(round(segment_s * fs)))
    nfft = max(nperseg, int(2 ** np.ceil(np.log2(fs / resolution_hz))))
    f, p = signal.welch(x, fs=fs, window="hann", nperseg=nperseg, noverlap=nperseg // 2, nfft=nfft, detrend=False)
    in_band = np.flatnonzero((f >= band_hz[0]) & (f <= band_hz[1]))
    if len(in_band) == 0:
        raise NoSpectralPeak("band outside spectrum")
    k = in_band[int(np.argmax(p[in_band]))]
    floor = float(np.median(p[1:]))
    peak = float(p[k])
    prominence = np.inf if floor == 0 and peak > 0 else (peak / floor if floor > 0 else 0.0)
    if not prominence >= PROMINENCE_MIN:
        raise NoSpectralPeak(f"peak prominence {prominence:.2f} below {PROMINENCE_MIN}")
    edge = k in (in_band[0], in_band[-1])
    return RateEstimate(60.0 * f[k], float(f[k]), bool(edge), float(prominence))


def ppg_heart_rate(ppg: TimeSeries) -> RateEstimate:
    if ppg.duration_s < 20:
        raise TooShort(f"{ppg.duration_s:.1f} s below 20 s")
    if ppg.rate_hz < 25:
        raise RateTooLow(f"{ppg.rate_hz} Hz below 25 Hz")
    return spectral_peak(ppg, PPG_BAND_HZ, segment_s=8.0)


def respiration_rate(series: TimeSeries) -> RateEstimate:
    """Breaths per minute from RESP, gyro-y/z or az; the input kind does not matter."""
    if series.duration_s < 30:
        raise TooShort(f"{series.duration_s:.1f} s below 30 s")
    return spectral_peak(series, RESP_BAND_HZ, segment_s=20.0)


# --- noise cancellation -----------------------------------------------------------

NLMS_TAPS = 64
NLMS_STEP = 0.1
NLMS_EPS = 1e-12


def nlms_filter(reference: np.ndarray, desired: np.ndarray, taps: int = NLMS_TAPS,
                step: float = NLMS_STEP, eps: float = NLMS_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Normalised LMS: returns (error = desired - estimate, final weights)."""
    x = np.asarray(reference, dtype=float)
    d = np.asarray(desired, dtype=float)
    n = len(d)
    w = np.zeros(taps)
    buf = np.zeros(taps)  # buf[0] is the newest reference sample
    e = np.empty(n)
    for i in range(n):
        buf[1:] = buf[:-1]
        buf[0] = x[i]
        power = buf @ buf
        y = w @ buf
        err = d[i] - y
        e[i] = err
        if power > 0:
            w += (step * err / (eps + power)) * buf
    return e, w


def cancel_noise(stethoscope: TimeSeries, ambient: TimeSeries, taps: int = NLMS_TAPS,
                 step: float = NLMS_STEP) -> TimeSeries:
    """Subtract the adaptively estimated ambient leak from the chest channel."""
    if len(stethoscope) != len(ambient) or stethoscope.rate_hz != ambient.rate_hz:
        raise LengthMismatch(
            f"{len(stethoscope)} @ {stethoscope.rate_hz} Hz vs {len(ambient)} @ {ambient.rate_hz} Hz")
    e, _ = nlms_filter(ambient.samples, stethoscope.samples, taps, step)
    return stethoscope.with_samples(e)
