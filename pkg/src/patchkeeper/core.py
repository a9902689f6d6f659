"""Shared domain types, sensor identities, unit conversions and config handling."""

from __future__ import annotations

import configparser
import enum
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Union

import numpy as np

ECG_FULL_SCALE_MV = 2400.0
ECG_GAIN = 6
ECG_COUNTS_MIN = -(1 << 23)
ECG_COUNTS_MAX = (1 << 23) - 1
ECG_MV_PER_COUNT = ECG_FULL_SCALE_MV / (ECG_GAIN * (1 << 23))

ACCEL_LSB_PER_G = 16384.0
GYRO_LSB_PER_DPS = 131.0

RATE_MIN_HZ = 1
RATE_MAX_HZ = 1000
AUDIO_RATES_HZ = (4000, 8000, 16000)

LED_GREEN = 0b001
LED_RED = 0b010
LED_IR = 0b100
LED_NAMES = {"green": LED_GREEN, "red": LED_RED, "ir": LED_IR}


class SensorId(enum.IntEnum):
    """Record-carrying sensor identities. Audio travels in its own container.

    Undefined byte values resolve to pseudo-members named ``UNKNOWN_0x..`` so
    that a parser can carry records from newer firmware without losing them.
    """

    ECG_RESP = 0x01
    PPG = 0x02
    IMU = 0x03
    MARKER = 0x7F

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, int) and 0 <= value <= 0xFF:
            member = int.__new__(cls, value)
            member._name_ = f"UNKNOWN_{value:#04x}"
            member._value_ = value
            return member
        return None

    @property
    def is_known(self) -> bool:
        return self._name_ in type(self).__members__


class Unit(enum.Enum):
    MILLIVOLTS = "mV"
    COUNTS = "counts"
    G = "g"
    DPS = "dps"
    PASCAL_ARBITRARY = "Pa(arb)"
    NORMALIZED = "norm"


# --- errors -----------------------------------------------------------------


class ConfigError(ValueError):
    """Invalid sensor configuration; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class RateOutOfRange(ConfigError):
    pass


class NoSensorEnabled(ConfigError):
    pass


class EmptyLedMask(ConfigError):
    pass


class OutOfRange(ValueError):
    pass


class ProfileError(ValueError):
    pass


# --- configuration ----------------------------------------------------------


@dataclass(frozen=True, slots=True)
class ChannelConfig:
    enabled: bool = True
    rate_hz: int = 125


@dataclass(frozen=True, slots=True)
class AudioConfig:
    enabled: bool = True
    sample_rate_hz: int = 8000


@dataclass(frozen=True, slots=True)
class SensorConfig:
    """Which sensors run and how fast: ECG/RESP 125 Hz, PPG 100 Hz (green), IMU 50 Hz, audio 8 kHz."""

    ecg: ChannelConfig = ChannelConfig(True, 125)
    ppg: ChannelConfig = ChannelConfig(True, 100)
    imu: ChannelConfig = ChannelConfig(True, 50)
    ppg_led_mask: int = LED_GREEN
    audio: AudioConfig = AudioConfig(True, 8000)

    def channel(self, sensor: SensorId) -> ChannelConfig:
        return {
            SensorId.ECG_RESP: self.ecg,
            SensorId.PPG: self.ppg,
            SensorId.IMU: self.imu,
        }[sensor]

    def enabled_sensors(self) -> list[SensorId]:
        return [s for s in (SensorId.ECG_RESP, SensorId.PPG, SensorId.IMU) if self.channel(s).enabled]

    def with_disabled(self, *names: str) -> "SensorConfig":
        cfg = self
        for name in names:
            if name == "audio":
                cfg = replace(cfg, audio=replace(cfg.audio, enabled=False))
            elif name in ("ecg", "ppg", "imu"):
                cfg = replace(cfg, **{name: replace(getattr(cfg, name), enabled=False)})
            else:
                raise ConfigError(name, "unknown sensor name")
        return cfg


def validate_config(cfg: SensorConfig) -> SensorConfig:
    """Check ``cfg`` and return it unchanged, or raise a :class:`ConfigError`.

    Rates are checked whether or not the sensor is enabled, so a config that
    validates stays valid when a sensor is switched back on.
    """
    for name in ("ecg", "ppg", "imu"):
        rate = getattr(cfg, name).rate_hz
        if not isinstance(rate, (int, np.integer)) or not RATE_MIN_HZ <= rate <= RATE_MAX_HZ:
            raise RateOutOfRange(f"{name}.rate_hz", f"{rate!r} not in [{RATE_MIN_HZ}, {RATE_MAX_HZ}]")
    if cfg.audio.sample_rate_hz not in AUDIO_RATES_HZ:
        raise RateOutOfRange("audio.sample_rate_hz", f"{cfg.audio.sample_rate_hz!r} not in {AUDIO_RATES_HZ}")
    if not 0 <= cfg.ppg_led_mask <= 0b111:
        raise ConfigError("ppg_led_mask", f"{cfg.ppg_led_mask!r} is not a 3-bit mask")
    if cfg.ppg.enabled and cfg.ppg_led_mask == 0:
        raise EmptyLedMask("ppg_led_mask", "PPG enabled with no LED selected")
    if not cfg.enabled_sensors() and not cfg.audio.enabled:
        raise NoSensorEnabled("sensors", "all sensors and audio are disabled")
    return cfg


def led_list(mask: int) -> list[int]:
    """Single-LED bits of ``mask`` in payload order (green, red, IR)."""
    return [bit for bit in (LED_GREEN, LED_RED, LED_IR) if mask & bit]


# --- samples and records ----------------------------------------------------


@dataclass(frozen=True, slots=True)
class EcgRespSample:
    ch1_counts: int
    ch2_counts: int


@dataclass(frozen=True, slots=True)
class PpgSample:
    led_mask: int
    counts: tuple[int, ...]


@dataclass(frozen=True, slots=True)
class ImuSample:
    ax: int
    ay: int
    az: int
    gx: int
    gy: int
    gz: int


@dataclass(frozen=True, slots=True)
class Marker:
    code: int


@dataclass(frozen=True, slots=True)
class RawPayload:
    """Payload of a sensor id this version does not understand."""

    data: bytes


Payload = Union[EcgRespSample, PpgSample, ImuSample, Marker, RawPayload]


@dataclass(frozen=True, slots=True)
class SensorRecord:
    sensor_id: SensorId
    timestamp_us: int
    payload: Payload


# --- time series ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """Uniformly sampled channel; sample k sits at ``start_us + k * 1e6 / rate_hz``."""

    start_us: int
    rate_hz: float
    unit: Unit
    samples: np.ndarray

    def __post_init__(self):
        if not self.rate_hz > 0:
            raise ValueError(f"rate_hz must be positive, got {self.rate_hz}")
        arr = np.array(self.samples, dtype=float)
        arr.flags.writeable = False
        object.__setattr__(self, "samples", arr)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.rate_hz

    def times_us(self) -> np.ndarray:
        return self.start_us + np.arange(len(self.samples)) * (1e6 / self.rate_hz)

    def with_samples(self, samples) -> "TimeSeries":
        return TimeSeries(self.start_us, self.rate_hz, self.unit, np.asarray(samples, dtype=float))


# --- physiology -------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class AmbientProfile:
    """Ambient microphone content and how much of it leaks into the chest mic."""

    mode: str = "quiet"  # "quiet" | "noisy"
    noise_dbfs: float = -60.0
    tone_hz: float = 150.0
    tone_dbfs: float = -70.0
    leak_gain: float = 0.0
    leak_delay_samples: int = 5


@dataclass(frozen=True, slots=True)
class PhysioProfile:
    heart_rate_bpm: float = 72.0
    resp_rate_brpm: float = 15.0
    s1_s2_interval_s: float = 0.30
    hr_variability_frac: float = 0.02
    ecg_amplitude_mv: float = 1.0
    ecg_noise_mv: float = 0.01
    resp_amplitude_counts: float = 20000.0
    resp_noise_counts: float = 1000.0
    pcg_amplitude: float = 0.3
    pcg_noise: float = 0.002
    ppg_pulse_counts: float = 2000.0
    ppg_resp_counts: float = 1500.0
    ppg_snr_db: float | None = 0.0  # None disables PPG noise
    imu_accel_noise_g: float = 0.002
    imu_gyro_noise_dps: float = 0.1
    resp_accel_g: float = 0.01
    resp_gyro_y_dps: float = 2.0
    resp_gyro_z_dps: float = 1.5
    ambient: AmbientProfile = field(default_factory=AmbientProfile)

    def __post_init__(self):
        if not 30 <= self.heart_rate_bpm <= 220:
            raise ProfileError(f"heart_rate_bpm {self.heart_rate_bpm} not in [30, 220]")
        if not 4 <= self.resp_rate_brpm <= 60:
            raise ProfileError(f"resp_rate_brpm {self.resp_rate_brpm} not in [4, 60]")
        if not 0 <= self.hr_variability_frac <= 0.2:
            raise ProfileError(f"hr_variability_frac {self.hr_variability_frac} not in [0, 0.2]")
        if not 0 < self.s1_s2_interval_s < 60.0 / self.heart_rate_bpm:
            raise ProfileError(
                f"s1_s2_interval_s {self.s1_s2_interval_s} must be positive and shorter than the beat"
            )
        if not 0 <= self.ambient.leak_gain <= 1:
            raise ProfileError(f"leak_gain {self.ambient.leak_gain} not in [0, 1]")
        if self.ambient.mode not in ("quiet", "noisy"):
            raise ProfileError(f"ambient mode {self.ambient.mode!r} not quiet/noisy")


# --- conversions ------------------------------------------------------------


def ecg_counts_to_mv(counts):
    """Convert signed 24-bit ADC counts to millivolts (gain 6, 2.4 V reference).

    Accepts a scalar or an array; raises :class:`OutOfRange` outside 24 bits.
    """
    arr = np.asarray(counts)
    if arr.size and (arr.min() < ECG_COUNTS_MIN or arr.max() > ECG_COUNTS_MAX):
        raise OutOfRange(f"ECG counts outside [{ECG_COUNTS_MIN}, {ECG_COUNTS_MAX}]")
    out = arr * ECG_MV_PER_COUNT
    return float(out) if out.ndim == 0 else out


def mv_to_ecg_counts(mv):
    """Inverse of :func:`ecg_counts_to_mv`, rounded and clipped to the rails."""
    counts = np.clip(np.rint(np.asarray(mv, dtype=float) / ECG_MV_PER_COUNT), ECG_COUNTS_MIN, ECG_COUNTS_MAX)
    return counts.astype(np.int64)


def imu_raw_to_physical(s: ImuSample) -> tuple[tuple[float, float, float], tuple[float, float, float]]:
    accel = (s.ax / ACCEL_LSB_PER_G, s.ay / ACCEL_LSB_PER_G, s.az / ACCEL_LSB_PER_G)
    gyro = (s.gx / GYRO_LSB_PER_DPS, s.gy / GYRO_LSB_PER_DPS, s.gz / GYRO_LSB_PER_DPS)
    return accel, gyro


def physical_to_imu_raw(values, lsb_per_unit: float) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values, dtype=float) * lsb_per_unit), -32768, 32767).astype(np.int64)


# --- config file ------------------------------------------------------------
#
# INI layout, every key optional:
#
#   [ecg] enabled, rate_hz          [ppg] enabled, rate_hz, leds = green,red,ir
#   [imu] enabled, rate_hz          [audio] enabled, sample_rate_hz
#   [profile] any PhysioProfile float field
#   [ambient] any AmbientProfile field


def _parse_leds(text: str) -> int:
    text = text.strip().lower()
    if text.isdigit():
        return int(text)
    mask = 0
    for name in filter(None, (part.strip() for part in text.split(","))):
        if name not in LED_NAMES:
            raise ConfigError("ppg.leds", f"unknown LED {name!r}")
        mask |= LED_NAMES[name]
    return mask


def _coerce(kind, raw: str):
    if kind is bool:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if kind is int:
        return int(raw)
    if raw.strip().lower() == "none":
        return None
    try:
        return float(raw)
    except ValueError:
        return raw.strip()


def parse_config_text(text: str) -> tuple[SensorConfig, PhysioProfile]:
    parser = configparser.ConfigParser()
    parser.read_string(text)
    cfg = SensorConfig()
    for name in ("ecg", "ppg", "imu"):
        if parser.has_section(name):
            sec = parser[name]
            chan = getattr(cfg, name)
            chan = ChannelConfig(sec.getboolean("enabled", chan.enabled), sec.getint("rate_hz", chan.rate_hz))
            cfg = replace(cfg, **{name: chan})
    if parser.has_option("ppg", "leds"):
        cfg = replace(cfg, ppg_led_mask=_parse_leds(parser["ppg"]["leds"]))
    if parser.has_section("audio"):
        sec = parser["audio"]
        cfg = replace(
            cfg,
            audio=AudioConfig(sec.getboolean("enabled", cfg.audio.enabled), sec.getint("sample_rate_hz", cfg.audio.sample_rate_hz)),
        )

    ambient_kw = {}
    if parser.has_section("ambient"):
        known = {f.name: f for f in fields(AmbientProfile)}
        for key, raw in parser["ambient"].items():
            if key not in known:
                raise ConfigError(f"ambient.{key}", "unknown key")
            kind = int if key == "leak_delay_samples" else (str if key == "mode" else float)
            ambient_kw[key] = raw.strip() if kind is str else _coerce(kind, raw)
    profile_kw = {}
    if parser.has_section("profile"):
        known = {f.name for f in fields(PhysioProfile)} - {"ambient"}
        for key, raw in parser["profile"].items():
            if key not in known:
                raise ConfigError(f"profile.{key}", "unknown key")
            profile_kw[key] = _coerce(float, raw)
    profile = PhysioProfile(**profile_kw, ambient=AmbientProfile(**ambient_kw))
    return cfg, profile


def load_config(path: str | Path) -> tuple[SensorConfig, PhysioProfile]:
    return parse_config_text(Path(path).read_text())


def dump_config_text(cfg: SensorConfig) -> str:
    leds = ",".join(name for name, bit in LED_NAMES.items() if cfg.ppg_led_mask & bit)
    lines = []
    for name in ("ecg", "ppg", "imu"):
        chan = getattr(cfg, name)
        lines += [f"[{name}]", f"enabled = {str(chan.enabled).lower()}", f"rate_hz = {chan.rate_hz}"]
        if name == "ppg":
            lines.append(f"leds = {leds or 0}")
        lines.append("")
    lines += ["[audio]", f"enabled = {str(cfg.audio.enabled).lower()}", f"sample_rate_hz = {cfg.audio.sample_rate_hz}", ""]
    return "\n".join(lines)
