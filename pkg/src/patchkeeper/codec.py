"""Session log codec: the ``.pks`` record file, the stereo WAV and the truth sidecar.

Record file layout (all integers little-endian)::

    header : "PKLG" | version u16 | session_start_epoch_us u64 | n u8 | n * (id u8, rate_hz u16, flags u8)
    record : sensor_id u8 | timestamp_us u64 | payload_len u16 | payload | crc8

``crc8`` uses polynomial 0x07, init 0x00, over every preceding byte of the record.
"""

from __future__ import annotations

import io
import os
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

import numpy as np

from .core import (
    AUDIO_RATES_HZ,
    ECG_COUNTS_MAX,
    ECG_COUNTS_MIN,
    AudioConfig,
    ChannelConfig,
    EcgRespSample,
    ImuSample,
    Marker,
    PpgSample,
    RawPayload,
    SensorConfig,
    SensorId,
    SensorRecord,
    TimeSeries,
    Unit,
    ConfigError,
    led_list,
    validate_config,
)

MAGIC = b"PKLG"
VERSION = 1
AUDIO_CONFIG_ID = 0x80  # config-block slot for the audio container; never a record id
MAX_PAYLOAD = 0xFFFF
RECORD_PREFIX = struct.Struct("<BQH")
HEADER_FIXED = struct.Struct("<4sHQB")
CONFIG_ENTRY = struct.Struct("<BHB")
RECORD_OVERHEAD = RECORD_PREFIX.size + 1

FLAG_ENABLED = 0x01
EVENT_KINDS = ("RPEAK", "S1", "S2", "BREATH")


def _crc8_table() -> bytes:
    table = bytearray(256)
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = ((crc << 1) ^ 0x07) & 0xFF if crc & 0x80 else (crc << 1) & 0xFF
        table[i] = crc
    return bytes(table)


_CRC8 = _crc8_table()


def crc8(data: bytes, crc: int = 0) -> int:
    """CRC-8/SMBUS: poly 0x07, init 0x00, no reflection, no final xor."""
    table = _CRC8
    for b in data:
        crc = table[crc ^ b]
    return crc


# --- errors -----------------------------------------------------------------


class CodecError(Exception):
    pass


class BadMagic(CodecError):
    pass


class UnsupportedVersion(CodecError):
    pass


class BadHeader(CodecError):
    pass


class UnsortedInput(CodecError):
    pass


class PayloadTooLarge(CodecError):
    pass


class IoFailure(CodecError):
    pass


class CorruptRecord(CodecError):
    """A record that cannot be trusted; ``offset`` is where the record starts."""

    def __init__(self, offset: int, message: str = ""):
        super().__init__(f"{type(self).__name__} at offset {offset}" + (f": {message}" if message else ""))
        self.offset = offset


class CrcMismatch(CorruptRecord):
    pass


class TruncatedRecord(CorruptRecord):
    pass


class MalformedRecord(CorruptRecord):
    pass


class BadRate(CodecError):
    pass


class NotRiff(CodecError):
    pass


class UnsupportedEncoding(CodecError):
    pass


class ChannelCountNotTwo(CodecError):
    pass


# --- header -----------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class SessionHeader:
    config: SensorConfig = SensorConfig()
    session_start_epoch_us: int = 0
    version: int = VERSION

    def encode(self) -> bytes:
        cfg = self.config
        entries = [
            (SensorId.ECG_RESP, cfg.ecg.rate_hz, FLAG_ENABLED if cfg.ecg.enabled else 0),
            (SensorId.PPG, cfg.ppg.rate_hz, (FLAG_ENABLED if cfg.ppg.enabled else 0) | (cfg.ppg_led_mask << 1)),
            (SensorId.IMU, cfg.imu.rate_hz, FLAG_ENABLED if cfg.imu.enabled else 0),
            (AUDIO_CONFIG_ID, cfg.audio.sample_rate_hz, FLAG_ENABLED if cfg.audio.enabled else 0),
        ]
        out = bytearray(HEADER_FIXED.pack(MAGIC, self.version, self.session_start_epoch_us, len(entries)))
        for sid, rate, flags in entries:
            out += CONFIG_ENTRY.pack(int(sid), rate, flags)
        return bytes(out)


def encode_config_block(cfg: SensorConfig) -> bytes:
    """The count-prefixed config list alone (also the SET_CONFIG payload)."""
    return SessionHeader(cfg).encode()[HEADER_FIXED.size - 1 :]


def decode_config_block(block: bytes) -> SensorConfig:
    if not block:
        raise BadHeader("empty config block")
    n = block[0]
    if len(block) != 1 + n * CONFIG_ENTRY.size:
        raise BadHeader(f"config block length {len(block)} does not match {n} entries")
    off = ChannelConfig(False, 1)
    chans = {SensorId.ECG_RESP: off, SensorId.PPG: off, SensorId.IMU: off}
    audio = AudioConfig(False, 8000)
    led_mask = 0
    for i in range(n):
        sid, rate, flags = CONFIG_ENTRY.unpack_from(block, 1 + i * CONFIG_ENTRY.size)
        enabled = bool(flags & FLAG_ENABLED)
        if sid == AUDIO_CONFIG_ID:
            audio = AudioConfig(enabled, rate)
        elif sid in (SensorId.ECG_RESP, SensorId.PPG, SensorId.IMU):
            chans[SensorId(sid)] = ChannelConfig(enabled, rate)
            if sid == SensorId.PPG:
                led_mask = (flags >> 1) & 0b111
        # unknown ids are skipped for forward compatibility
    cfg = SensorConfig(chans[SensorId.ECG_RESP], chans[SensorId.PPG], chans[SensorId.IMU], led_mask, audio)
    try:
        return validate_config(cfg)
    except ConfigError as exc:
        raise BadHeader(f"config block invalid: {exc}") from exc


def _read_exact(source: BinaryIO, n: int) -> bytes:
    chunks = []
    while n:
        chunk = source.read(n)
        if not chunk:
            break
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_header(source: BinaryIO) -> SessionHeader:
    return _read_header(source)[0]


def _read_header(source: BinaryIO) -> tuple[SessionHeader, int]:
    fixed = _read_exact(source, HEADER_FIXED.size)
    if len(fixed) < 4 or fixed[:4] != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {fixed[:4]!r}")
    if len(fixed) < HEADER_FIXED.size:
        raise BadHeader("header truncated")
    _, version, epoch, n = HEADER_FIXED.unpack(fixed)
    if version != VERSION:
        raise UnsupportedVersion(f"version {version}")
    entries = _read_exact(source, n * CONFIG_ENTRY.size)
    if len(entries) < n * CONFIG_ENTRY.size:
        raise BadHeader("config block truncated")
    header = SessionHeader(decode_config_block(bytes([n]) + entries), epoch, version)
    return header, HEADER_FIXED.size + len(entries)


# --- records ----------------------------------------------------------------


def encode_payload(payload) -> bytes:
    if isinstance(payload, EcgRespSample):
        _check_ecg_counts(payload)
        return struct.pack("<ii", payload.ch1_counts, payload.ch2_counts)
    if isinstance(payload, ImuSample):
        return struct.pack("<6h", payload.ax, payload.ay, payload.az, payload.gx, payload.gy, payload.gz)
    if isinstance(payload, PpgSample):
        n = len(led_list(payload.led_mask))
        if not 0 < payload.led_mask <= 0b111:
            raise ValueError(f"PPG led mask {payload.led_mask:#x} is not a non-empty 3-bit mask")
        if n != len(payload.counts):
            raise ValueError(f"PPG mask {payload.led_mask:#05b} needs {n} counts, got {len(payload.counts)}")
        return struct.pack(f"<B{n}I", payload.led_mask, *payload.counts)
    if isinstance(payload, Marker):
        return struct.pack("<B", payload.code)
    if isinstance(payload, RawPayload):
        return bytes(payload.data)
    raise TypeError(f"unsupported payload {payload!r}")


def _check_ecg_counts(sample: EcgRespSample) -> None:
    for value in (sample.ch1_counts, sample.ch2_counts):
        if not ECG_COUNTS_MIN <= value <= ECG_COUNTS_MAX:
            raise ValueError(f"ECG/RESP count {value} outside signed 24-bit range")


def _expected_lengths(sensor_id: int) -> tuple[int, ...] | None:
    if sensor_id == SensorId.ECG_RESP:
        return (8,)
    if sensor_id == SensorId.IMU:
        return (12,)
    if sensor_id == SensorId.PPG:
        return (5, 9, 13)
    if sensor_id == SensorId.MARKER:
        return (1,)
    return None


def decode_payload(sensor_id: SensorId, data: bytes):
    if sensor_id == SensorId.ECG_RESP:
        sample = EcgRespSample(*struct.unpack("<ii", data))
        _check_ecg_counts(sample)
        return sample
    if sensor_id == SensorId.IMU:
        return ImuSample(*struct.unpack("<6h", data))
    if sensor_id == SensorId.PPG:
        mask = data[0]
        n = len(led_list(mask))
        if not 0 < mask <= 0b111 or len(data) != 1 + 4 * n:
            raise ValueError(f"PPG payload of {len(data)} bytes inconsistent with mask {mask:#x}")
        return PpgSample(mask, struct.unpack(f"<{n}I", data[1:]))
    if sensor_id == SensorId.MARKER:
        return Marker(data[0])
    return RawPayload(bytes(data))


def encode_record(rec: SensorRecord) -> bytes:
    payload = encode_payload(rec.payload)
    if len(payload) > MAX_PAYLOAD:
        raise PayloadTooLarge(f"{len(payload)} byte payload exceeds {MAX_PAYLOAD}")
    body = RECORD_PREFIX.pack(int(rec.sensor_id), rec.timestamp_us, len(payload)) + payload
    return body + bytes([crc8(body)])


def decode_record(data: bytes, offset: int = 0) -> SensorRecord:
    """Decode one complete encoded record (e.g. a reassembled stream payload)."""
    if len(data) < RECORD_OVERHEAD:
        raise TruncatedRecord(offset, "shorter than record overhead")
    sid, ts, plen = RECORD_PREFIX.unpack_from(data)
    if len(data) != RECORD_OVERHEAD + plen:
        raise MalformedRecord(offset, f"payload_len {plen} disagrees with {len(data)} byte record")
    if crc8(data[:-1]) != data[-1]:
        raise CrcMismatch(offset)
    sensor = SensorId(sid)
    try:
        payload = decode_payload(sensor, data[RECORD_PREFIX.size : -1])
    except (ValueError, struct.error, IndexError) as exc:
        raise MalformedRecord(offset, str(exc)) from exc
    return SensorRecord(sensor, ts, payload)


def _record_key(rec: SensorRecord) -> tuple[int, int]:
    return rec.timestamp_us, int(rec.sensor_id)


def sort_records(records: Iterable[SensorRecord]) -> list[SensorRecord]:
    """Canonical file order: timestamp, then ascending sensor id."""
    return sorted(records, key=_record_key)


def write_session(header: SessionHeader, records: Iterable[SensorRecord], sink: BinaryIO) -> int:
    """Write header and records to ``sink``; return the number of bytes written.

    Records must already be in canonical order; nothing is reordered here.
    """
    written = 0
    try:
        head = header.encode()
        sink.write(head)
        written += len(head)
        last = None
        for rec in records:
            key = _record_key(rec)
            if last is not None and key < last:
                raise UnsortedInput(f"record at {rec.timestamp_us} us (sensor {int(rec.sensor_id)}) after {last}")
            last = key
            blob = encode_record(rec)
            sink.write(blob)
            written += len(blob)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return written


def _iter_records(source: BinaryIO, offset: int) -> Iterator[SensorRecord]:
    while True:
        prefix = _read_exact(source, RECORD_PREFIX.size)
        if not prefix:
            return
        if len(prefix) < RECORD_PREFIX.size:
            raise TruncatedRecord(offset, "record prefix cut short")
        sid, _, plen = RECORD_PREFIX.unpack(prefix)
        allowed = _expected_lengths(sid)
        if allowed is not None and plen not in allowed:
            raise MalformedRecord(offset, f"payload_len {plen} impossible for sensor {sid:#04x}")
        rest = _read_exact(source, plen + 1)
        if len(rest) < plen + 1:
            raise TruncatedRecord(offset, f"needs {plen + 1} more bytes, got {len(rest)}")
        yield decode_record(prefix + rest, offset)
        offset += RECORD_PREFIX.size + plen + 1


def read_session(source) -> tuple[SessionHeader, Iterator[SensorRecord]]:
    """Parse the header eagerly and return a lazy record iterator.

    ``source`` is a binary file object or a bytes-like value. The iterator
    raises :class:`CorruptRecord` subclasses; records yielded before the
    error are valid.
    """
    if isinstance(source, (bytes, bytearray, memoryview)):
        source = io.BytesIO(bytes(source))
    header, offset = _read_header(source)
    return header, _iter_records(source, offset)


# --- audio ------------------------------------------------------------------


def write_audio(samples, rate_hz: int, sink) -> int:
    """Write interleaved stereo int16 PCM (ch0 chest, ch1 ambient) as RIFF/WAVE."""
    if rate_hz not in AUDIO_RATES_HZ:
        raise BadRate(f"{rate_hz} Hz not in {AUDIO_RATES_HZ}")
    pcm = np.asarray(samples)
    if pcm.size % 2:
        raise ValueError("interleaved stereo needs an even sample count")
    if pcm.size and (pcm.min() < -32768 or pcm.max() > 32767):
        raise ValueError("samples exceed int16 range")
    data = pcm.astype("<i2").tobytes()
    try:
        w = wave.open(sink if not isinstance(sink, (str, os.PathLike)) else str(sink), "wb")
        w.setnchannels(2)
        w.setsampwidth(2)
        w.setframerate(rate_hz)
        w.setnframes(pcm.size // 2)
        w.writeframes(data)
        w.close()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return 44 + len(data)


def read_audio_pcm(source) -> tuple[int, np.ndarray]:
    """Return (rate_hz, interleaved int16 samples) from a stereo PCM16 WAV."""
    if isinstance(source, (str, os.PathLike)):
        blob = Path(source).read_bytes()
    elif isinstance(source, (bytes, bytearray, memoryview)):
        blob = bytes(source)
    else:
        blob = source.read()
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise NotRiff("missing RIFF/WAVE signature")
    try:
        with wave.open(io.BytesIO(blob), "rb") as w:
            channels, width, rate, nframes = w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()
            frames = w.readframes(nframes)
    except (wave.Error, EOFError) as exc:
        raise UnsupportedEncoding(str(exc)) from exc
    if channels != 2:
        raise ChannelCountNotTwo(f"{channels} channels")
    if width != 2:
        raise UnsupportedEncoding(f"{8 * width}-bit samples")
    return rate, np.frombuffer(frames, dtype="<i2").astype(np.int16)


def read_audio(source) -> tuple[int, TimeSeries, TimeSeries]:
    rate, pcm = read_audio_pcm(source)
    stereo = pcm.reshape(-1, 2) / 32768.0
    chest = TimeSeries(0, float(rate), Unit.NORMALIZED, stereo[:, 0])
    ambient = TimeSeries(0, float(rate), Unit.NORMALIZED, stereo[:, 1])
    return rate, chest, ambient


# --- events sidecar ---------------------------------------------------------


@dataclass(frozen=True, slots=True, order=True)
class Event:
    time_us: int
    kind: str
    value: float | None = None

    def to_line(self) -> str:
        if self.value is None:
            return f"{self.kind} {self.time_us}"
        return f"{self.kind} {self.time_us} {self.value:.6g}"


def write_events(events: Iterable[Event], sink) -> None:
    """One ``<kind> <time_us> [value]`` line per event, sorted by time then kind order."""
    ordered = sorted(events, key=lambda e: (e.time_us, EVENT_KINDS.index(e.kind) if e.kind in EVENT_KINDS else 99))
    text = "".join(e.to_line() + "\n" for e in ordered)
    if isinstance(sink, (str, os.PathLike)):
        Path(sink).write_text(text)
    else:
        sink.write(text)


def parse_events(text: str) -> list[Event]:
    events = []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if len(parts) not in (2, 3):
            raise ValueError(f"line {lineno}: expected '<kind> <time_us> [value]'")
        value = float(parts[2]) if len(parts) == 3 else None
        events.append(Event(int(parts[1]), parts[0], value))
    return events


def read_events(source) -> list[Event]:
    if isinstance(source, (str, os.PathLike)):
        return parse_events(Path(source).read_text())
    return parse_events(source.read())


# --- session bundle ---------------------------------------------------------


@dataclass
class SessionLog:
    """A recorded session held in memory: header, records, stereo PCM, truth events."""

    header: SessionHeader
    records: list[SensorRecord]
    audio: np.ndarray | None = None  # interleaved int16, ch0 chest / ch1 ambient
    truth: list[Event] | None = None
    paths: dict[str, Path] = field(default_factory=dict)

    @property
    def config(self) -> SensorConfig:
        return self.header.config

    @property
    def audio_rate_hz(self) -> int:
        return self.header.config.audio.sample_rate_hz

    def save(self, out_dir, stem: str = "session") -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"pks": out_dir / f"{stem}.pks"}
        try:
            with open(paths["pks"], "wb") as fh:
                write_session(self.header, self.records, fh)
            if self.audio is not None:
                paths["wav"] = out_dir / f"{stem}.wav"
                write_audio(self.audio, self.audio_rate_hz, paths["wav"])
            if self.truth is not None:
                paths["truth"] = out_dir / f"{stem}.truth"
                write_events(self.truth, paths["truth"])
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
        self.paths = paths
        return paths

    @classmethod
    def load(cls, path) -> "SessionLog":
        """Load ``<stem>.pks`` plus sibling ``.wav`` / ``.truth`` when present."""
        path = Path(path)
        if path.suffix != ".pks":
            path = path.with_suffix(".pks")
        with open(path, "rb") as fh:
            header, records = read_session(fh)
            records = list(records)
        paths = {"pks": path}
        audio = truth = None
        wav = path.with_suffix(".wav")
        if wav.exists():
            _, audio = read_audio_pcm(wav)
            paths["wav"] = wav
        sidecar = path.with_suffix(".truth")
        if sidecar.exists():
            truth = read_events(sidecar)
            paths["truth"] = sidecar
        return cls(header, records, audio, truth, paths)
