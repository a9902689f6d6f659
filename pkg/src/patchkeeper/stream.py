"""Notification-style live streaming over any reliable ordered byte transport.

Wire packet (little-endian)::

    A5 5A | type u8 | seq u16 | len u8 (<= 244) | payload | crc8(type..payload)

Commands travel client -> server as CMD packets whose first payload byte is
the opcode; the server answers each with an ACK or ERR carrying the same
seq. NOTIFY packets carry one encoded sensor record each, prefixed by a
flags byte whose bit 0 marks "more fragments follow". NOTIFY seq numbers
count up per notification (wrapping at 0xFFFF) so gaps reveal drops.
"""

from __future__ import annotations

import enum
import itertools
import logging
import queue
import socket
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

from . import analysis, codec
from .codec import crc8
from .core import PhysioProfile, SensorConfig, SensorId, SensorRecord, TimeSeries, Unit, ecg_counts_to_mv

log = logging.getLogger(__name__)

SYNC = b"\xa5\x5a"
MAX_PAYLOAD = 244  # BLE data-length extension ATT payload
HEADER_LEN = 6  # sync + type + seq + len
FRAME_OVERHEAD = HEADER_LEN + 1
MAX_CHUNK = MAX_PAYLOAD - 1
FLAG_MORE = 0x01
QUEUE_CAPACITY = 256  # records between producer and sender; a full queue blocks the producer


class PacketType(enum.IntEnum):
    CMD = 0x01
    ACK = 0x02
    NOTIFY = 0x03
    ERR = 0x04


class Opcode(enum.IntEnum):
    SET_CONFIG = 0x10
    START = 0x11
    STOP = 0x12
    SUBSCRIBE = 0x13
    UNSUBSCRIBE = 0x14


OTA_OPCODES = range(0x20, 0x100)  # reserved for firmware update; always rejected


class ErrorCode(enum.IntEnum):
    ILLEGAL_STATE = 0x01
    UNKNOWN_OPCODE = 0x02
    BAD_PAYLOAD = 0x03
    NOT_SUPPORTED = 0x04


class StreamError(Exception):
    pass


class PayloadTooLarge(StreamError):
    pass


class ProtocolViolation(StreamError):
    pass


class Timeout(StreamError, TimeoutError):
    pass


class CommandRejected(StreamError):
    def __init__(self, opcode: int, code: int):
        name = ErrorCode(code).name if code in ErrorCode._value2member_map_ else f"{code:#04x}"
        super().__init__(f"opcode {opcode:#04x} rejected: {name}")
        self.opcode = opcode
        self.code = code


# --- framing ------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Packet:
    type: int
    seq: int
    payload: bytes = b""


@dataclass(frozen=True, slots=True)
class CrcError:
    """Marker for a candidate frame that failed validation; scanning resumes after its sync byte."""

    offset: int
    reason: str = "crc"


def frame(packet: Packet) -> bytes:
    if len(packet.payload) > MAX_PAYLOAD:
        raise PayloadTooLarge(f"{len(packet.payload)} byte payload exceeds {MAX_PAYLOAD}")
    body = bytes([packet.type & 0xFF]) + (packet.seq & 0xFFFF).to_bytes(2, "little") + bytes([len(packet.payload)]) + packet.payload
    return SYNC + body + bytes([crc8(body)])


class Deframer:
    """Incremental deframer; never raises on input bytes.

    Garbage is skipped up to the next sync word. A candidate whose length
    byte is impossible, whose CRC fails, or which is cut off at end of input
    yields a :class:`CrcError` and scanning restarts one byte later.
    """

    def __init__(self):
        self._buf = bytearray()
        self._offset = 0  # stream offset of _buf[0]

    def feed(self, data: bytes) -> list:
        self._buf += data
        return self._drain(final=False)

    def finish(self) -> list:
        return self._drain(final=True)

    def _skip(self, n: int) -> None:
        del self._buf[:n]
        self._offset += n

    def _drain(self, final: bool) -> list:
        out = []
        buf = self._buf
        while buf:
            i = buf.find(SYNC)
            if i < 0:
                keep = 1 if buf[-1] == SYNC[0] and not final else 0
                self._skip(len(buf) - keep)
                break
            if i:
                self._skip(i)
            if len(buf) < HEADER_LEN:
                if not final:
                    break
                out.append(CrcError(self._offset, "truncated"))
                self._skip(1)
                continue
            plen = buf[5]
            if plen > MAX_PAYLOAD:
                out.append(CrcError(self._offset, "length"))
                self._skip(1)
                continue
            total = FRAME_OVERHEAD + plen
            if len(buf) < total:
                if not final:
                    break
                out.append(CrcError(self._offset, "truncated"))
                self._skip(1)
                continue
            if crc8(bytes(buf[2 : total - 1])) == buf[total - 1]:
                out.append(Packet(buf[2], buf[3] | (buf[4] << 8), bytes(buf[HEADER_LEN : total - 1])))
                self._skip(total)
            else:
                out.append(CrcError(self._offset))
                self._skip(1)
        return out


def deframe(chunks: Iterable[bytes]) -> Iterator:
    """Packets and :class:`CrcError` markers from an iterable of byte chunks."""
    d = Deframer()
    for chunk in chunks:
        yield from d.feed(chunk)
    yield from d.finish()


def fragment_record(rec: SensorRecord) -> list[bytes]:
    """NOTIFY payloads for one record; all but the last carry FLAG_MORE."""
    blob = codec.encode_record(rec)
    chunks = [blob[i : i + MAX_CHUNK] for i in range(0, len(blob), MAX_CHUNK)] or [b""]
    return [bytes([FLAG_MORE if i < len(chunks) - 1 else 0]) + c for i, c in enumerate(chunks)]


class Reassembler:
    def __init__(self):
        self._parts: list[bytes] = []

    def reset(self) -> None:
        self._parts = []

    def push(self, payload: bytes) -> SensorRecord | None:
        if not payload:
            raise ProtocolViolation("empty NOTIFY payload")
        self._parts.append(payload[1:])
        if payload[0] & FLAG_MORE:
            return None
        blob = b"".join(self._parts)
        self._parts = []
        return codec.decode_record(blob)


# --- subscriptions --------------------------------------------------------------

SUB_BITS = {SensorId.ECG_RESP: 0x01, SensorId.PPG: 0x02, SensorId.IMU: 0x04, SensorId.MARKER: 0x80}
SUB_OTHER = 0x40
SUB_ALL = 0xFF
SUB_NAMES = {"ecg": 0x01, "ppg": 0x02, "imu": 0x04, "marker": 0x80, "other": SUB_OTHER, "all": SUB_ALL}


def sensor_bit(sensor_id: int) -> int:
    return SUB_BITS.get(sensor_id, SUB_OTHER)


def parse_subscriptions(text: str) -> int:
    mask = 0
    for name in filter(None, (p.strip().lower() for p in text.split(","))):
        if name not in SUB_NAMES:
            raise ValueError(f"unknown subscription {name!r}")
        mask |= SUB_NAMES[name]
    return mask


# --- transports -------------------------------------------------------------------


class MemoryTransport:
    """One end of an in-memory duplex pipe with socket-like semantics."""

    def __init__(self, inbox: "queue.Queue[bytes | None]", outbox: "queue.Queue[bytes | None]"):
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False
        self._eof = False

    def send(self, data: bytes) -> None:
        if self._closed:
            raise BrokenPipeError("transport closed")
        self._outbox.put(bytes(data))

    def recv(self, timeout: float | None = None) -> bytes:
        if self._eof:
            return b""
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise Timeout(f"no data within {timeout} s") from None
        if item is None:
            self._eof = True
            return b""
        return item

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(None)
            self._inbox.put(None)

    finish = close


def memory_pipe() -> tuple[MemoryTransport, MemoryTransport]:
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    return MemoryTransport(b_to_a, a_to_b), MemoryTransport(a_to_b, b_to_a)


class SocketTransport:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._closed = False

    def send(self, data: bytes) -> None:
        self.sock.sendall(data)

    def recv(self, timeout: float | None = None) -> bytes:
        if self._closed:
            return b""
        self.sock.settimeout(timeout)
        try:
            return self.sock.recv(4096)
        except socket.timeout:
            raise Timeout(f"no data within {timeout} s") from None
        except OSError:
            if self._closed:
                return b""
            raise

    def finish(self) -> None:
        """Half-close: the peer sees end of stream once buffered data arrives."""
        try:
            self.sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


# --- sources ------------------------------------------------------------------------


class LiveSource:
    """Simulated device output generated on START with the current config.

    With ``log_dir`` set, every generated session is also written there as
    ``live_<n>.pks/.wav/.truth``, the way the device logs to its card while
    streaming.
    """

    _log_counter = itertools.count()

    def __init__(self, profile: PhysioProfile, duration_s: float, seed: int, log_dir: str | Path | None = None,
                 cfg: SensorConfig | None = None):
        self.profile = profile
        self.duration_s = duration_s
        self.seed = seed
        self.log_dir = log_dir
        self.cfg = cfg if cfg is not None else SensorConfig()
        self.logged: list[dict[str, Path]] = []

    def default_config(self) -> SensorConfig:
        return self.cfg

    def records(self, cfg: SensorConfig) -> Iterator[SensorRecord]:
        from .simulator import generate_session

        session, _ = generate_session(self.profile, self.duration_s, cfg, self.seed)
        if self.log_dir is not None:
            self.logged.append(session.save(self.log_dir, f"live_{next(self._log_counter)}"))
        return iter(session.records)


class ReplaySource:
    """Records of a stored session; sensors disabled in the active config are skipped."""

    def __init__(self, session: codec.SessionLog | str | Path):
        self.session = session if isinstance(session, codec.SessionLog) else codec.SessionLog.load(session)

    def default_config(self) -> SensorConfig:
        return self.session.config

    def records(self, cfg: SensorConfig) -> Iterator[SensorRecord]:
        enabled = set(cfg.enabled_sensors())
        for rec in self.session.records:
            known = rec.sensor_id in (SensorId.ECG_RESP, SensorId.PPG, SensorId.IMU)
            if not known or rec.sensor_id in enabled:
                yield rec


# --- server ---------------------------------------------------------------------------


@dataclass
class ServerStats:
    commands: int = 0
    acks: int = 0
    errors: int = 0
    notifies: int = 0
    records_sent: Counter = field(default_factory=Counter)
    bytes_sent: int = 0
    crc_errors: int = 0
    max_pacing_error_s: float = 0.0
    completed: bool = False
    transport_error: str | None = None


class StreamServer:
    """Serves one connection until the peer closes or the source is exhausted.

    The producer thread iterates the source into a bounded queue; the sender
    thread paces (in realtime mode), filters by subscription, fragments and
    transmits. Commands are handled on the calling thread.
    """

    def __init__(self, source, transport, cfg: SensorConfig | None = None, realtime: bool = False,
                 close_when_done: bool = True, clock: Callable[[], float] = time.monotonic):
        self.source = source
        self.transport = transport
        self.cfg = cfg if cfg is not None else source.default_config()
        self.realtime = realtime
        self.close_when_done = close_when_done
        self.clock = clock
        self.subscriptions = 0
        self.stats = ServerStats()
        self._send_lock = threading.Lock()
        self._notify_seq = 0
        self._running = False
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._closed = threading.Event()

    # transport helpers
    def _send(self, pkt: Packet) -> None:
        data = frame(pkt)
        with self._send_lock:
            try:
                self.transport.send(data)
            except OSError as exc:
                if self.stats.transport_error is None:
                    self.stats.transport_error = f"{type(exc).__name__}: {exc}"
                self._stop.set()
                raise
            self.stats.bytes_sent += len(data)

    def _reply(self, seq: int, opcode: int, code: int | None = None) -> None:
        if code is None:
            self.stats.acks += 1
            self._send(Packet(PacketType.ACK, seq, bytes([opcode])))
        else:
            self.stats.errors += 1
            self._send(Packet(PacketType.ERR, seq, bytes([opcode, code])))

    # command handling
    def handle(self, pkt: Packet) -> None:
        if pkt.type != PacketType.CMD:
            log.debug("ignoring packet type %#x from client", pkt.type)
            return
        self.stats.commands += 1
        if not pkt.payload:
            self._reply(pkt.seq, 0, ErrorCode.BAD_PAYLOAD)
            return
        op, args = pkt.payload[0], pkt.payload[1:]
        if op == Opcode.SET_CONFIG:
            if self._running:
                self._reply(pkt.seq, op, ErrorCode.ILLEGAL_STATE)
                return
            try:
                self.cfg = codec.decode_config_block(args)
            except codec.CodecError:
                self._reply(pkt.seq, op, ErrorCode.BAD_PAYLOAD)
                return
            self._reply(pkt.seq, op)
        elif op == Opcode.START:
            if self._running:
                self._reply(pkt.seq, op, ErrorCode.ILLEGAL_STATE)
                return
            self._reply(pkt.seq, op)
            self._start_streaming()
        elif op == Opcode.STOP:
            self._stop_streaming()
            self._reply(pkt.seq, op)
        elif op == Opcode.SUBSCRIBE:
            if len(args) != 1:
                self._reply(pkt.seq, op, ErrorCode.BAD_PAYLOAD)
                return
            self.subscriptions |= args[0]
            self._reply(pkt.seq, op)
        elif op == Opcode.UNSUBSCRIBE:
            if len(args) > 1:
                self._reply(pkt.seq, op, ErrorCode.BAD_PAYLOAD)
                return
            self.subscriptions &= ~(args[0] if args else SUB_ALL) & 0xFF
            self._reply(pkt.seq, op)
        elif op in OTA_OPCODES:
            self._reply(pkt.seq, op, ErrorCode.NOT_SUPPORTED)
        else:
            self._reply(pkt.seq, op, ErrorCode.UNKNOWN_OPCODE)

    # streaming
    def _start_streaming(self) -> None:
        self._stop.clear()
        self._running = True
        q: queue.Queue = queue.Queue(maxsize=QUEUE_CAPACITY)
        records = self.source.records(self.cfg)
        producer = threading.Thread(target=self._produce, args=(records, q), daemon=True)
        sender = threading.Thread(target=self._transmit, args=(q,), daemon=True)
        self._threads = [producer, sender]
        producer.start()
        sender.start()

    def _stop_streaming(self) -> None:
        self._stop.set()
        for t in self._threads:
            if t is not threading.current_thread():
                t.join()
        self._threads = []
        self._running = False

    def _produce(self, records: Iterator[SensorRecord], q: queue.Queue) -> None:
        for rec in records:
            while not self._stop.is_set():
                try:
                    q.put(rec, timeout=0.05)
                    break
                except queue.Full:
                    continue
            if self._stop.is_set():
                return
        while not self._stop.is_set():
            try:
                q.put(None, timeout=0.05)
                return
            except queue.Full:
                continue

    def _transmit(self, q: queue.Queue) -> None:
        t0 = None
        first_ts = None
        try:
            while not self._stop.is_set():
                try:
                    rec = q.get(timeout=0.05)
                except queue.Empty:
                    continue
                if rec is None:
                    self.stats.completed = True
                    if self.close_when_done:
                        self._closed.set()
                        self.transport.finish()
                    return
                if self.realtime:
                    if t0 is None:
                        t0, first_ts = self.clock(), rec.timestamp_us
                    due = t0 + (rec.timestamp_us - first_ts) / 1e6
                    delay = due - self.clock()
                    if delay > 0:
                        time.sleep(delay)
                    self.stats.max_pacing_error_s = max(self.stats.max_pacing_error_s, abs(self.clock() - due))
                if not sensor_bit(rec.sensor_id) & self.subscriptions:
                    continue
                for payload in fragment_record(rec):
                    self._send(Packet(PacketType.NOTIFY, self._notify_seq, payload))
                    self._notify_seq = (self._notify_seq + 1) & 0xFFFF
                    self.stats.notifies += 1
                self.stats.records_sent[rec.sensor_id] += 1
        except OSError:
            return

    def run(self, recv_timeout: float | None = None) -> ServerStats:
        deframer = Deframer()
        try:
            while True:
                try:
                    data = self.transport.recv(recv_timeout)
                except Timeout:
                    continue
                except OSError as exc:
                    if not self._closed.is_set():
                        self.stats.transport_error = f"{type(exc).__name__}: {exc}"
                    break
                if not data:
                    break
                for item in deframer.feed(data):
                    if isinstance(item, CrcError):
                        self.stats.crc_errors += 1
                    else:
                        self.handle(item)
        except OSError as exc:
            self.stats.transport_error = self.stats.transport_error or f"{type(exc).__name__}: {exc}"
        finally:
            self._stop_streaming()
            self.transport.close()
        return self.stats


def serve(source, transport, cfg: SensorConfig | None = None, **kwargs) -> ServerStats:
    return StreamServer(source, transport, cfg, **kwargs).run()


def serve_tcp(host: str, port: int, source_factory: Callable[[], object], max_connections: int | None = None,
              ready: threading.Event | None = None, **kwargs) -> list[ServerStats]:
    """Accept connections and serve each on its own thread."""
    results: list[ServerStats] = []
    workers = []
    with socket.create_server((host, port)) as srv:
        if ready is not None:
            ready.port = srv.getsockname()[1]
            ready.set()
        accepted = 0
        while max_connections is None or accepted < max_connections:
            conn, addr = srv.accept()
            accepted += 1
            log.info("client %s connected", addr)

            def work(conn=conn):
                results.append(serve(source_factory(), SocketTransport(conn), **kwargs))

            t = threading.Thread(target=work, daemon=True)
            t.start()
            workers.append(t)
        for t in workers:
            t.join()
    return results


# --- client ----------------------------------------------------------------------------


@dataclass
class MonitorResult:
    records: list[SensorRecord] = field(default_factory=list)
    counts: Counter = field(default_factory=Counter)
    notifies: int = 0
    dropped: int = 0
    crc_errors: int = 0
    hr_updates: list[tuple[int, float]] = field(default_factory=list)

    @property
    def heart_rate_bpm(self) -> float | None:
        return self.hr_updates[-1][1] if self.hr_updates else None


class MonitorClient:
    """Subscribes, starts the stream and decodes notifications.

    Rolling heart rate is recomputed from the last ``hr_window_s`` of ECG
    every ``hr_update_s`` of stream time.
    """

    def __init__(self, transport, subscriptions: int = SUB_ALL, timeout: float = 5.0,
                 hr_window_s: float = 8.0, hr_update_s: float = 1.0, keep_records: bool = True):
        self.transport = transport
        self.subscriptions = subscriptions
        self.timeout = timeout
        self.hr_window_s = hr_window_s
        self.hr_update_s = hr_update_s
        self.keep_records = keep_records
        self.result = MonitorResult()
        self._deframer = Deframer()
        self._pending: list = []
        self._seq = 0
        self._expected_notify: int | None = None
        self._reassembler = Reassembler()
        self._ecg_t: list[int] = []
        self._ecg_v: list[int] = []
        self._next_hr_us: int | None = None
        self._eof = False

    def _read_items(self) -> list:
        if self._eof:
            return []
        data = self.transport.recv(self.timeout)
        if not data:
            self._eof = True
            return self._deframer.finish()
        return self._deframer.feed(data)

    def _dispatch(self, item) -> Packet | None:
        """Handle NOTIFY/CrcError items; return ACK/ERR packets to the caller."""
        if isinstance(item, CrcError):
            self.result.crc_errors += 1
            return None
        if item.type == PacketType.NOTIFY:
            self._on_notify(item)
            return None
        if item.type in (PacketType.ACK, PacketType.ERR):
            return item
        raise ProtocolViolation(f"unexpected packet type {item.type:#04x}")

    def command(self, opcode: int, payload: bytes = b"") -> Packet:
        seq = self._seq
        self._seq = (self._seq + 1) & 0xFFFF
        self.transport.send(frame(Packet(PacketType.CMD, seq, bytes([opcode]) + payload)))
        while True:
            if not self._pending:
                self._pending = self._read_items()
                if self._eof and not self._pending:
                    raise ProtocolViolation(f"connection closed before reply to opcode {opcode:#04x}")
            reply = self._dispatch(self._pending.pop(0))
            if reply is None:
                continue
            if reply.seq != seq:
                raise ProtocolViolation(f"reply seq {reply.seq} does not match command seq {seq}")
            if reply.type == PacketType.ERR:
                raise CommandRejected(opcode, reply.payload[1] if len(reply.payload) > 1 else 0)
            return reply

    def _on_notify(self, pkt: Packet) -> None:
        res = self.result
        res.notifies += 1
        if self._expected_notify is not None and pkt.seq != self._expected_notify:
            res.dropped += (pkt.seq - self._expected_notify) & 0xFFFF
            self._reassembler.reset()
        self._expected_notify = (pkt.seq + 1) & 0xFFFF
        try:
            rec = self._reassembler.push(pkt.payload)
        except codec.CodecError:
            self._reassembler.reset()
            return
        if rec is None:
            return
        res.counts[rec.sensor_id] += 1
        if self.keep_records:
            res.records.append(rec)
        if rec.sensor_id == SensorId.ECG_RESP:
            self._on_ecg(rec)

    def _on_ecg(self, rec: SensorRecord) -> None:
        self._ecg_t.append(rec.timestamp_us)
        self._ecg_v.append(rec.payload.ch1_counts)
        if self._next_hr_us is None:
            self._next_hr_us = rec.timestamp_us + int(self.hr_update_s * 1e6)
        if rec.timestamp_us < self._next_hr_us:
            return
        self._next_hr_us += int(self.hr_update_s * 1e6)
        cutoff = rec.timestamp_us - int(self.hr_window_s * 1e6)
        start = int(np.searchsorted(self._ecg_t, cutoff))
        del self._ecg_t[:start], self._ecg_v[:start]
        bpm = rolling_heart_rate(self._ecg_t, self._ecg_v)
        if bpm is not None:
            self.result.hr_updates.append((rec.timestamp_us, bpm))

    def pump(self) -> bool:
        """Process whatever arrives next; False once the server has closed."""
        items, self._pending = self._pending, []
        if not items:
            items = self._read_items()
        for item in items:
            reply = self._dispatch(item)
            if reply is not None:
                log.warning("unsolicited reply %s", reply)
        return not self._eof

    def run(self, config: SensorConfig | None = None, max_wall_s: float | None = None,
            on_tick: Callable[[MonitorResult], None] | None = None, tick_s: float = 1.0) -> MonitorResult:
        if config is not None:
            self.command(Opcode.SET_CONFIG, codec.encode_config_block(config))
        self.command(Opcode.SUBSCRIBE, bytes([self.subscriptions]))
        self.command(Opcode.START)
        t_start = last_tick = time.monotonic()
        while self.pump():
            now = time.monotonic()
            if on_tick is not None and now - last_tick >= tick_s:
                on_tick(self.result)
                last_tick = now
            if max_wall_s is not None and now - t_start >= max_wall_s:
                self.command(Opcode.STOP)
                break
        return self.result


def rolling_heart_rate(times_us, counts) -> float | None:
    """Mean HR over an ECG window, or None when the window is too short or beatless."""
    if len(times_us) < 2:
        return None
    dt = float(np.median(np.diff(times_us)))
    if dt <= 0:
        return None
    series = TimeSeries(int(times_us[0]), 1e6 / dt, Unit.MILLIVOLTS, ecg_counts_to_mv(np.asarray(counts)))
    try:
        peaks = analysis.detect_r_peaks(series)
        bpm, _ = analysis.heart_rate(peaks)
    except analysis.AnalysisError:
        return None
    return bpm


def client_monitor(transport, subscriptions: int = SUB_ALL, **kwargs) -> MonitorResult:
    run_kw = {k: kwargs.pop(k) for k in ("config", "max_wall_s", "on_tick", "tick_s") if k in kwargs}
    return MonitorClient(transport, subscriptions, **kwargs).run(**run_kw)
