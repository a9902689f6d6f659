"""``patchkeeper`` command line: simulate, dump, analyze, serve, monitor.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import socket
import sys
from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, codec, simulator, stream
from .core import (
    LED_NAMES,
    AmbientProfile,
    ConfigError,
    PhysioProfile,
    ProfileError,
    SensorConfig,
    SensorId,
    load_config,
    validate_config,
)

OUT_ENV = "PATCHKEEPER_OUT"
DEFAULT_PORT = 8765
SENSOR_FILTERS = {"ecg": SensorId.ECG_RESP, "ppg": SensorId.PPG, "imu": SensorId.IMU, "marker": SensorId.MARKER}
RR_INPUTS = {"resp": "resp", "gyro-y": "gy", "gyro-z": "gz", "az": "az"}
METRICS = ("hr", "hr_ppg", "rr", "s1s2")

log = logging.getLogger("patchkeeper")


class UsageError(Exception):
    pass


# --- shared helpers ---------------------------------------------------------------


def _load_base(args) -> tuple[SensorConfig, PhysioProfile]:
    if args.config:
        try:
            return load_config(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    return SensorConfig(), PhysioProfile()


def _profile_from_args(args, profile: PhysioProfile) -> PhysioProfile:
    updates = {}
    for flag, name in (("hr", "heart_rate_bpm"), ("rr", "resp_rate_brpm"), ("hrv", "hr_variability_frac"),
                       ("s1s2", "s1_s2_interval_s")):
        value = getattr(args, flag, None)
        if value is not None:
            updates[name] = value
    ambient = profile.ambient
    if getattr(args, "ambient", None):
        ambient = replace(ambient, mode=args.ambient)
    if getattr(args, "leak_gain", None) is not None:
        ambient = replace(ambient, leak_gain=args.leak_gain)
    return replace(profile, ambient=ambient, **updates)


def _config_from_args(args, cfg: SensorConfig) -> SensorConfig:
    for name, rate in (("ecg", args.ecg_rate), ("ppg", args.ppg_rate), ("imu", args.imu_rate)):
        if rate is not None:
            cfg = replace(cfg, **{name: replace(getattr(cfg, name), rate_hz=rate)})
    if args.audio_rate is not None:
        cfg = replace(cfg, audio=replace(cfg.audio, sample_rate_hz=args.audio_rate))
    if args.leds:
        mask = 0
        for name in args.leds.split(","):
            if name not in LED_NAMES:
                raise UsageError(f"unknown LED {name!r}")
            mask |= LED_NAMES[name]
        cfg = replace(cfg, ppg_led_mask=mask)
    if args.disable:
        cfg = cfg.with_disabled(*args.disable)
    return validate_config(cfg)


def _add_profile_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("physiology")
    g.add_argument("--hr", type=float, help="heart rate, bpm (default 72)")
    g.add_argument("--rr", type=float, help="respiration rate, breaths/min (default 15)")
    g.add_argument("--hrv", type=float, help="beat-interval jitter fraction, 0-0.2 (default 0.02)")
    g.add_argument("--s1s2", type=float, help="systolic S1-S2 interval, s (default 0.30)")
    g.add_argument("--ambient", choices=("quiet", "noisy"), help="ambient microphone scene (default quiet)")
    g.add_argument("--leak-gain", type=float, help="ambient leak into the chest channel, 0-1 (default 0)")
    s = p.add_argument_group("sensors")
    s.add_argument("--disable", action="append", choices=("ecg", "ppg", "imu", "audio"), default=[],
                   help="turn a sensor off (repeatable)")
    s.add_argument("--ecg-rate", type=int, help="ECG/RESP rate, Hz (default 125)")
    s.add_argument("--ppg-rate", type=int, help="PPG rate, Hz (default 100)")
    s.add_argument("--imu-rate", type=int, help="IMU rate, Hz (default 50)")
    s.add_argument("--audio-rate", type=int, help="audio rate: 4000, 8000 or 16000 Hz (default 8000)")
    s.add_argument("--leds", help="PPG LEDs, comma list of green,red,ir (default green)")
    p.add_argument("--duration", type=float, default=60.0, help="session length, s (default 60)")
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")


# --- simulate ------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg, profile = _load_base(args)
    cfg = _config_from_args(args, cfg)
    profile = _profile_from_args(args, profile)
    session, truth = simulator.generate_session(profile, args.duration, cfg, args.seed, args.start_epoch_us)
    paths = session.save(args.out, args.name)
    for kind, path in paths.items():
        print(f"{kind}\t{path}")
    print(f"records\t{len(session.records)}")
    print(f"r_peaks\t{len(truth.r_peak_times_us)}")
    return 0


# --- dump ----------------------------------------------------------------------------


def _config_summary(cfg: SensorConfig) -> str:
    leds = ",".join(n for n, bit in LED_NAMES.items() if cfg.ppg_led_mask & bit) or "none"
    parts = [f"{name}={'on' if getattr(cfg, name).enabled else 'off'}@{getattr(cfg, name).rate_hz}Hz"
             for name in ("ecg", "ppg", "imu")]
    parts.insert(2, f"leds={leds}")
    parts.append(f"audio={'on' if cfg.audio.enabled else 'off'}@{cfg.audio.sample_rate_hz}Hz")
    return " ".join(parts)


def _record_json(rec) -> dict:
    out = {"sensor": rec.sensor_id.name, "sensor_id": int(rec.sensor_id), "t_us": rec.timestamp_us}
    payload = rec.payload
    if isinstance(payload, codec.RawPayload):
        out["data"] = payload.data.hex()
    else:
        for key, value in dataclasses.asdict(payload).items():
            out[key] = list(value) if isinstance(value, tuple) else value
    return out


def cmd_dump(args) -> int:
    path = Path(args.session)
    wanted = {SENSOR_FILTERS[s] for s in args.sensor} if args.sensor else None
    summary_out = sys.stderr if args.json_lines or args.aligned else sys.stdout
    try:
        fh = open(path, "rb")
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    counts: Counter = Counter()
    first: dict = {}
    last: dict = {}
    records = []
    status = 0
    with fh:
        try:
            header, it = codec.read_session(fh)
        except codec.CodecError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        try:
            for rec in it:
                sid = rec.sensor_id
                counts[sid] += 1
                first.setdefault(sid, rec.timestamp_us)
                last[sid] = rec.timestamp_us
                if wanted is not None and sid not in wanted:
                    continue
                if args.json_lines:
                    print(json.dumps(_record_json(rec)))
                elif args.records:
                    print(f"{rec.timestamp_us}\t{sid.name}\t{json.dumps(_record_json(rec))}")
                if args.aligned:
                    records.append(rec)
        except codec.CorruptRecord as exc:
            if not args.tolerant:
                print(f"error: {exc}", file=sys.stderr)
                return 1
            print(f"warning: {exc}; showing the valid prefix", file=sys.stderr)

    print(f"file\t{path}", file=summary_out)
    print(f"version\t{header.version}", file=summary_out)
    print(f"session_start_epoch_us\t{header.session_start_epoch_us}", file=summary_out)
    print(f"config\t{_config_summary(header.config)}", file=summary_out)
    print(f"records\t{sum(counts.values())}", file=summary_out)
    for sid in sorted(set(counts) | set(header.config.enabled_sensors())):
        n = counts[sid]
        span = last.get(sid, 0) - first.get(sid, 0)
        rate = (n - 1) * 1e6 / span if n > 1 and span > 0 else float("nan")
        print(f"sensor\t{sid.name}\tcount\t{n}\trate_hz\t{rate:.3f}", file=summary_out)

    if args.aligned:
        session = codec.SessionLog(header, records)
        try:
            t, cols = analysis.align_arrays(session, args.aligned, args.mode)
        except analysis.AnalysisError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        names = list(cols)
        print("t_us\t" + "\t".join(names))
        for i, ti in enumerate(t):
            print(f"{ti}\t" + "\t".join("" if math.isnan(cols[k][i]) else f"{cols[k][i]:.6g}" for k in names))
    return status


# --- analyze -------------------------------------------------------------------------


@dataclasses.dataclass
class Metric:
    name: str
    value: float
    unit: str
    flag: str = "ok"

    def line(self) -> str:
        value = "nan" if self.value is None or (isinstance(self.value, float) and math.isnan(self.value)) else f"{self.value:.4f}"
        return f"{self.name} {value} {self.unit} {self.flag}"


def _fail(exc: Exception) -> str:
    if isinstance(exc, analysis.ChannelAbsent):
        return "fail:channel-absent"
    return f"fail:{type(exc).__name__}"


def run_analysis(session: codec.SessionLog, metrics=METRICS, rr_inputs=("resp", "gyro-z"), denoise=False):
    """Compute report metrics and detected events; failures are reported inline."""
    report: list[Metric] = []
    events: list[codec.Event] = []
    r_times = None
    want_r = "hr" in metrics or "s1s2" in metrics
    if want_r:
        try:
            r_times = analysis.detect_r_peaks(analysis.session_series(session, "ecg"))
            events += [codec.Event(int(t), "RPEAK") for t in r_times]
            if "hr" in metrics:
                bpm, _ = analysis.heart_rate(r_times)
                report.append(Metric("hr_ecg", bpm, "bpm"))
        except analysis.AnalysisError as exc:
            r_times = None
            if "hr" in metrics:
                report.append(Metric("hr_ecg", float("nan"), "bpm", _fail(exc)))
    if "hr_ppg" in metrics:
        try:
            chans = analysis.session_channels(session)
            name = next((k for k in ("ppg_green", "ppg_red", "ppg_ir") if k in chans), "ppg_green")
            est = analysis.ppg_heart_rate(analysis.session_series(session, name))
            report.append(Metric("hr_ppg", est.rate_per_min, "bpm", "edge" if est.band_edge else "ok"))
        except analysis.AnalysisError as exc:
            report.append(Metric("hr_ppg", float("nan"), "bpm", _fail(exc)))
    if "rr" in metrics:
        for source in rr_inputs:
            name = f"rr_{source.replace('-', '_')}"
            try:
                est = analysis.respiration_rate(analysis.session_series(session, RR_INPUTS[source]))
                report.append(Metric(name, est.rate_per_min, "brpm", "edge" if est.band_edge else "ok"))
            except analysis.AnalysisError as exc:
                report.append(Metric(name, float("nan"), "brpm", _fail(exc)))
    if "s1s2" in metrics:
        try:
            pcg = analysis.session_series(session, "stethoscope")
            if denoise:
                pcg = analysis.cancel_noise(pcg, analysis.session_series(session, "ambient"))
            sounds = analysis.detect_heart_sounds(pcg, r_times)
            s1 = [e for e in sounds if e.kind == "S1"]
            s2 = [e for e in sounds if e.kind == "S2"]
            gaps = [b.time_us - a.time_us for a, b in zip(sounds, sounds[1:]) if a.kind == "S1" and b.kind == "S2"]
            report.append(Metric("s1_count", float(len(s1)), "count"))
            report.append(Metric("s2_count", float(len(s2)), "count"))
            report.append(Metric("systolic_interval", float(np.mean(gaps)) / 1000 if gaps else float("nan"), "ms",
                                 "ok" if gaps else "fail:NoPairs"))
            events += [codec.Event(e.time_us, e.kind, e.amplitude) for e in sounds]
        except analysis.AnalysisError as exc:
            for name, unit in (("s1_count", "count"), ("s2_count", "count"), ("systolic_interval", "ms")):
                report.append(Metric(name, float("nan"), unit, _fail(exc)))
    return report, events


def cmd_analyze(args) -> int:
    metrics = tuple(m.strip() for m in args.metrics.split(",")) if args.metrics else METRICS
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise UsageError(f"unknown metrics {sorted(unknown)}; choose from {METRICS}")
    rr_inputs = tuple(args.input) if args.input else ("resp", "gyro-z")
    try:
        session = codec.SessionLog.load(args.session)
    except (OSError, codec.CodecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    report, events = run_analysis(session, metrics, rr_inputs, args.denoise)
    stem = Path(args.session).with_suffix("")
    report_path = Path(args.report) if args.report else stem.with_suffix(".report")
    events_path = Path(args.events) if args.events else stem.with_suffix(".events")
    text = "".join(m.line() + "\n" for m in report)
    try:
        report_path.write_text(text)
        codec.write_events(events, events_path)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(text)
    if report and all(m.flag.startswith("fail") for m in report):
        return 1
    return 0


# --- serve / monitor -------------------------------------------------------------------


def cmd_serve(args) -> int:
    if args.replay:
        try:
            session = codec.SessionLog.load(args.replay)
        except (OSError, codec.CodecError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1

        def factory():
            return stream.ReplaySource(session)
    else:
        base_cfg, profile = _load_base(args)
        profile = _profile_from_args(args, profile)
        cfg = _config_from_args(args, base_cfg)

        def factory():
            return stream.LiveSource(profile, args.duration, args.seed, args.log_dir, cfg)

    try:
        results = stream.serve_tcp(args.host, args.port, factory, args.max_connections, realtime=not args.fast)
    except OSError as exc:
        print(f"error: cannot serve on {args.host}:{args.port}: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 0
    for stats in results:
        sent = " ".join(f"{sid.name}={n}" for sid, n in sorted(stats.records_sent.items()))
        print(f"connection notifies={stats.notifies} {sent} errors={stats.errors} "
              f"transport_error={stats.transport_error or 'none'}")
    return 0


def cmd_monitor(args) -> int:
    try:
        mask = stream.parse_subscriptions(args.subscribe)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    try:
        sock = socket.create_connection((args.host, args.port), timeout=args.timeout)
    except OSError as exc:
        print(f"error: cannot connect to {args.host}:{args.port}: {exc}", file=sys.stderr)
        return 1

    def tick(res: stream.MonitorResult) -> None:
        hr = res.heart_rate_bpm
        counts = " ".join(f"{sid.name.lower()}={n}" for sid, n in sorted(res.counts.items()))
        print(f"hr={'-' if hr is None else f'{hr:.1f}'} {counts} dropped={res.dropped}", flush=True)

    transport = stream.SocketTransport(sock)
    client = stream.MonitorClient(transport, mask, timeout=args.timeout, keep_records=False)
    try:
        res = client.run(max_wall_s=args.duration, on_tick=tick)
    except KeyboardInterrupt:
        res = client.result
    except (stream.StreamError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        transport.close()
        return 1
    transport.close()
    hr = res.heart_rate_bpm
    counts = " ".join(f"{sid.name.lower()}={n}" for sid, n in sorted(res.counts.items()))
    print(f"total {counts} notifies={res.notifies} dropped={res.dropped} "
          f"hr={'-' if hr is None else f'{hr:.1f}'}")
    return 0


# --- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file with [ecg]/[ppg]/[imu]/[audio]/[profile]/[ambient]")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging")

    parser = argparse.ArgumentParser(
        prog="patchkeeper",
        description="Simulate, inspect, analyze and stream chest-patch sessions.",
        epilog="Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="write a simulated .pks/.wav/.truth session")
    _add_profile_flags(p)
    p.add_argument("--out", default=os.environ.get(OUT_ENV, "."),
                   help=f"output directory (default ${OUT_ENV} or .)")
    p.add_argument("--name", default="session", help="file stem (default session)")
    p.add_argument("--start-epoch-us", type=int, default=simulator.DEFAULT_EPOCH_US,
                   help="wall-clock anchor in the header (default 2024-01-01T00:00Z)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("dump", parents=[common], help="inspect a .pks session log")
    p.add_argument("session", help="path to .pks file")
    p.add_argument("--records", action="store_true", help="list every record")
    p.add_argument("--json-lines", action="store_true", help="one JSON record per line on stdout; summary on stderr")
    p.add_argument("--sensor", action="append", choices=sorted(SENSOR_FILTERS), help="only list these sensors")
    p.add_argument("--tolerant", action="store_true", help="show the valid prefix of a corrupt file and exit 0")
    p.add_argument("--aligned", type=float, metavar="HZ", help="print channels aligned to HZ as tab-separated columns")
    p.add_argument("--mode", choices=("hold", "linear"), default="hold", help="alignment mode (default hold)")
    p.set_defaults(func=cmd_dump)

    p = sub.add_parser("analyze", parents=[common], help="extract vital signs from a session")
    p.add_argument("session", help="path to .pks file (sibling .wav is used for heart sounds)")
    p.add_argument("--metrics", help=f"comma list from {','.join(METRICS)} (default all)")
    p.add_argument("--input", action="append", choices=sorted(RR_INPUTS),
                   help="respiration input channel (repeatable; default resp and gyro-z)")
    p.add_argument("--denoise", action="store_true", help="cancel ambient leak before heart-sound analysis")
    p.add_argument("--report", help="report path (default <stem>.report)")
    p.add_argument("--events", help="events path (default <stem>.events)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("serve", parents=[common], help="stream a live simulation or a replayed session over TCP")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=DEFAULT_PORT)
    p.add_argument("--replay", help="replay this .pks session instead of simulating")
    p.add_argument("--fast", action="store_true", help="send as fast as possible instead of in real time")
    p.add_argument("--max-connections", type=int, help="exit after serving this many clients")
    p.add_argument("--log-dir", help="also write each live session here (live_<n>.pks/.wav/.truth)")
    _add_profile_flags(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("monitor", parents=[common], help="subscribe to a stream and print live metrics")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=DEFAULT_PORT)
    p.add_argument("--subscribe", default="ecg,ppg,imu", help="comma list of ecg,ppg,imu,marker,all")
    p.add_argument("--timeout", type=float, default=5.0, help="receive timeout, s")
    p.add_argument("--duration", type=float, help="stop after this many wall-clock seconds")
    p.set_defaults(func=cmd_monitor)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ProfileError, simulator.SimulationError) as exc:
        parser.error(str(exc))
    except codec.IoFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except BrokenPipeError:
        # reader went away (e.g. piped into head); silence the flush at exit
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 0
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
