"""Wearable chest-patch toolkit: record format, virtual device, analysis and live streaming."""

from .core import PhysioProfile, SensorConfig, SensorId, TimeSeries, load_config
from .codec import SessionLog, read_session, write_session
from .simulator import GroundTruth, generate_session

__all__ = [
    "GroundTruth",
    "PhysioProfile",
    "SensorConfig",
    "SensorId",
    "SessionLog",
    "TimeSeries",
    "generate_session",
    "load_config",
    "read_session",
    "write_session",
]
