"""Core domain model: bins, zones, workers, fill conversion and the bin state machine.

Everything here is an immutable value; mutation lives in the store. Fill is a
fraction in [0, 1] derived from the ultrasonic distance between the sensor at
the rim and the waste surface: a reading of ``depth_cm`` means empty, a reading
of ``full_offset_cm`` means full, linear in between.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import IntEnum


class StaleTimestampError(ValueError):
    """Raised when an operation would move a bin's clock backwards."""


def parse_ts(value: str) -> datetime:
    """Parse an ISO 8601 UTC timestamp with a Z suffix into an aware datetime."""
    if not isinstance(value, str) or not value.endswith("Z"):
        raise ValueError(f"timestamp must be ISO 8601 UTC with Z suffix: {value!r}")
    try:
        dt = datetime.fromisoformat(value[:-1] + "+00:00")
    except ValueError as exc:
        raise ValueError(f"unparsable timestamp: {value!r}") from exc
    return dt.astimezone(timezone.utc)


def format_ts(dt: datetime) -> str:
    """Render an aware datetime as ISO 8601 UTC with a Z suffix."""
    if dt.tzinfo is None:
        raise ValueError("naive datetime")
    s = dt.astimezone(timezone.utc).isoformat()
    return s.replace("+00:00", "Z")


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


class BinState(IntEnum):
    """Discrete fill level; the order matters (EMPTY < ... < FULL)."""

    EMPTY = 0
    PARTIAL = 1
    ALMOST_FULL = 2
    FULL = 3


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValueError("coordinates must be finite")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude out of range: {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude out of range: {self.lon}")


@dataclass(frozen=True)
class BinConfig:
    """Identity, placement and ultrasonic geometry of one container.

    ``depth_cm`` is what the sensor reads when the bin is empty,
    ``full_offset_cm`` what it reads when full.
    """

    bin_id: str
    sensor_id: str
    location: GeoPoint
    zone_id: str
    depth_cm: float
    full_offset_cm: float

    def __post_init__(self):
        if not self.bin_id or not self.sensor_id:
            raise ValueError("bin_id and sensor_id must be nonempty")
        if not (math.isfinite(self.depth_cm) and math.isfinite(self.full_offset_cm)):
            raise ValueError("geometry must be finite")
        if not self.depth_cm > self.full_offset_cm > 0:
            raise ValueError(
                f"need depth_cm > full_offset_cm > 0, got {self.depth_cm}/{self.full_offset_cm}"
            )


@dataclass(frozen=True)
class Thresholds:
    """Classification levels, hysteresis band and the gas alarm level."""

    empty_below: float = 0.05
    almost_full_at: float = 0.50
    full_at: float = 0.90
    hysteresis: float = 0.05
    gas_alert_ppm: float = 300.0

    def __post_init__(self):
        if not 0.0 <= self.empty_below < self.almost_full_at < self.full_at <= 1.0:
            raise ValueError("need 0 <= empty_below < almost_full_at < full_at <= 1")
        if not self.hysteresis < self.almost_full_at - self.empty_below:
            raise ValueError("hysteresis too wide for the level spacing")
        if self.hysteresis < 0:
            raise ValueError("hysteresis must be nonnegative")
        if not self.gas_alert_ppm > 0:
            raise ValueError("gas_alert_ppm must be positive")


@dataclass(frozen=True)
class WorkerProfile:
    worker_id: str
    name: str
    start_location: GeoPoint
    capacity: int = 5
    role: str = "WORKER"

    def __post_init__(self):
        if not self.worker_id:
            raise ValueError("worker_id must be nonempty")
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")


@dataclass(frozen=True)
class Zone:
    zone_id: str
    name: str
    description: str = ""

    def __post_init__(self):
        if not self.zone_id:
            raise ValueError("zone_id must be nonempty")


@dataclass(frozen=True)
class BinRecord:
    """Current knowledge about one bin: fill, discrete state, last sensor values."""

    config: BinConfig
    fill: float = 0.0
    state: BinState = BinState.EMPTY
    last_reading_ts: datetime | None = None
    last_gas_ppm: float = 0.0

    @property
    def bin_id(self) -> str:
        return self.config.bin_id


def distance_to_fill(distance_cm: float, config: BinConfig) -> float:
    """Convert an ultrasonic distance reading to a fill fraction in [0, 1].

    Linear between the calibrated empty (depth_cm) and full (full_offset_cm)
    readings; out-of-range distances clamp.
    """
    span = config.depth_cm - config.full_offset_cm
    fill = (config.depth_cm - distance_cm) / span
    return min(1.0, max(0.0, fill))


def fill_to_distance(fill: float, config: BinConfig) -> float:
    """Inverse of distance_to_fill for fill in [0, 1]; used by the simulator."""
    return config.depth_cm - fill * (config.depth_cm - config.full_offset_cm)


def _base_state(fill: float, t: Thresholds) -> BinState:
    if fill < t.empty_below:
        return BinState.EMPTY
    if fill < t.almost_full_at:
        return BinState.PARTIAL
    if fill < t.full_at:
        return BinState.ALMOST_FULL
    return BinState.FULL


# Fill level at which each state is entered from below.
_ENTRY_THRESHOLD = {
    BinState.PARTIAL: "empty_below",
    BinState.ALMOST_FULL: "almost_full_at",
    BinState.FULL: "full_at",
}


def classify_fill(fill: float, prev: BinState, t: Thresholds) -> BinState:
    """Classify a fill fraction, holding the previous state inside the hysteresis band.

    Upward transitions are immediate. A downward transition by exactly one
    level is suppressed until the fill clears the entry threshold of the
    previous state by at least the hysteresis width; bigger drops pass through.
    """
    base = _base_state(fill, t)
    if base == prev - 1:
        entered_at = getattr(t, _ENTRY_THRESHOLD[prev])
        if fill > entered_at - t.hysteresis:
            return prev
    return base


def apply_reading(
    rec: BinRecord,
    distance_cm: float,
    gas_ppm: float,
    ts: datetime,
    t: Thresholds,
) -> BinRecord:
    """Fold one sensor reading into a bin record.

    Readings not newer than the record's clock are ignored (stale guard), so
    applying the same reading twice equals applying it once and out-of-order
    delivery cannot move the record backwards.
    """
    if rec.last_reading_ts is not None and ts <= rec.last_reading_ts:
        return rec
    fill = distance_to_fill(distance_cm, rec.config)
    return replace(
        rec,
        fill=fill,
        state=classify_fill(fill, rec.state, t),
        last_gas_ppm=gas_ppm,
        last_reading_ts=ts,
    )


def mark_emptied(rec: BinRecord, ts: datetime) -> BinRecord:
    """Record a collection: fill drops to zero, state to EMPTY, gas value kept."""
    if rec.last_reading_ts is not None and ts < rec.last_reading_ts:
        raise StaleTimestampError(
            f"emptied timestamp {format_ts(ts)} is older than last reading "
            f"{format_ts(rec.last_reading_ts)}"
        )
    return replace(rec, fill=0.0, state=BinState.EMPTY, last_reading_ts=ts)
