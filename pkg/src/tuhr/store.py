"""Event-sourced persistence: append-only log, fold, snapshots, recovery.

The log (``events.ndjson``) is the source of truth: one JSON record per line
with fields ``offset`` (dense from 0), ``ts``, ``kind``, ``payload``. All state
is a deterministic fold over it, so replaying the same bytes always rebuilds
the same state. Snapshots (``snapshot-<offset>.json``) only shortcut recovery.

FULL_BIN and GAS alert transitions are derived inside the fold from the bin
transition itself, with ids built from the triggering event's offset; the
ALERT_RAISED / ALERT_RESOLVED records the writer appends afterwards are
idempotent confirmations. SENSOR_OFFLINE raises are timer-driven and therefore
take effect only through their own event.

Single-writer: every mutation funnels through one lock. Readers copy small
views out under the lock; event-stream subscribers get their own queues and a
slow subscriber is dropped rather than ever blocking the writer.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import queue
import re
import threading
from collections import deque
from dataclasses import dataclass, replace
from datetime import datetime
from pathlib import Path
from typing import Callable, Iterator

from . import alerting, dispatch
from .alerting import AlertAction, AlertEvent
from .model import (
    BinConfig,
    BinRecord,
    BinState,
    GeoPoint,
    StaleTimestampError,
    Thresholds,
    WorkerProfile,
    Zone,
    apply_reading,
    format_ts,
    mark_emptied,
    parse_ts,
    utc_now,
)
from .telemetry import ACCEPTED, DUPLICATE, UNKNOWN_SENSOR, DedupeIndex, ReadingEnvelope

logger = logging.getLogger("tuhr.store")

READING_ACCEPTED = "READING_ACCEPTED"
BIN_EMPTIED = "BIN_EMPTIED"
ALERT_RAISED = "ALERT_RAISED"
ALERT_RESOLVED = "ALERT_RESOLVED"
PLAN_CREATED = "PLAN_CREATED"
CONFIG_CHANGED = "CONFIG_CHANGED"

EVENT_KINDS = (
    READING_ACCEPTED,
    BIN_EMPTIED,
    ALERT_RAISED,
    ALERT_RESOLVED,
    PLAN_CREATED,
    CONFIG_CHANGED,
)

# Kinds surfaced on the live event stream.
STREAMED_KINDS = (READING_ACCEPTED, BIN_EMPTIED, ALERT_RAISED, ALERT_RESOLVED, PLAN_CREATED)

LOG_FILENAME = "events.ndjson"
SNAPSHOT_RE = re.compile(r"^snapshot-(\d+)\.json$")

READINGS_CAP = 10000


class CorruptLogError(RuntimeError):
    pass


class DuplicateIdError(ValueError):
    pass


@dataclass(frozen=True)
class EventRecord:
    offset: int
    ts: datetime
    kind: str
    payload: dict

    def to_wire(self) -> dict:
        return {
            "offset": self.offset,
            "ts": format_ts(self.ts),
            "kind": self.kind,
            "payload": self.payload,
        }


def encode_event(rec: EventRecord) -> bytes:
    return json.dumps(rec.to_wire(), separators=(",", ":")).encode("utf-8") + b"\n"


def decode_event(line: bytes) -> EventRecord:
    obj = json.loads(line.decode("utf-8"))
    if obj["kind"] not in EVENT_KINDS:
        raise ValueError(f"unknown event kind {obj['kind']!r}")
    return EventRecord(
        offset=obj["offset"],
        ts=parse_ts(obj["ts"]),
        kind=obj["kind"],
        payload=obj["payload"],
    )


class EventLog:
    """Append-only newline-delimited event file."""

    def __init__(self, path: Path, fsync: bool = False):
        self.path = Path(path)
        self.fsync = fsync
        self.last_offset = -1
        self._fh = None

    def open_for_append(self) -> None:
        """Open the log, discarding a torn final line left by a crash."""
        good_end = 0
        if self.path.exists():
            for rec, end in _scan_records(self.path):
                if rec.offset != self.last_offset + 1:
                    raise CorruptLogError(
                        f"offset gap: expected {self.last_offset + 1}, got {rec.offset}"
                    )
                self.last_offset = rec.offset
                good_end = end
            size = self.path.stat().st_size
            if size != good_end:
                logger.warning("discarding %d bytes of torn tail in %s", size - good_end, self.path)
                with open(self.path, "r+b") as fh:
                    fh.truncate(good_end)
        self._fh = open(self.path, "ab")

    def append(self, ts: datetime, kind: str, payload: dict) -> EventRecord:
        rec = EventRecord(offset=self.last_offset + 1, ts=ts, kind=kind, payload=payload)
        self._fh.write(encode_event(rec))
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())
        self.last_offset = rec.offset
        return rec

    def close(self) -> None:
        if self._fh is not None:
            self._fh.flush()
            os.fsync(self._fh.fileno())
            self._fh.close()
            self._fh = None


def _scan_records(path: Path) -> Iterator[tuple[EventRecord, int]]:
    """Yield (event, byte end position); tolerate a torn final record only."""
    pending_error = None
    pos = 0
    with open(path, "rb") as fh:
        for raw in fh:
            if pending_error is not None:
                raise CorruptLogError(pending_error)
            end = pos + len(raw)
            if not raw.endswith(b"\n"):
                break  # torn tail: incomplete final line
            try:
                rec = decode_event(raw.rstrip(b"\n"))
            except (ValueError, KeyError) as exc:
                # Malformed, but only fatal when another record follows.
                pending_error = f"corrupt record at byte {pos}: {exc}"
                pos = end
                continue
            yield rec, end
            pos = end


def scan_log(path: Path) -> Iterator[EventRecord]:
    """Read-only scan of an event log (torn final line discarded)."""
    expected = 0
    for rec, _end in _scan_records(path):
        if rec.offset != expected:
            raise CorruptLogError(f"offset gap: expected {expected}, got {rec.offset}")
        expected += 1
        yield rec


class SystemState:
    """Mutable fold target: everything the system knows, rebuildable from the log."""

    def __init__(self, readings_cap: int = READINGS_CAP):
        self.thresholds = Thresholds()
        self.bins: dict[str, BinRecord] = {}
        self.zones: dict[str, Zone] = {}
        self.sensors: dict[str, str] = {}  # sensor_id -> bin_id
        self.users: dict[str, dict] = {}
        self.alerts: dict[str, AlertEvent] = {}
        self.open_alert_ids: dict[tuple[str, str], str] = {}  # (bin_id, kind) -> alert_id
        self.plan: dict | None = None
        self.plan_stale = False
        self.last_full_change_offset = -1
        self.last_full_change_ts: datetime | None = None
        self.dedupe = DedupeIndex()
        self.readings: deque[dict] = deque(maxlen=readings_cap)
        self.last_offset = -1

    # -- fold ---------------------------------------------------------------

    def apply_event(self, ev: EventRecord) -> list[tuple[str, dict]]:
        """Fold one event; returns derived alert events for the writer to confirm."""
        self.last_offset = ev.offset
        handler = {
            READING_ACCEPTED: self._on_reading,
            BIN_EMPTIED: self._on_emptied,
            ALERT_RAISED: self._on_alert_raised,
            ALERT_RESOLVED: self._on_alert_resolved,
            PLAN_CREATED: self._on_plan,
            CONFIG_CHANGED: self._on_config,
        }[ev.kind]
        return handler(ev)

    def _on_reading(self, ev: EventRecord) -> list[tuple[str, dict]]:
        p = ev.payload
        self.dedupe.add(p["sid"], p["seq"])
        rec = self.bins.get(p["bin_id"])
        if rec is None:
            return []
        ts = parse_ts(p["ts"])
        before = rec
        after = apply_reading(rec, p["dist_cm"], p["gas_ppm"], ts, self.thresholds)
        self.bins[p["bin_id"]] = after
        self.readings.append(
            {
                "offset": ev.offset,
                "sensor_id": p["sid"],
                "bin_id": p["bin_id"],
                "seq": p["seq"],
                "ts": p["ts"],
                "distance_cm": p["dist_cm"],
                "gas_ppm": p["gas_ppm"],
                "battery_pct": p["batt_pct"],
                "fill": after.fill,
                "state": after.state.name,
            }
        )
        actions = alerting.evaluate_transition(before, after, self.thresholds, self._open_alerts())
        if after is not before:
            actions += alerting.resolve_offline_on_reading(after, self._open_alerts())
        return self._apply_actions(actions, ev.offset, ts)

    def _on_emptied(self, ev: EventRecord) -> list[tuple[str, dict]]:
        p = ev.payload
        rec = self.bins.get(p["bin_id"])
        if rec is None:
            return []
        ts = parse_ts(p["ts"])
        before = rec
        try:
            after = mark_emptied(rec, ts)
        except StaleTimestampError:
            return []
        self.bins[p["bin_id"]] = after
        actions = alerting.evaluate_transition(before, after, self.thresholds, self._open_alerts())
        return self._apply_actions(actions, ev.offset, ts)

    def _on_alert_raised(self, ev: EventRecord) -> list[tuple[str, dict]]:
        p = ev.payload
        if p["alert_id"] in self.alerts:
            return []  # confirmation of a derived raise
        key = (p["bin_id"], p["kind"])
        if key in self.open_alert_ids:
            return []
        alert = AlertEvent(
            alert_id=p["alert_id"],
            kind=p["kind"],
            bin_id=p["bin_id"],
            raised_ts=parse_ts(p["raised_ts"]),
            detail=p.get("detail", ""),
        )
        self.alerts[alert.alert_id] = alert
        self.open_alert_ids[key] = alert.alert_id
        if alert.kind == alerting.FULL_BIN:
            self._note_full_change(ev.offset, alert.raised_ts)
        return []

    def _on_alert_resolved(self, ev: EventRecord) -> list[tuple[str, dict]]:
        p = ev.payload
        alert = self.alerts.get(p["alert_id"])
        if alert is None or alert.resolved:
            return []
        resolved = replace(alert, resolved_ts=parse_ts(p["resolved_ts"]))
        self.alerts[alert.alert_id] = resolved
        self.open_alert_ids.pop((alert.bin_id, alert.kind), None)
        if alert.kind == alerting.FULL_BIN:
            self._note_full_change(ev.offset, resolved.resolved_ts)
        return []

    def _on_plan(self, ev: EventRecord) -> list[tuple[str, dict]]:
        self.plan = ev.payload
        self.plan_stale = ev.payload["basis_offset"] < self.last_full_change_offset
        return []

    def _on_config(self, ev: EventRecord) -> list[tuple[str, dict]]:
        p = ev.payload
        entity, action, data = p["entity"], p["action"], p.get("data", {})
        if entity == "zone":
            if action == "delete":
                self.zones.pop(data["zone_id"], None)
            else:
                self.zones[data["zone_id"]] = Zone(
                    zone_id=data["zone_id"],
                    name=data.get("name", data["zone_id"]),
                    description=data.get("description", ""),
                )
        elif entity == "sensor":
            if action == "delete":
                bin_id = self.sensors.pop(data["sensor_id"], None)
                if bin_id is not None:
                    self.bins.pop(bin_id, None)
                    return self._close_alerts_for(bin_id, ev)
            else:
                config = BinConfig(
                    bin_id=data["bin_id"],
                    sensor_id=data["sensor_id"],
                    location=GeoPoint(data["lat"], data["lon"]),
                    zone_id=data.get("zone_id", ""),
                    depth_cm=data["depth_cm"],
                    full_offset_cm=data["full_offset_cm"],
                )
                existing = self.bins.get(config.bin_id)
                for sid, bid in list(self.sensors.items()):
                    if bid == config.bin_id and sid != config.sensor_id:
                        del self.sensors[sid]
                if existing is not None:
                    self.bins[config.bin_id] = replace(existing, config=config)
                else:
                    self.bins[config.bin_id] = BinRecord(config=config)
                self.sensors[config.sensor_id] = config.bin_id
        elif entity == "user":
            if action == "delete":
                self.users.pop(data["username"], None)
            else:
                self.users[data["username"]] = data
        elif entity == "thresholds":
            self.thresholds = Thresholds(**data)
        return []

    def _close_alerts_for(self, bin_id: str, ev: EventRecord) -> list[tuple[str, dict]]:
        actions = [
            AlertAction(alerting.RESOLVE, kind, bin_id, alert_id=aid)
            for (bid, kind), aid in list(self.open_alert_ids.items())
            if bid == bin_id
        ]
        return self._apply_actions(actions, ev.offset, ev.ts)

    def _apply_actions(
        self, actions: list[AlertAction], offset: int, ts: datetime
    ) -> list[tuple[str, dict]]:
        """Apply derived raise/resolve actions; return the confirmation events."""
        confirmations: list[tuple[str, dict]] = []
        for act in actions:
            if act.op == alerting.RAISE:
                alert_id = f"{act.kind.lower()}-{act.bin_id}-{offset}"
                key = (act.bin_id, act.kind)
                if alert_id in self.alerts or key in self.open_alert_ids:
                    continue
                alert = AlertEvent(
                    alert_id=alert_id,
                    kind=act.kind,
                    bin_id=act.bin_id,
                    raised_ts=ts,
                    detail=act.detail,
                )
                self.alerts[alert_id] = alert
                self.open_alert_ids[key] = alert_id
                if act.kind == alerting.FULL_BIN:
                    self._note_full_change(offset, ts)
                confirmations.append(
                    (
                        ALERT_RAISED,
                        {
                            "alert_id": alert_id,
                            "kind": act.kind,
                            "bin_id": act.bin_id,
                            "raised_ts": format_ts(ts),
                            "detail": act.detail,
                        },
                    )
                )
            else:
                alert_id = act.alert_id or self.open_alert_ids.get((act.bin_id, act.kind))
                alert = self.alerts.get(alert_id) if alert_id else None
                if alert is None or alert.resolved:
                    continue
                self.alerts[alert_id] = replace(alert, resolved_ts=ts)
                self.open_alert_ids.pop((act.bin_id, act.kind), None)
                if act.kind == alerting.FULL_BIN:
                    self._note_full_change(offset, ts)
                confirmations.append(
                    (
                        ALERT_RESOLVED,
                        {
                            "alert_id": alert_id,
                            "kind": act.kind,
                            "bin_id": act.bin_id,
                            "resolved_ts": format_ts(ts),
                        },
                    )
                )
        return confirmations

    def _note_full_change(self, offset: int, ts: datetime) -> None:
        self.plan_stale = True
        self.last_full_change_offset = offset
        self.last_full_change_ts = ts

    def _open_alerts(self) -> list[AlertEvent]:
        return [self.alerts[aid] for aid in self.open_alert_ids.values()]

    # -- views --------------------------------------------------------------

    def worker_profiles(self) -> list[WorkerProfile]:
        out = []
        for u in self.users.values():
            if u.get("role") != "WORKER" or u.get("lat") is None or u.get("lon") is None:
                continue
            out.append(
                WorkerProfile(
                    worker_id=u["username"],
                    name=u.get("name", u["username"]),
                    start_location=GeoPoint(u["lat"], u["lon"]),
                    capacity=u.get("capacity", 5),
                )
            )
        return sorted(out, key=lambda w: w.worker_id)

    # -- snapshot serialization ----------------------------------------------

    def to_snapshot_dict(self) -> dict:
        return {
            "as_of_offset": self.last_offset if self.last_offset >= 0 else None,
            "thresholds": {
                "empty_below": self.thresholds.empty_below,
                "almost_full_at": self.thresholds.almost_full_at,
                "full_at": self.thresholds.full_at,
                "hysteresis": self.thresholds.hysteresis,
                "gas_alert_ppm": self.thresholds.gas_alert_ppm,
            },
            "bins": {bid: _bin_to_dict(rec) for bid, rec in sorted(self.bins.items())},
            "zones": {
                zid: {"zone_id": z.zone_id, "name": z.name, "description": z.description}
                for zid, z in sorted(self.zones.items())
            },
            "sensors": dict(sorted(self.sensors.items())),
            "users": {name: dict(u) for name, u in sorted(self.users.items())},
            "alerts": {aid: _alert_to_dict(a) for aid, a in sorted(self.alerts.items())},
            "plan": self.plan,
            "plan_stale": self.plan_stale,
            "last_full_change": [
                self.last_full_change_offset,
                format_ts(self.last_full_change_ts) if self.last_full_change_ts else None,
            ],
            "dedupe": self.dedupe.to_dict(),
            "readings": list(self.readings),
        }

    @classmethod
    def from_snapshot_dict(cls, data: dict, readings_cap: int = READINGS_CAP) -> "SystemState":
        state = cls(readings_cap=readings_cap)
        state.last_offset = data["as_of_offset"] if data["as_of_offset"] is not None else -1
        state.thresholds = Thresholds(**data["thresholds"])
        state.bins = {bid: _bin_from_dict(d) for bid, d in data["bins"].items()}
        state.zones = {
            zid: Zone(zone_id=z["zone_id"], name=z["name"], description=z.get("description", ""))
            for zid, z in data["zones"].items()
        }
        state.sensors = dict(data["sensors"])
        state.users = {name: dict(u) for name, u in data["users"].items()}
        state.alerts = {aid: _alert_from_dict(d) for aid, d in data["alerts"].items()}
        state.open_alert_ids = {
            (a.bin_id, a.kind): aid for aid, a in state.alerts.items() if not a.resolved
        }
        state.plan = data["plan"]
        state.plan_stale = data["plan_stale"]
        state.last_full_change_offset = data["last_full_change"][0]
        state.last_full_change_ts = (
            parse_ts(data["last_full_change"][1]) if data["last_full_change"][1] else None
        )
        state.dedupe = DedupeIndex.from_dict(data["dedupe"])
        state.readings = deque(data["readings"], maxlen=readings_cap)
        return state

    def core_hash(self) -> str:
        """Hash of the replay-relevant state.

        Credential records are excluded (password salts are random per
        creation); the dispatch-relevant worker profiles derived from them are
        hashed instead.
        """
        d = self.to_snapshot_dict()
        del d["users"]
        d["workers"] = [
            {
                "worker_id": w.worker_id,
                "name": w.name,
                "lat": w.start_location.lat,
                "lon": w.start_location.lon,
                "capacity": w.capacity,
            }
            for w in self.worker_profiles()
        ]
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def _bin_to_dict(rec: BinRecord) -> dict:
    c = rec.config
    return {
        "bin_id": c.bin_id,
        "sensor_id": c.sensor_id,
        "zone_id": c.zone_id,
        "lat": c.location.lat,
        "lon": c.location.lon,
        "depth_cm": c.depth_cm,
        "full_offset_cm": c.full_offset_cm,
        "fill": rec.fill,
        "state": rec.state.name,
        "last_reading_ts": format_ts(rec.last_reading_ts) if rec.last_reading_ts else None,
        "last_gas_ppm": rec.last_gas_ppm,
    }


def _bin_from_dict(d: dict) -> BinRecord:
    return BinRecord(
        config=BinConfig(
            bin_id=d["bin_id"],
            sensor_id=d["sensor_id"],
            location=GeoPoint(d["lat"], d["lon"]),
            zone_id=d.get("zone_id", ""),
            depth_cm=d["depth_cm"],
            full_offset_cm=d["full_offset_cm"],
        ),
        fill=d["fill"],
        state=BinState[d["state"]],
        last_reading_ts=parse_ts(d["last_reading_ts"]) if d["last_reading_ts"] else None,
        last_gas_ppm=d["last_gas_ppm"],
    )


def _alert_to_dict(a: AlertEvent) -> dict:
    return {
        "alert_id": a.alert_id,
        "kind": a.kind,
        "bin_id": a.bin_id,
        "raised_ts": format_ts(a.raised_ts),
        "resolved_ts": format_ts(a.resolved_ts) if a.resolved_ts else None,
        "detail": a.detail,
    }


def _alert_from_dict(d: dict) -> AlertEvent:
    return AlertEvent(
        alert_id=d["alert_id"],
        kind=d["kind"],
        bin_id=d["bin_id"],
        raised_ts=parse_ts(d["raised_ts"]),
        resolved_ts=parse_ts(d["resolved_ts"]) if d["resolved_ts"] else None,
        detail=d.get("detail", ""),
    )


def replay_log(path: Path, readings_cap: int = READINGS_CAP) -> SystemState:
    """Fold every complete record of an event log from an empty state."""
    state = SystemState(readings_cap=readings_cap)
    for rec in scan_log(path):
        state.apply_event(rec)
    return state


def recover_state(data_dir: str | Path, readings_cap: int = READINGS_CAP) -> SystemState:
    """Read-only recovery: newest valid snapshot plus the log tail after it."""
    data_dir = Path(data_dir)
    state = load_latest_snapshot(data_dir, readings_cap=readings_cap)
    if state is None:
        state = SystemState(readings_cap=readings_cap)
    log_path = data_dir / LOG_FILENAME
    if log_path.exists():
        for rec in scan_log(log_path):
            if rec.offset > state.last_offset:
                state.apply_event(rec)
    return state


def load_latest_snapshot(data_dir: Path, readings_cap: int = READINGS_CAP) -> SystemState | None:
    """Newest valid snapshot in the directory, or None (corrupt ones are skipped)."""
    candidates = []
    for name in os.listdir(data_dir):
        m = SNAPSHOT_RE.match(name)
        if m:
            candidates.append((int(m.group(1)), name))
    for _offset, name in sorted(candidates, reverse=True):
        try:
            with open(Path(data_dir) / name, "rb") as fh:
                data = json.load(fh)
            return SystemState.from_snapshot_dict(data, readings_cap=readings_cap)
        except (ValueError, KeyError, TypeError) as exc:
            logger.warning("ignoring unreadable snapshot %s: %s", name, exc)
    return None


class Store:
    """Single-writer store service: log + folded state + subscriber fan-out."""

    def __init__(
        self,
        data_dir: str | Path,
        thresholds: Thresholds | None = None,
        fsync: bool = False,
        readings_cap: int = READINGS_CAP,
        auto_plan: bool = False,
    ):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.lock = threading.RLock()
        self.readings_cap = readings_cap
        self.auto_plan = auto_plan
        self.log = EventLog(self.data_dir / LOG_FILENAME, fsync=fsync)
        self._subscribers: list[queue.Queue] = []
        self._stale_callbacks: list[Callable[[], None]] = []
        self.recovered_offset = -1

        snapshot = load_latest_snapshot(self.data_dir, readings_cap=readings_cap)
        self.state = snapshot if snapshot is not None else SystemState(readings_cap=readings_cap)
        self.log.open_for_append()
        if self.log.last_offset < self.state.last_offset:
            raise CorruptLogError(
                f"snapshot is ahead of the log ({self.state.last_offset} > {self.log.last_offset})"
            )
        for rec in scan_log(self.log.path):
            if rec.offset > self.state.last_offset:
                self.state.apply_event(rec)
        self.recovered_offset = self.state.last_offset
        if thresholds is not None and thresholds != self.state.thresholds:
            self.set_thresholds(thresholds)

    # -- writer paths ---------------------------------------------------------

    def _append_and_fold(self, ts: datetime, kind: str, payload: dict) -> EventRecord:
        was_stale = self.state.plan_stale
        rec = self.log.append(ts, kind, payload)
        confirmations = self.state.apply_event(rec)
        self._publish(rec)
        full_bin_raised = False
        for ckind, cpayload in confirmations:
            ts_field = "raised_ts" if ckind == ALERT_RAISED else "resolved_ts"
            crec = self.log.append(parse_ts(cpayload[ts_field]), ckind, cpayload)
            self.state.apply_event(crec)  # idempotent confirm
            self._publish(crec)
            if ckind == ALERT_RAISED and cpayload["kind"] == alerting.FULL_BIN:
                full_bin_raised = True
        if self.state.plan_stale and not was_stale:
            self._fire_stale_callbacks()
        if full_bin_raised and self.auto_plan:
            # Dispatch immediately on FULL detection, in the same write batch,
            # so plan events land at reproducible offsets. Bins leaving the
            # FULL set only mark the plan stale.
            self.create_plan()
        return rec

    def submit_reading(self, env: ReadingEnvelope) -> str:
        """Registry check, dedupe and append, atomically. Telemetry sink."""
        with self.lock:
            bin_id = self.state.sensors.get(env.sensor_id)
            if bin_id is None:
                return UNKNOWN_SENSOR
            if self.state.dedupe.seen(env.sensor_id, env.seq):
                return DUPLICATE
            rec = self.state.bins[bin_id]
            preview = apply_reading(
                rec, env.distance_cm, env.gas_ppm, env.ts, self.state.thresholds
            )
            self._append_and_fold(
                env.ts,
                READING_ACCEPTED,
                {
                    "sid": env.sensor_id,
                    "seq": env.seq,
                    "ts": format_ts(env.ts),
                    "dist_cm": env.distance_cm,
                    "gas_ppm": env.gas_ppm,
                    "batt_pct": env.battery_pct,
                    "bin_id": bin_id,
                    "fill": preview.fill,
                    "state": preview.state.name,
                },
            )
            return ACCEPTED

    def empty_bin(self, bin_id: str, ts: datetime | None = None) -> BinRecord:
        """Operator marks a bin collected. Raises KeyError / StaleTimestampError."""
        with self.lock:
            rec = self.state.bins.get(bin_id)
            if rec is None:
                raise KeyError(bin_id)
            ts = ts or utc_now()
            after = mark_emptied(rec, ts)  # validates the clock before anything is written
            self._append_and_fold(
                ts,
                BIN_EMPTIED,
                {"bin_id": bin_id, "ts": format_ts(ts), "fill": after.fill, "state": after.state.name},
            )
            return self.state.bins[bin_id]

    def run_offline_scan(self, now: datetime, timeout_s: float) -> int:
        """Raise/resolve SENSOR_OFFLINE alerts; returns the number of actions taken."""
        with self.lock:
            actions = alerting.offline_scan(
                now, self.state.bins.values(), timeout_s, self.state._open_alerts()
            )
            count = 0
            for act in actions:
                if act.op == alerting.RAISE:
                    alert_id = f"{act.kind.lower()}-{act.bin_id}-{self.log.last_offset + 1}"
                    self._append_and_fold(
                        now,
                        ALERT_RAISED,
                        {
                            "alert_id": alert_id,
                            "kind": act.kind,
                            "bin_id": act.bin_id,
                            "raised_ts": format_ts(now),
                            "detail": act.detail,
                        },
                    )
                else:
                    self._append_and_fold(
                        now,
                        ALERT_RESOLVED,
                        {
                            "alert_id": act.alert_id,
                            "kind": act.kind,
                            "bin_id": act.bin_id,
                            "resolved_ts": format_ts(now),
                        },
                    )
                count += 1
            return count

    def create_plan(self, created_ts: datetime | None = None) -> dict:
        """Compute and persist a dispatch plan for the current FULL set.

        Automatic recomputes pass no timestamp: the plan is then stamped with
        the last FULL-set change, keeping replans reproducible across runs.
        """
        with self.lock:
            basis = self.state.last_full_change_offset
            ts = created_ts or self.state.last_full_change_ts or utc_now()
            plan = dispatch.plan_dispatch(
                list(self.state.bins.values()), self.state.worker_profiles(), ts
            )
            payload = plan.to_payload()
            payload["basis_offset"] = basis
            self._append_and_fold(ts, PLAN_CREATED, payload)
            return self.get_plan()

    def set_thresholds(self, t: Thresholds) -> None:
        with self.lock:
            if t == self.state.thresholds:
                return
            self._append_and_fold(
                utc_now(),
                CONFIG_CHANGED,
                {
                    "entity": "thresholds",
                    "action": "upsert",
                    "data": {
                        "empty_below": t.empty_below,
                        "almost_full_at": t.almost_full_at,
                        "full_at": t.full_at,
                        "hysteresis": t.hysteresis,
                        "gas_alert_ppm": t.gas_alert_ppm,
                    },
                },
            )

    def upsert_zone(self, zone: Zone, must_be_new: bool = False) -> None:
        with self.lock:
            if must_be_new and zone.zone_id in self.state.zones:
                raise DuplicateIdError(f"zone {zone.zone_id} already exists")
            self._append_and_fold(
                utc_now(),
                CONFIG_CHANGED,
                {
                    "entity": "zone",
                    "action": "upsert",
                    "data": {
                        "zone_id": zone.zone_id,
                        "name": zone.name,
                        "description": zone.description,
                    },
                },
            )

    def delete_zone(self, zone_id: str) -> None:
        with self.lock:
            if zone_id not in self.state.zones:
                raise KeyError(zone_id)
            self._append_and_fold(
                utc_now(),
                CONFIG_CHANGED,
                {"entity": "zone", "action": "delete", "data": {"zone_id": zone_id}},
            )

    def register_sensor(self, config: BinConfig, must_be_new: bool = False) -> None:
        """Bind a sensor to a bin (one sensor per bin; both ids unique system-wide).

        Updates keep the existing sensor-to-bin binding; geometry, zone and
        coordinates may change.
        """
        with self.lock:
            existing_bin = self.state.sensors.get(config.sensor_id)
            if must_be_new:
                if existing_bin is not None:
                    raise DuplicateIdError(f"sensor {config.sensor_id} already registered")
                if config.bin_id in self.state.bins:
                    raise DuplicateIdError(f"bin {config.bin_id} already registered")
            else:
                if existing_bin is not None and existing_bin != config.bin_id:
                    raise DuplicateIdError(
                        f"sensor {config.sensor_id} is bound to bin {existing_bin}"
                    )
                current = self.state.bins.get(config.bin_id)
                if current is not None and current.config.sensor_id != config.sensor_id:
                    raise DuplicateIdError(
                        f"bin {config.bin_id} already has sensor {current.config.sensor_id}"
                    )
            self._append_and_fold(
                utc_now(),
                CONFIG_CHANGED,
                {
                    "entity": "sensor",
                    "action": "upsert",
                    "data": {
                        "sensor_id": config.sensor_id,
                        "bin_id": config.bin_id,
                        "zone_id": config.zone_id,
                        "lat": config.location.lat,
                        "lon": config.location.lon,
                        "depth_cm": config.depth_cm,
                        "full_offset_cm": config.full_offset_cm,
                    },
                },
            )

    def delete_sensor(self, sensor_id: str) -> None:
        with self.lock:
            if sensor_id not in self.state.sensors:
                raise KeyError(sensor_id)
            self._append_and_fold(
                utc_now(),
                CONFIG_CHANGED,
                {"entity": "sensor", "action": "delete", "data": {"sensor_id": sensor_id}},
            )

    def upsert_user(self, record: dict, must_be_new: bool = False) -> None:
        with self.lock:
            if must_be_new and record["username"] in self.state.users:
                raise DuplicateIdError(f"user {record['username']} already exists")
            self._append_and_fold(
                utc_now(), CONFIG_CHANGED, {"entity": "user", "action": "upsert", "data": record}
            )

    def delete_user(self, username: str) -> None:
        with self.lock:
            if username not in self.state.users:
                raise KeyError(username)
            self._append_and_fold(
                utc_now(),
                CONFIG_CHANGED,
                {"entity": "user", "action": "delete", "data": {"username": username}},
            )

    # -- read views -----------------------------------------------------------

    def list_bins(self) -> list[dict]:
        with self.lock:
            return [_bin_to_dict(rec) for _bid, rec in sorted(self.state.bins.items())]

    def get_bin(self, bin_id: str) -> dict | None:
        with self.lock:
            rec = self.state.bins.get(bin_id)
            return _bin_to_dict(rec) if rec is not None else None

    def list_alerts(self, active: bool | None = None) -> list[dict]:
        with self.lock:
            out = []
            for alert in self.state.alerts.values():
                if active is True and alert.resolved:
                    continue
                if active is False and not alert.resolved:
                    continue
                out.append(_alert_to_dict(alert))
            return out

    def list_reads(
        self,
        sensor: str | None = None,
        bin_id: str | None = None,
        since: datetime | None = None,
        limit: int = 100,
    ) -> list[dict]:
        with self.lock:
            out = []
            for entry in reversed(self.state.readings):
                if sensor is not None and entry["sensor_id"] != sensor:
                    continue
                if bin_id is not None and entry["bin_id"] != bin_id:
                    continue
                if since is not None and parse_ts(entry["ts"]) < since:
                    continue
                out.append(dict(entry))
                if len(out) >= limit:
                    break
            return out

    def get_plan(self) -> dict:
        with self.lock:
            return {"plan": self.state.plan, "stale": self.state.plan_stale}

    def list_zones(self) -> list[dict]:
        with self.lock:
            return [
                {"zone_id": z.zone_id, "name": z.name, "description": z.description}
                for _zid, z in sorted(self.state.zones.items())
            ]

    def list_sensors(self) -> list[dict]:
        with self.lock:
            out = []
            for sensor_id, bin_id in sorted(self.state.sensors.items()):
                rec = self.state.bins[bin_id]
                c = rec.config
                out.append(
                    {
                        "sensor_id": sensor_id,
                        "bin_id": bin_id,
                        "zone_id": c.zone_id,
                        "lat": c.location.lat,
                        "lon": c.location.lon,
                        "depth_cm": c.depth_cm,
                        "full_offset_cm": c.full_offset_cm,
                    }
                )
            return out

    def list_users(self) -> list[dict]:
        with self.lock:
            return [dict(u) for _name, u in sorted(self.state.users.items())]

    def get_user(self, username: str) -> dict | None:
        with self.lock:
            u = self.state.users.get(username)
            return dict(u) if u is not None else None

    def state_hash(self) -> str:
        with self.lock:
            return self.state.core_hash()

    # -- event stream -----------------------------------------------------------

    def subscribe_with_backlog(
        self, after_offset: int | None = None, max_queue: int = 1000
    ) -> tuple[queue.Queue, list[EventRecord]]:
        """Subscribe to live events, plus the streamable backlog after an offset.

        Done under the writer lock so there is no gap and no overlap between
        the returned backlog and what subsequently arrives on the queue.
        """
        with self.lock:
            backlog: list[EventRecord] = []
            if after_offset is not None:
                for rec in scan_log(self.log.path):
                    if rec.offset > after_offset and rec.kind in STREAMED_KINDS:
                        backlog.append(rec)
            q: queue.Queue = queue.Queue(maxsize=max_queue)
            self._subscribers.append(q)
            return q, backlog

    def unsubscribe(self, q: queue.Queue) -> None:
        with self.lock:
            if q in self._subscribers:
                self._subscribers.remove(q)

    def _publish(self, rec: EventRecord) -> None:
        if rec.kind not in STREAMED_KINDS:
            return
        for q in list(self._subscribers):
            try:
                q.put_nowait(rec)
            except queue.Full:
                # Slow consumer: never block the writer; the client resumes from the log.
                self._subscribers.remove(q)
                try:
                    q.put_nowait(None)
                except queue.Full:
                    pass

    def on_plan_stale(self, callback: Callable[[], None]) -> None:
        with self.lock:
            self._stale_callbacks.append(callback)

    def _fire_stale_callbacks(self) -> None:
        for cb in self._stale_callbacks:
            cb()

    # -- snapshots / shutdown -----------------------------------------------------

    def write_snapshot(self) -> Path | None:
        with self.lock:
            if self.state.last_offset < 0:
                return None
            path = self.data_dir / f"snapshot-{self.state.last_offset}.json"
            tmp = path.with_suffix(".json.tmp")
            blob = json.dumps(self.state.to_snapshot_dict(), sort_keys=True, indent=1)
            with open(tmp, "w", encoding="utf-8") as fh:
                fh.write(blob)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
            return path

    def close(self) -> None:
        with self.lock:
            self.write_snapshot()
            self.log.close()
