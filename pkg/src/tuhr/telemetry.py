"""Sensor wire protocol and the ingestion listener.

One UTF-8 JSON record per line, LF terminated. Record fields:
``v`` (must be 1), ``sid``, ``seq`` (int >= 0), ``ts`` (ISO 8601 UTC, Z suffix),
``dist_cm``, ``gas_ppm``, ``batt_pct``. Every line is answered with exactly one
ack line, e.g. ``{"ok":true,"seq":7}``, ``{"ok":true,"seq":7,"dup":true}`` or
``{"ok":false,"seq":null,"err":"PARSE"}``.

Delivery is at-least-once: sensors resend until acked and the server
deduplicates by (sensor_id, seq). Duplicates are acked positively with
``dup`` set so firmware does not need to distinguish first send from retry.
"""

from __future__ import annotations

import json
import logging
import math
import selectors
import socket
import threading
from dataclasses import dataclass, field
from datetime import datetime
from typing import Callable

from .model import format_ts, parse_ts

log = logging.getLogger("tuhr.telemetry")

# Ack / submit error codes.
ERR_PARSE = "PARSE"
ERR_VERSION = "VERSION"
ERR_RANGE = "RANGE"
ERR_UNKNOWN_SENSOR = "UNKNOWN_SENSOR"

# Outcomes of handing an envelope to the store.
ACCEPTED = "accepted"
DUPLICATE = "duplicate"
UNKNOWN_SENSOR = "unknown_sensor"


class ProtocolError(ValueError):
    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code


@dataclass(frozen=True)
class ReadingEnvelope:
    version: int
    sensor_id: str
    seq: int
    ts: datetime
    distance_cm: float
    gas_ppm: float
    battery_pct: float


@dataclass(frozen=True)
class AckRecord:
    ok: bool
    seq: int | None = None
    err: str | None = None
    dup: bool = False


_NUMERIC_FIELDS = ("dist_cm", "gas_ppm", "batt_pct")


def _require_int(obj: dict, key: str):
    v = obj.get(key)
    if isinstance(v, bool) or not isinstance(v, int):
        raise ProtocolError(ERR_PARSE, f"field {key} must be an integer")
    return v


def parse_record(line: bytes) -> ReadingEnvelope:
    """Parse one wire record (without its newline) or raise ProtocolError."""
    try:
        obj = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(ERR_PARSE, str(exc)) from exc
    if not isinstance(obj, dict):
        raise ProtocolError(ERR_PARSE, "record must be an object")
    for key in ("v", "sid", "seq", "ts", "dist_cm", "gas_ppm", "batt_pct"):
        if key not in obj:
            raise ProtocolError(ERR_PARSE, f"missing field {key}")

    version = _require_int(obj, "v")
    if version != 1:
        raise ProtocolError(ERR_VERSION, f"unsupported version {version}")

    sid = obj["sid"]
    if not isinstance(sid, str) or not sid:
        raise ProtocolError(ERR_PARSE, "sid must be a nonempty string")

    seq = _require_int(obj, "seq")
    if seq < 0:
        raise ProtocolError(ERR_RANGE, "seq must be >= 0")

    if not isinstance(obj["ts"], str):
        raise ProtocolError(ERR_PARSE, "ts must be a string")
    try:
        ts = parse_ts(obj["ts"])
    except ValueError as exc:
        raise ProtocolError(ERR_RANGE, str(exc)) from exc

    values = {}
    for key in _NUMERIC_FIELDS:
        v = obj[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ProtocolError(ERR_PARSE, f"field {key} must be a number")
        v = float(v)
        if not math.isfinite(v):
            raise ProtocolError(ERR_RANGE, f"field {key} must be finite")
        values[key] = v
    if values["dist_cm"] < 0:
        raise ProtocolError(ERR_RANGE, "dist_cm must be >= 0")
    if values["gas_ppm"] < 0:
        raise ProtocolError(ERR_RANGE, "gas_ppm must be >= 0")
    if not 0.0 <= values["batt_pct"] <= 100.0:
        raise ProtocolError(ERR_RANGE, "batt_pct must be in [0, 100]")

    return ReadingEnvelope(
        version=1,
        sensor_id=sid,
        seq=seq,
        ts=ts,
        distance_cm=values["dist_cm"],
        gas_ppm=values["gas_ppm"],
        battery_pct=values["batt_pct"],
    )


def encode_record(env: ReadingEnvelope) -> bytes:
    """Render an envelope as one wire line (newline terminated)."""
    obj = {
        "v": env.version,
        "sid": env.sensor_id,
        "seq": env.seq,
        "ts": format_ts(env.ts),
        "dist_cm": env.distance_cm,
        "gas_ppm": env.gas_ppm,
        "batt_pct": env.battery_pct,
    }
    return json.dumps(obj, separators=(",", ":")).encode("utf-8") + b"\n"


def serialize_ack(ack: AckRecord) -> bytes:
    obj: dict = {"ok": ack.ok, "seq": ack.seq}
    if ack.dup:
        obj["dup"] = True
    if ack.err is not None:
        obj["err"] = ack.err
    return json.dumps(obj, separators=(",", ":")).encode("utf-8") + b"\n"


def parse_ack(line: bytes) -> AckRecord:
    obj = json.loads(line.decode("utf-8"))
    return AckRecord(
        ok=bool(obj["ok"]),
        seq=obj.get("seq"),
        err=obj.get("err"),
        dup=bool(obj.get("dup", False)),
    )


@dataclass
class DedupeIndex:
    """Per-sensor record of accepted seq values.

    Kept as a contiguous floor plus a sparse tail so long-lived sensors do not
    grow the set: everything <= floor is accepted, plus whatever is in sparse.
    """

    floor: dict[str, int] = field(default_factory=dict)
    sparse: dict[str, set[int]] = field(default_factory=dict)

    def seen(self, sensor_id: str, seq: int) -> bool:
        return seq <= self.floor.get(sensor_id, -1) or seq in self.sparse.get(sensor_id, ())

    def add(self, sensor_id: str, seq: int) -> None:
        floor = self.floor.get(sensor_id, -1)
        if seq <= floor:
            return
        tail = self.sparse.setdefault(sensor_id, set())
        tail.add(seq)
        while floor + 1 in tail:
            floor += 1
            tail.discard(floor)
        self.floor[sensor_id] = floor
        if not tail:
            del self.sparse[sensor_id]

    def check_and_add(self, sensor_id: str, seq: int) -> bool:
        """True if (sensor_id, seq) is fresh; fresh entries are recorded."""
        if self.seen(sensor_id, seq):
            return False
        self.add(sensor_id, seq)
        return True

    def to_dict(self) -> dict:
        return {
            sid: {"floor": self.floor[sid], "sparse": sorted(self.sparse.get(sid, ()))}
            for sid in sorted(self.floor)
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DedupeIndex":
        idx = cls()
        for sid, entry in data.items():
            idx.floor[sid] = entry["floor"]
            if entry.get("sparse"):
                idx.sparse[sid] = set(entry["sparse"])
        return idx


def check_duplicate(index: DedupeIndex, env: ReadingEnvelope) -> str:
    """DUPLICATE if (sensor_id, seq) was already accepted, else FRESH (and record it)."""
    return "FRESH" if index.check_and_add(env.sensor_id, env.seq) else "DUPLICATE"


# sink(env) -> ACCEPTED | DUPLICATE | UNKNOWN_SENSOR. The store implements this;
# it must perform the registry check, dedupe and append atomically.
Sink = Callable[[ReadingEnvelope], str]


def handle_line(line: bytes, sink: Sink) -> tuple[AckRecord, ReadingEnvelope | None]:
    """Process one record line: parse, submit, build the ack.

    Returns the accepted envelope only when it was fresh and forwarded, so a
    malformed or duplicate line never affects anything beyond its own ack.
    """
    try:
        env = parse_record(line)
    except ProtocolError as exc:
        return AckRecord(ok=False, err=exc.code), None
    result = sink(env)
    if result == UNKNOWN_SENSOR:
        return AckRecord(ok=False, seq=env.seq, err=ERR_UNKNOWN_SENSOR), None
    if result == DUPLICATE:
        return AckRecord(ok=True, seq=env.seq, dup=True), None
    return AckRecord(ok=True, seq=env.seq), env


class TelemetryServer:
    """Single-threaded selector loop accepting many concurrent sensor sessions.

    Each connection's lines are processed strictly in order; sessions are
    independent. All accepted envelopes funnel through the sink, which
    serializes writes on its own lock.
    """

    def __init__(self, host: str, port: int, sink: Sink):
        self._sink = sink
        self._sel = selectors.DefaultSelector()
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(1024)
        self._listener.setblocking(False)
        self.port = self._listener.getsockname()[1]
        self._sel.register(self._listener, selectors.EVENT_READ, None)
        self._wake_r, self._wake_w = socket.socketpair()
        self._wake_r.setblocking(False)
        self._sel.register(self._wake_r, selectors.EVENT_READ, None)
        self._stopping = False
        self._thread: threading.Thread | None = None
        # conn -> [in_buffer, out_buffer]
        self._conns: dict[socket.socket, list[bytearray]] = {}

    def start(self) -> None:
        self._thread = threading.Thread(target=self._loop, name="telemetry", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stopping = True
        try:
            self._wake_w.send(b"x")
        except OSError:
            pass
        if self._thread is not None:
            self._thread.join(timeout=5)
        for conn in list(self._conns):
            self._drop(conn)
        for sock in (self._listener, self._wake_r, self._wake_w):
            try:
                sock.close()
            except OSError:
                pass
        self._sel.close()

    def _loop(self) -> None:
        while not self._stopping:
            for key, events in self._sel.select(timeout=1.0):
                sock = key.fileobj
                if sock is self._wake_r:
                    try:
                        self._wake_r.recv(64)
                    except OSError:
                        pass
                elif sock is self._listener:
                    self._accept()
                else:
                    if events & selectors.EVENT_READ:
                        self._readable(sock)
                    if sock in self._conns and events & selectors.EVENT_WRITE:
                        self._flush(sock)

    def _accept(self) -> None:
        while True:
            try:
                conn, _addr = self._listener.accept()
            except (BlockingIOError, OSError):
                return
            conn.setblocking(False)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._conns[conn] = [bytearray(), bytearray()]
            self._sel.register(conn, selectors.EVENT_READ, "conn")

    def _drop(self, conn: socket.socket) -> None:
        # A torn trailing line dies with the session; accepted state is unaffected.
        try:
            self._sel.unregister(conn)
        except (KeyError, ValueError):
            pass
        self._conns.pop(conn, None)
        try:
            conn.close()
        except OSError:
            pass

    def _readable(self, conn: socket.socket) -> None:
        bufs = self._conns.get(conn)
        if bufs is None:
            return
        try:
            chunk = conn.recv(65536)
        except (BlockingIOError, InterruptedError):
            return
        except OSError:
            self._drop(conn)
            return
        if not chunk:
            self._drop(conn)
            return
        in_buf, out_buf = bufs
        in_buf.extend(chunk)
        while True:
            nl = in_buf.find(b"\n")
            if nl < 0:
                break
            line = bytes(in_buf[:nl])
            del in_buf[: nl + 1]
            ack, _env = handle_line(line, self._sink)
            out_buf.extend(serialize_ack(ack))
        if out_buf:
            self._flush(conn)

    def _flush(self, conn: socket.socket) -> None:
        bufs = self._conns.get(conn)
        if bufs is None:
            return
        out_buf = bufs[1]
        try:
            while out_buf:
                sent = conn.send(bytes(out_buf[:65536]))
                del out_buf[:sent]
        except (BlockingIOError, InterruptedError):
            pass
        except OSError:
            self._drop(conn)
            return
        events = selectors.EVENT_READ | (selectors.EVENT_WRITE if out_buf else 0)
        try:
            self._sel.modify(conn, events, "conn")
        except (KeyError, ValueError):
            pass
