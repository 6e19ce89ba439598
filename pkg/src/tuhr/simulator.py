"""Deterministic, seedable sensor-fleet simulator speaking the wire protocol.

Each simulated bin advances an analytic fill (linear growth plus optional
Gaussian jitter, clamped to [0, 1]), reports on a fixed interval by converting
fill back to an ultrasonic distance, and routes every record through a fault
model (loss, duplication, bounded delay/reorder). All randomness comes from
per-sensor streams seeded from (scenario seed, sensor id), so record streams
are byte-identical across runs and stay aligned when only fault probabilities
change.

Timestamps use the scenario epoch plus simulated seconds, never wall clock.
"""

from __future__ import annotations

import json
import logging
import selectors
import socket
import time
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from random import Random

from .model import BinConfig, GeoPoint, fill_to_distance, parse_ts
from .telemetry import ReadingEnvelope, encode_record, parse_ack

logger = logging.getLogger("tuhr.simulator")

DEFAULT_START_TS = datetime(2025, 6, 1, 0, 0, 0, tzinfo=timezone.utc)
BATTERY_PCT = 100.0

# Gas events are trapezoids: ramp up, hold peak, ramp down.
GAS_RAMP_FRACTION = 0.25


class ScenarioError(ValueError):
    def __init__(self, code: str, detail: str):
        super().__init__(f"{code}: {detail}")
        self.code = code  # PARSE or INVALID
        self.detail = detail


@dataclass(frozen=True)
class SimBin:
    config: BinConfig
    initial_fill: float = 0.0
    fill_rate_per_hr: float = 0.0
    fill_jitter: float = 0.0


@dataclass(frozen=True)
class GasEvent:
    bin_id: str
    start_s: float
    duration_s: float
    peak_ppm: float

    def level_at(self, t_s: float) -> float:
        dt = t_s - self.start_s
        if dt < 0 or dt > self.duration_s:
            return 0.0
        ramp = self.duration_s * GAS_RAMP_FRACTION
        if dt < ramp:
            return self.peak_ppm * dt / ramp
        if dt > self.duration_s - ramp:
            return self.peak_ppm * (self.duration_s - dt) / ramp
        return self.peak_ppm


@dataclass(frozen=True)
class FaultModel:
    dup_prob: float = 0.0
    loss_prob: float = 0.0
    reorder_prob: float = 0.0
    max_delay_s: float = 0.0


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    seed: int
    duration_s: float
    bins: tuple[SimBin, ...]
    report_interval_s: float = 60.0
    gas_events: tuple[GasEvent, ...] = ()
    faults: FaultModel = FaultModel()
    time_scale: float = 0.0  # real seconds per simulated second; 0 = flat out
    start_ts: datetime = DEFAULT_START_TS

    def __post_init__(self):
        ctx = f"scenario {self.name}"
        if self.duration_s <= 0:
            raise ScenarioError("INVALID", f"{ctx}: duration_s must be positive")
        if self.report_interval_s <= 0:
            raise ScenarioError("INVALID", f"{ctx}: report_interval_s must be positive")
        if self.time_scale < 0:
            raise ScenarioError("INVALID", f"{ctx}: time_scale must be >= 0")
        if not self.bins:
            raise ScenarioError("INVALID", f"{ctx}: bins must be nonempty")
        bin_ids = set()
        for i, b in enumerate(self.bins):
            if not 0.0 <= b.initial_fill <= 1.0:
                raise ScenarioError("INVALID", f"{ctx}: bins[{i}].initial_fill out of [0,1]")
            if b.fill_rate_per_hr < 0:
                raise ScenarioError("INVALID", f"{ctx}: bins[{i}].fill_rate_per_hr negative")
            if b.fill_jitter < 0:
                raise ScenarioError("INVALID", f"{ctx}: bins[{i}].fill_jitter negative")
            bin_ids.add(b.config.bin_id)
        for i, g in enumerate(self.gas_events):
            if g.bin_id not in bin_ids:
                raise ScenarioError("INVALID", f"{ctx}: gas_events[{i}].bin_id unknown")
            if g.duration_s <= 0 or g.peak_ppm < 0 or g.start_s < 0:
                raise ScenarioError("INVALID", f"{ctx}: gas_events[{i}] out of range")
        for name in ("dup_prob", "loss_prob", "reorder_prob"):
            p = getattr(self.faults, name)
            if not 0.0 <= p <= 1.0:
                raise ScenarioError("INVALID", f"{ctx}: faults.{name} out of [0,1]")
        if self.faults.max_delay_s < 0:
            raise ScenarioError("INVALID", f"{ctx}: faults.max_delay_s negative")


@dataclass
class SimStats:
    records_sent: int = 0
    acks_ok: int = 0
    acks_dup: int = 0
    acks_err: int = 0
    records_lost: int = 0
    final_fill: dict[str, float] = field(default_factory=dict)
    max_ack_lag_s: float = 0.0

    def check(self) -> None:
        assert self.records_sent == self.acks_ok + self.acks_err + self.records_lost, (
            f"sent {self.records_sent} != ok {self.acks_ok} + err {self.acks_err} "
            f"+ lost {self.records_lost}"
        )


@dataclass(frozen=True)
class Emission:
    """One scheduled wire delivery."""

    due_s: float
    sensor_id: str
    seq: int
    dup_rank: int  # 0 = original, 1 = duplicate copy
    line: bytes


def generate_emissions(scenario: ScenarioConfig) -> tuple[list[Emission], SimStats]:
    """Pure schedule generation: every delivery, pre-faulted, plus analytic stats."""
    stats = SimStats()
    emissions: list[Emission] = []
    for sim_bin in scenario.bins:
        config = sim_bin.config
        rng = Random(f"{scenario.seed}:{config.sensor_id}")
        fill = sim_bin.initial_fill
        seq = 0
        t = scenario.report_interval_s
        dt_hr = scenario.report_interval_s / 3600.0
        while t <= scenario.duration_s:
            fill += sim_bin.fill_rate_per_hr * dt_hr
            if sim_bin.fill_jitter > 0:
                fill += rng.gauss(0.0, sim_bin.fill_jitter)
            fill = min(1.0, max(0.0, fill))
            gas = sum(g.level_at(t) for g in scenario.gas_events if g.bin_id == config.bin_id)
            env = ReadingEnvelope(
                version=1,
                sensor_id=config.sensor_id,
                seq=seq,
                ts=scenario.start_ts + timedelta(seconds=t),
                distance_cm=fill_to_distance(fill, config),
                gas_ppm=gas,
                battery_pct=BATTERY_PCT,
            )
            line = encode_record(env)
            # All four fault draws happen for every record so streams with the
            # same seed stay aligned across fault settings.
            u_loss = rng.random()
            u_dup = rng.random()
            u_reorder = rng.random()
            u_delay = rng.random()
            stats.records_sent += 1
            if u_loss < scenario.faults.loss_prob:
                stats.records_lost += 1
            else:
                delay = (
                    u_delay * scenario.faults.max_delay_s
                    if u_reorder < scenario.faults.reorder_prob
                    else 0.0
                )
                emissions.append(Emission(t + delay, config.sensor_id, seq, 0, line))
                if u_dup < scenario.faults.dup_prob:
                    emissions.append(Emission(t + delay, config.sensor_id, seq, 1, line))
            seq += 1
            t += scenario.report_interval_s
        stats.final_fill[config.bin_id] = fill if seq > 0 else sim_bin.initial_fill
    emissions.sort(key=lambda e: (e.due_s, e.sensor_id, e.seq, e.dup_rank))
    return emissions, stats


# -- built-in scenarios -----------------------------------------------------------


def _demo_bin(i: int, fill: float, rate: float = 0.0, jitter: float = 0.0,
              zone: str = "z-demo", lat0: float = 21.4225, lon0: float = 39.8262) -> SimBin:
    return SimBin(
        config=BinConfig(
            bin_id=f"b-{i}",
            sensor_id=f"s-{i}",
            location=GeoPoint(lat0 + 0.003 * i, lon0 + 0.002 * i),
            zone_id=zone,
            depth_cm=100.0,
            full_offset_cm=10.0,
        ),
        initial_fill=fill,
        fill_rate_per_hr=rate,
        fill_jitter=jitter,
    )


def _fig4_levels() -> ScenarioConfig:
    # Three containers at the demo levels: empty, almost full, full.
    return ScenarioConfig(
        name="fig4_levels",
        seed=1,
        duration_s=2.0,
        report_interval_s=1.0,
        bins=(_demo_bin(1, 0.00), _demo_bin(2, 0.50), _demo_bin(3, 0.95)),
    )


def _gas_fire() -> ScenarioConfig:
    # One bin, gas ramping to 5x the default alarm level for 120 s.
    return ScenarioConfig(
        name="gas_fire",
        seed=2,
        duration_s=300.0,
        report_interval_s=10.0,
        bins=(_demo_bin(1, 0.30),),
        gas_events=(GasEvent(bin_id="b-1", start_s=60.0, duration_s=120.0, peak_ppm=1500.0),),
    )


def _hajj_day() -> ScenarioConfig:
    # 50 bins over one simulated day; mean fill rates equal 2 to 3 bin
    # volumes per day, so every bin would cross FULL repeatedly if collected.
    rng = Random("hajj_day-layout")
    bins = []
    for i in range(1, 51):
        bins.append(
            SimBin(
                config=BinConfig(
                    bin_id=f"b-{i}",
                    sensor_id=f"s-{i}",
                    location=GeoPoint(21.38 + rng.uniform(0, 0.08), 39.80 + rng.uniform(0, 0.08)),
                    zone_id=f"z-{(i - 1) % 5 + 1}",
                    depth_cm=100.0,
                    full_offset_cm=10.0,
                ),
                initial_fill=rng.uniform(0.0, 0.3),
                fill_rate_per_hr=rng.uniform(2.0 / 24.0, 3.0 / 24.0),
                fill_jitter=0.005,
            )
        )
    return ScenarioConfig(
        name="hajj_day",
        seed=3,
        duration_s=86400.0,
        report_interval_s=60.0,
        bins=tuple(bins),
    )


BUILTIN_SCENARIOS = {
    "fig4_levels": _fig4_levels,
    "gas_fire": _gas_fire,
    "hajj_day": _hajj_day,
}


def load_scenario(name_or_path: str, seed: int | None = None,
                  faults: FaultModel | None = None,
                  time_scale: float | None = None) -> ScenarioConfig:
    """Resolve a built-in scenario name or parse a scenario file."""
    if name_or_path in BUILTIN_SCENARIOS:
        scenario = BUILTIN_SCENARIOS[name_or_path]()
    else:
        path = Path(name_or_path)
        if not path.exists():
            raise ScenarioError(
                "INVALID",
                f"{name_or_path!r} is neither a built-in scenario "
                f"({', '.join(sorted(BUILTIN_SCENARIOS))}) nor a file",
            )
        scenario = parse_scenario_file(path)
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if faults is not None:
        overrides["faults"] = faults
    if time_scale is not None:
        overrides["time_scale"] = time_scale
    if overrides:
        from dataclasses import replace as dc_replace

        scenario = dc_replace(scenario, **overrides)
    return scenario


def parse_scenario_file(path: Path) -> ScenarioConfig:
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError("PARSE", f"{path}: {exc}") from exc

    def need(obj, key, where):
        if key not in obj:
            raise ScenarioError("INVALID", f"{where}.{key} missing")
        return obj[key]

    try:
        bins = []
        for i, b in enumerate(data.get("bins", [])):
            where = f"bins[{i}]"
            bins.append(
                SimBin(
                    config=BinConfig(
                        bin_id=need(b, "bin_id", where),
                        sensor_id=need(b, "sensor_id", where),
                        location=GeoPoint(need(b, "lat", where), need(b, "lon", where)),
                        zone_id=b.get("zone_id", ""),
                        depth_cm=need(b, "depth_cm", where),
                        full_offset_cm=need(b, "full_offset_cm", where),
                    ),
                    initial_fill=b.get("initial_fill", 0.0),
                    fill_rate_per_hr=b.get("fill_rate_per_hr", 0.0),
                    fill_jitter=b.get("fill_jitter", 0.0),
                )
            )
        gas_events = tuple(
            GasEvent(
                bin_id=need(g, "bin_id", f"gas_events[{i}]"),
                start_s=need(g, "start_s", f"gas_events[{i}]"),
                duration_s=need(g, "duration_s", f"gas_events[{i}]"),
                peak_ppm=need(g, "peak_ppm", f"gas_events[{i}]"),
            )
            for i, g in enumerate(data.get("gas_events", []))
        )
        fault_data = data.get("faults", {})
        return ScenarioConfig(
            name=data.get("name", path.stem),
            seed=data.get("seed", 0),
            duration_s=need(data, "duration_s", "scenario"),
            report_interval_s=data.get("report_interval_s", 60.0),
            bins=tuple(bins),
            gas_events=gas_events,
            faults=FaultModel(
                dup_prob=fault_data.get("dup_prob", 0.0),
                loss_prob=fault_data.get("loss_prob", 0.0),
                reorder_prob=fault_data.get("reorder_prob", 0.0),
                max_delay_s=fault_data.get("max_delay_s", 0.0),
            ),
            time_scale=data.get("time_scale", 0.0),
            start_ts=parse_ts(data["start_ts"]) if "start_ts" in data else DEFAULT_START_TS,
        )
    except ScenarioError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ScenarioError("INVALID", f"{path}: {exc}") from exc


# -- registration over the API -------------------------------------------------------


def register_scenario(scenario: ScenarioConfig, api_base: str, username: str, password: str) -> None:
    """Create the scenario's zones and sensor/bin registrations via the admin API."""
    import http.client

    host, _, port = api_base.partition(":")
    conn = http.client.HTTPConnection(host, int(port), timeout=30)

    def call(method, path, body=None, token=None):
        headers = {"Content-Type": "application/json"}
        if token:
            headers["Authorization"] = f"Bearer {token}"
        conn.request(method, path, body=json.dumps(body) if body is not None else None,
                     headers=headers)
        resp = conn.getresponse()
        data = resp.read()
        return resp.status, json.loads(data) if data else None

    try:
        status, session = call("POST", "/api/login",
                               {"username": username, "password": password})
        if status != 200:
            raise RuntimeError(f"admin login failed: {status}")
        token = session["token"]
        _, existing_zones = call("GET", "/api/zones", token=token)
        have_zones = {z["zone_id"] for z in existing_zones}
        for zone_id in sorted({b.config.zone_id for b in scenario.bins if b.config.zone_id}):
            if zone_id not in have_zones:
                call("POST", "/api/zones", {"zone_id": zone_id, "name": zone_id}, token=token)
        _, existing_sensors = call("GET", "/api/sensors", token=token)
        have_sensors = {s["sensor_id"] for s in existing_sensors}
        for b in scenario.bins:
            c = b.config
            payload = {
                "sensor_id": c.sensor_id,
                "bin_id": c.bin_id,
                "zone_id": c.zone_id,
                "lat": c.location.lat,
                "lon": c.location.lon,
                "depth_cm": c.depth_cm,
                "full_offset_cm": c.full_offset_cm,
            }
            if c.sensor_id in have_sensors:
                status, body = call("PUT", f"/api/sensors/{c.sensor_id}", payload, token=token)
            else:
                status, body = call("POST", "/api/sensors", payload, token=token)
            if status not in (200, 201):
                raise RuntimeError(f"sensor registration failed for {c.sensor_id}: {status} {body}")
    finally:
        conn.close()


# -- live traffic ---------------------------------------------------------------------


class _Connection:
    def __init__(self, host: str, port: int):
        self.host = host
        self.port = port
        self.sock: socket.socket | None = None
        self.in_buf = bytearray()
        self.outstanding: list[tuple[str, int, int, float, bytes]] = []  # FIFO
        self.connect()

    def connect(self) -> None:
        self.sock = socket.create_connection((self.host, self.port), timeout=30)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock.setblocking(True)

    def send_line(self, key: tuple[str, int, int], line: bytes) -> None:
        sent_at = time.monotonic()
        self.outstanding.append((key[0], key[1], key[2], sent_at, line))
        self.sock.sendall(line)

    def resend_outstanding(self) -> None:
        # At-least-once: after a reconnect, everything unacked goes out again.
        pending = list(self.outstanding)
        self.outstanding.clear()
        self.in_buf.clear()
        for sid, seq, dup_rank, _old, line in pending:
            self.send_line((sid, seq, dup_rank), line)


def run(
    scenario: ScenarioConfig,
    server: str,
    api: str | None = None,
    admin_user: str = "admin",
    admin_password: str = "admin",
    register: bool = True,
    max_connections: int = 64,
    drain_timeout_s: float = 60.0,
) -> SimStats:
    """Drive a scenario against a live ingestion server and wait for every ack.

    ``server`` and ``api`` are ``host:port`` strings. With ``register`` set the
    scenario's bins are first created through the admin API.
    """
    if register:
        if api is None:
            raise ValueError("register=True needs the api address")
        register_scenario(scenario, api, admin_user, admin_password)

    emissions, stats = generate_emissions(scenario)
    host, _, port_s = server.partition(":")
    port = int(port_s)

    sensor_ids = sorted({b.config.sensor_id for b in scenario.bins})
    n_conns = max(1, min(max_connections, len(sensor_ids)))
    conn_of_sensor = {sid: i % n_conns for i, sid in enumerate(sensor_ids)}
    conns = [_Connection(host, port) for i in range(n_conns)]

    sel = selectors.DefaultSelector()
    for i, c in enumerate(conns):
        c.sock.setblocking(False)
        sel.register(c.sock, selectors.EVENT_READ, i)

    first_ack: set[tuple[str, int]] = set()
    wall_start = time.monotonic()

    def pump_acks(timeout: float) -> None:
        for key, _events in sel.select(timeout=timeout):
            conn = conns[key.data]
            try:
                chunk = conn.sock.recv(65536)
            except (BlockingIOError, InterruptedError):
                continue
            except OSError:
                chunk = b""
            if not chunk:
                _reconnect(conn, key.data)
                continue
            conn.in_buf.extend(chunk)
            while True:
                nl = conn.in_buf.find(b"\n")
                if nl < 0:
                    break
                line = bytes(conn.in_buf[:nl])
                del conn.in_buf[: nl + 1]
                ack = parse_ack(line)
                sid, seq, _dup_rank, sent_at, _line = conn.outstanding.pop(0)
                lag = time.monotonic() - sent_at
                stats.max_ack_lag_s = max(stats.max_ack_lag_s, lag)
                if ack.dup:
                    stats.acks_dup += 1
                if (sid, seq) not in first_ack:
                    first_ack.add((sid, seq))
                    if ack.ok:
                        stats.acks_ok += 1
                    else:
                        stats.acks_err += 1
                        logger.warning("nack for %s/%s: %s", sid, seq, ack.err)

    def _reconnect(conn: _Connection, index: int) -> None:
        try:
            sel.unregister(conn.sock)
        except (KeyError, ValueError):
            pass
        try:
            conn.sock.close()
        except OSError:
            pass
        conn.connect()
        conn.resend_outstanding()
        conn.sock.setblocking(False)
        sel.register(conn.sock, selectors.EVENT_READ, index)

    try:
        for emission in emissions:
            if scenario.time_scale > 0:
                target = wall_start + emission.due_s * scenario.time_scale
                while True:
                    now = time.monotonic()
                    if now >= target:
                        break
                    pump_acks(min(target - now, 0.05))
            conn = conns[conn_of_sensor[emission.sensor_id]]
            conn.sock.setblocking(True)
            try:
                conn.send_line((emission.sensor_id, emission.seq, emission.dup_rank),
                               emission.line)
            except OSError:
                _reconnect(conn, conn_of_sensor[emission.sensor_id])
            finally:
                conn.sock.setblocking(False)
            pump_acks(0.0)

        deadline = time.monotonic() + drain_timeout_s
        while any(c.outstanding for c in conns):
            if time.monotonic() > deadline:
                missing = sum(len(c.outstanding) for c in conns)
                raise RuntimeError(f"{missing} records never acked within {drain_timeout_s}s")
            pump_acks(0.2)
    finally:
        sel.close()
        for c in conns:
            try:
                c.sock.close()
            except OSError:
                pass

    stats.check()
    return stats
