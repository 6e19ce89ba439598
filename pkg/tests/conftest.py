import socket
from datetime import datetime, timedelta, timezone

import pytest

from tuhr.model import BinConfig, BinRecord, GeoPoint, Thresholds, WorkerProfile

ADMIN_CREDS = {"username": "admin", "password": "admin-pw", "role": "ADMIN"}
WORKER_CREDS = {
    "username": "w-1", "password": "worker-pw", "role": "WORKER",
    "name": "Worker One", "lat": 21.42, "lon": 39.82, "capacity": 5,
}

T0 = datetime(2025, 6, 1, 10, 0, 0, tzinfo=timezone.utc)


def at(seconds: float) -> datetime:
    return T0 + timedelta(seconds=seconds)


def make_config(bin_id="b-1", sensor_id="s-1", lat=21.4225, lon=39.8262,
                zone_id="z-1", depth_cm=100.0, full_offset_cm=10.0) -> BinConfig:
    return BinConfig(
        bin_id=bin_id,
        sensor_id=sensor_id,
        location=GeoPoint(lat, lon),
        zone_id=zone_id,
        depth_cm=depth_cm,
        full_offset_cm=full_offset_cm,
    )


def make_bin(fill=0.0, state=None, **kwargs) -> BinRecord:
    from tuhr.model import BinState, classify_fill

    config = make_config(**kwargs)
    if state is None:
        state = classify_fill(fill, BinState.EMPTY, Thresholds())
    return BinRecord(config=config, fill=fill, state=state)


def make_worker(worker_id="w-1", lat=21.42, lon=39.82, capacity=5) -> WorkerProfile:
    return WorkerProfile(
        worker_id=worker_id,
        name=worker_id,
        start_location=GeoPoint(lat, lon),
        capacity=capacity,
    )


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture
def thresholds() -> Thresholds:
    return Thresholds()


class Harness:
    """In-process server stack: store + telemetry listener + API."""

    def __init__(self, data_dir, thresholds=None, auto_plan=False,
                 users=(ADMIN_CREDS, WORKER_CREDS)):
        from tuhr.api import ApiServer
        from tuhr.store import Store
        from tuhr.telemetry import TelemetryServer

        self.store = Store(data_dir, thresholds=thresholds, auto_plan=auto_plan)
        self.telemetry = TelemetryServer("127.0.0.1", 0, self.store.submit_reading)
        self.api = ApiServer(self.store, port=0)
        self.api.auth.seed_users(list(users))
        self.telemetry.start()
        self.api.start()

    @property
    def telemetry_addr(self) -> str:
        return f"127.0.0.1:{self.telemetry.port}"

    @property
    def api_addr(self) -> str:
        return f"127.0.0.1:{self.api.port}"

    def close(self):
        self.telemetry.stop()
        self.api.stop()
        self.store.close()


@pytest.fixture
def harness(tmp_path):
    h = Harness(tmp_path / "data")
    yield h
    h.close()
