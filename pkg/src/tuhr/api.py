"""Operations HTTP API: login, live views, worker actions, admin CRUD, event stream.

Plain HTTP/1.1 with JSON bodies under /api, plus a server-sent event stream at
/api/events carrying ``bin_state``, ``alert`` and ``plan`` events. Every SSE
message's id is the store offset, so clients resume with Last-Event-ID and
receive exactly the events they missed.

Role model: ADMIN can do everything; WORKER gets bin reads, alerts, the plan,
the empty action, the event stream and their own profile (name/password).
"""

from __future__ import annotations

import hashlib
import hmac
import json
import logging
import mimetypes
import queue
import re
import secrets
import threading
import time
import urllib.parse
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .model import BinConfig, GeoPoint, StaleTimestampError, Zone, parse_ts, utc_now
from .store import DuplicateIdError, Store

logger = logging.getLogger("tuhr.api")

PBKDF2_ITERATIONS = 20000
DEFAULT_TOKEN_TTL_S = 8 * 3600

READS_DEFAULT_LIMIT = 100
READS_MAX_LIMIT = 1000

SSE_EVENT_NAMES = {
    "READING_ACCEPTED": "bin_state",
    "BIN_EMPTIED": "bin_state",
    "ALERT_RAISED": "alert",
    "ALERT_RESOLVED": "alert",
    "PLAN_CREATED": "plan",
}


def hash_password(password: str, iterations: int = PBKDF2_ITERATIONS) -> dict:
    salt = secrets.token_bytes(16)
    digest = hashlib.pbkdf2_hmac("sha256", password.encode(), salt, iterations)
    return {"salt": salt.hex(), "hash": digest.hex(), "iter": iterations}


def verify_password(pw: dict, password: str) -> bool:
    digest = hashlib.pbkdf2_hmac(
        "sha256", password.encode(), bytes.fromhex(pw["salt"]), pw["iter"]
    )
    return hmac.compare_digest(digest.hex(), pw["hash"])


class AuthService:
    """Session tokens over the store's user registry. Tokens live in memory only."""

    def __init__(self, store: Store, token_ttl_s: float = DEFAULT_TOKEN_TTL_S):
        self.store = store
        self.token_ttl_s = token_ttl_s
        self._sessions: dict[str, dict] = {}
        self._lock = threading.Lock()
        # Burned once so unknown-user logins cost the same as wrong-password ones.
        self._decoy = hash_password("decoy")

    def login(self, username: str, password: str) -> dict | None:
        user = self.store.get_user(username)
        if user is None or "pw" not in user:
            verify_password(self._decoy, password)
            return None
        if not verify_password(user["pw"], password):
            return None
        token = secrets.token_hex(16)  # 128 bits
        with self._lock:
            self._sessions[token] = {
                "username": username,
                "role": user["role"],
                "expires": time.monotonic() + self.token_ttl_s,
            }
        return {"token": token, "username": username, "role": user["role"]}

    def resolve(self, token: str | None) -> dict | None:
        if not token:
            return None
        with self._lock:
            session = self._sessions.get(token)
            if session is None:
                return None
            now = time.monotonic()
            if session["expires"] < now:
                del self._sessions[token]
                return None
            session["expires"] = now + self.token_ttl_s  # idle expiry
            # The role may have been changed by an admin since login.
            user = self.store.get_user(session["username"])
            if user is None:
                del self._sessions[token]
                return None
            return {"username": session["username"], "role": user["role"]}

    def seed_users(self, entries: list[dict]) -> int:
        """Create users from a credentials file; existing usernames are kept."""
        created = 0
        for entry in entries:
            if self.store.get_user(entry["username"]) is not None:
                continue
            record = build_user_record(entry, entry["password"])
            self.store.upsert_user(record, must_be_new=True)
            created += 1
        return created


def build_user_record(payload: dict, password: str | None, existing: dict | None = None) -> dict:
    username = payload.get("username") or (existing or {}).get("username")
    if not username or not isinstance(username, str):
        raise ValueError("username required")
    role = payload.get("role", (existing or {}).get("role", "WORKER"))
    if role not in ("WORKER", "ADMIN"):
        raise ValueError(f"role must be WORKER or ADMIN, got {role!r}")
    record = {
        "username": username,
        "role": role,
        "name": payload.get("name", (existing or {}).get("name", username)),
    }
    if password is not None:
        if not isinstance(password, str) or not password:
            raise ValueError("password must be a nonempty string")
        record["pw"] = hash_password(password)
    elif existing and "pw" in existing:
        record["pw"] = existing["pw"]
    else:
        raise ValueError("password required")

    lat = payload.get("lat", (existing or {}).get("lat"))
    lon = payload.get("lon", (existing or {}).get("lon"))
    if (lat is None) != (lon is None):
        raise ValueError("lat and lon must be given together")
    if lat is not None:
        GeoPoint(float(lat), float(lon))  # range check
        record["lat"] = float(lat)
        record["lon"] = float(lon)
    capacity = payload.get("capacity", (existing or {}).get("capacity"))
    if capacity is not None:
        if not isinstance(capacity, int) or isinstance(capacity, bool) or capacity < 1:
            raise ValueError("capacity must be an integer >= 1")
        record["capacity"] = capacity
    return record


def public_user_view(user: dict) -> dict:
    return {k: v for k, v in user.items() if k != "pw"}


class HttpError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


# (method, path regex, required role, handler name)
ROUTES = [
    ("POST", r"^/api/login$", None, "h_login"),
    ("GET", r"^/api/health$", None, "h_health"),
    ("GET", r"^/api/bins$", "WORKER", "h_list_bins"),
    ("GET", r"^/api/bins/([^/]+)$", "WORKER", "h_get_bin"),
    ("POST", r"^/api/bins/([^/]+)/empty$", "WORKER", "h_empty_bin"),
    ("GET", r"^/api/reads$", "WORKER", "h_reads"),
    ("GET", r"^/api/alerts$", "WORKER", "h_alerts"),
    ("GET", r"^/api/plan$", "WORKER", "h_get_plan"),
    ("POST", r"^/api/plan/recompute$", "ADMIN", "h_recompute_plan"),
    ("GET", r"^/api/events$", "WORKER", "h_events"),
    ("GET", r"^/api/zones$", "ADMIN", "h_list_zones"),
    ("POST", r"^/api/zones$", "ADMIN", "h_create_zone"),
    ("GET", r"^/api/zones/([^/]+)$", "ADMIN", "h_get_zone"),
    ("PUT", r"^/api/zones/([^/]+)$", "ADMIN", "h_put_zone"),
    ("DELETE", r"^/api/zones/([^/]+)$", "ADMIN", "h_delete_zone"),
    ("GET", r"^/api/sensors$", "ADMIN", "h_list_sensors"),
    ("POST", r"^/api/sensors$", "ADMIN", "h_create_sensor"),
    ("GET", r"^/api/sensors/([^/]+)$", "ADMIN", "h_get_sensor"),
    ("PUT", r"^/api/sensors/([^/]+)$", "ADMIN", "h_put_sensor"),
    ("DELETE", r"^/api/sensors/([^/]+)$", "ADMIN", "h_delete_sensor"),
    ("GET", r"^/api/users$", "ADMIN", "h_list_users"),
    ("POST", r"^/api/users$", "ADMIN", "h_create_user"),
    ("GET", r"^/api/users/([^/]+)$", "ADMIN", "h_get_user"),
    ("PUT", r"^/api/users/([^/]+)$", "SELF_OR_ADMIN", "h_put_user"),
    ("DELETE", r"^/api/users/([^/]+)$", "ADMIN", "h_delete_user"),
]

_COMPILED = [(m, re.compile(p), role, name) for m, p, role, name in ROUTES]


class ApiHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "tuhr"

    # -- plumbing -------------------------------------------------------------

    def log_message(self, fmt, *args):
        logger.debug("%s %s", self.address_string(), fmt % args)

    @property
    def app(self) -> "ApiServer":
        return self.server.app

    def _dispatch(self, method: str) -> None:
        parsed = urllib.parse.urlsplit(self.path)
        path = parsed.path
        self.query = urllib.parse.parse_qs(parsed.query)
        self._body_read = False
        try:
            for m, pattern, role, name in _COMPILED:
                if m != method:
                    continue
                match = pattern.match(path)
                if match is None:
                    continue
                principal = self._authorize(role, match)
                getattr(self, name)(match, principal)
                return
            if method == "GET" and self._serve_static(path):
                return
            raise HttpError(404, "not found")
        except HttpError as err:
            self._send_json(err.status, {"error": err.message})
        except (BrokenPipeError, ConnectionResetError):
            pass
        except Exception:
            logger.exception("unhandled error on %s %s", method, path)
            try:
                self._send_json(500, {"error": "internal error"})
            except (BrokenPipeError, ConnectionResetError, OSError):
                pass

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    def do_PUT(self):
        self._dispatch("PUT")

    def do_DELETE(self):
        self._dispatch("DELETE")

    def _authorize(self, required: str | None, match) -> dict | None:
        if required is None:
            return None
        header = self.headers.get("Authorization", "")
        token = header[7:] if header.startswith("Bearer ") else None
        principal = self.app.auth.resolve(token)
        if principal is None:
            raise HttpError(401, "authentication required")
        if principal["role"] == "ADMIN":
            return principal
        if required == "ADMIN":
            raise HttpError(403, "admin role required")
        if required == "SELF_OR_ADMIN" and match.group(1) != principal["username"]:
            raise HttpError(403, "admin role required")
        return principal

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        self._body_read = True
        if length == 0:
            return {}
        raw = self.rfile.read(length)
        try:
            body = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise HttpError(400, f"malformed JSON body: {exc}") from exc
        if not isinstance(body, dict):
            raise HttpError(400, "body must be a JSON object")
        return body

    def _drain_body(self) -> None:
        # An unread body (e.g. a 403 before the handler ran) would be parsed
        # as the next request line on this keep-alive connection.
        if getattr(self, "_body_read", True):
            return
        length = int(self.headers.get("Content-Length") or 0)
        if length:
            self.rfile.read(length)
        self._body_read = True

    def _send_json(self, status: int, obj) -> None:
        self._drain_body()
        blob = json.dumps(obj).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(blob)))
        self.end_headers()
        self.wfile.write(blob)

    def _query_one(self, key: str) -> str | None:
        values = self.query.get(key)
        return values[0] if values else None

    # -- handlers ----------------------------------------------------------------

    def h_health(self, match, principal):
        self._send_json(
            200,
            {
                "status": "ok",
                "offset": self.app.store.state.last_offset,
                "state_hash": self.app.store.state_hash(),
            },
        )

    def h_login(self, match, principal):
        body = self._read_body()
        username = body.get("username")
        password = body.get("password")
        if not isinstance(username, str) or not isinstance(password, str):
            raise HttpError(400, "username and password required")
        session = self.app.auth.login(username, password)
        if session is None:
            # One response for unknown user and wrong password.
            raise HttpError(401, "invalid credentials")
        self._send_json(200, session)

    def h_list_bins(self, match, principal):
        self._send_json(200, self.app.store.list_bins())

    def h_get_bin(self, match, principal):
        view = self.app.store.get_bin(match.group(1))
        if view is None:
            raise HttpError(404, f"unknown bin {match.group(1)}")
        self._send_json(200, view)

    def h_empty_bin(self, match, principal):
        body = self._read_body()
        ts = None
        if "ts" in body:
            try:
                ts = parse_ts(body["ts"])
            except (ValueError, TypeError) as exc:
                raise HttpError(422, f"invalid ts: {exc}") from exc
        try:
            self.app.store.empty_bin(match.group(1), ts)
        except KeyError:
            raise HttpError(404, f"unknown bin {match.group(1)}") from None
        except StaleTimestampError as exc:
            raise HttpError(409, str(exc)) from None
        self._send_json(200, self.app.store.get_bin(match.group(1)))

    def h_reads(self, match, principal):
        since = None
        if self._query_one("since"):
            try:
                since = parse_ts(self._query_one("since"))
            except ValueError as exc:
                raise HttpError(422, f"invalid since: {exc}") from exc
        limit = READS_DEFAULT_LIMIT
        if self._query_one("limit"):
            try:
                limit = int(self._query_one("limit"))
            except ValueError:
                raise HttpError(422, "limit must be an integer") from None
            if limit < 1:
                raise HttpError(422, "limit must be >= 1")
            limit = min(limit, READS_MAX_LIMIT)
        reads = self.app.store.list_reads(
            sensor=self._query_one("sensor"),
            bin_id=self._query_one("bin"),
            since=since,
            limit=limit,
        )
        self._send_json(200, reads)

    def h_alerts(self, match, principal):
        active = self._query_one("active")
        if active is not None:
            if active not in ("true", "false"):
                raise HttpError(422, "active must be true or false")
            active = active == "true"
        self._send_json(200, self.app.store.list_alerts(active=active))

    def h_get_plan(self, match, principal):
        self._send_json(200, self.app.store.get_plan())

    def h_recompute_plan(self, match, principal):
        self._send_json(200, self.app.store.create_plan(created_ts=utc_now()))

    # -- zones ---------------------------------------------------------------------

    def _zone_from_body(self, body: dict, zone_id: str | None = None) -> Zone:
        try:
            return Zone(
                zone_id=zone_id or body.get("zone_id", ""),
                name=body.get("name", zone_id or body.get("zone_id", "")),
                description=body.get("description", ""),
            )
        except (ValueError, TypeError) as exc:
            raise HttpError(422, str(exc)) from exc

    def h_list_zones(self, match, principal):
        self._send_json(200, self.app.store.list_zones())

    def h_create_zone(self, match, principal):
        zone = self._zone_from_body(self._read_body())
        try:
            self.app.store.upsert_zone(zone, must_be_new=True)
        except DuplicateIdError as exc:
            raise HttpError(422, str(exc)) from None
        self._send_json(201, {"zone_id": zone.zone_id})

    def h_get_zone(self, match, principal):
        for zone in self.app.store.list_zones():
            if zone["zone_id"] == match.group(1):
                self._send_json(200, zone)
                return
        raise HttpError(404, f"unknown zone {match.group(1)}")

    def h_put_zone(self, match, principal):
        zone = self._zone_from_body(self._read_body(), zone_id=match.group(1))
        self.app.store.upsert_zone(zone)
        self._send_json(200, {"zone_id": zone.zone_id})

    def h_delete_zone(self, match, principal):
        try:
            self.app.store.delete_zone(match.group(1))
        except KeyError:
            raise HttpError(404, f"unknown zone {match.group(1)}") from None
        self._send_json(200, {"deleted": match.group(1)})

    # -- sensors (bin registration) ---------------------------------------------------

    def _sensor_from_body(self, body: dict, sensor_id: str | None = None) -> BinConfig:
        try:
            return BinConfig(
                bin_id=body["bin_id"],
                sensor_id=sensor_id or body["sensor_id"],
                location=GeoPoint(float(body["lat"]), float(body["lon"])),
                zone_id=body.get("zone_id", ""),
                depth_cm=float(body["depth_cm"]),
                full_offset_cm=float(body["full_offset_cm"]),
            )
        except KeyError as exc:
            raise HttpError(422, f"missing field {exc.args[0]}") from None
        except (ValueError, TypeError) as exc:
            raise HttpError(422, str(exc)) from exc

    def h_list_sensors(self, match, principal):
        self._send_json(200, self.app.store.list_sensors())

    def h_create_sensor(self, match, principal):
        config = self._sensor_from_body(self._read_body())
        try:
            self.app.store.register_sensor(config, must_be_new=True)
        except DuplicateIdError as exc:
            raise HttpError(422, str(exc)) from None
        self._send_json(201, {"sensor_id": config.sensor_id, "bin_id": config.bin_id})

    def h_get_sensor(self, match, principal):
        for sensor in self.app.store.list_sensors():
            if sensor["sensor_id"] == match.group(1):
                self._send_json(200, sensor)
                return
        raise HttpError(404, f"unknown sensor {match.group(1)}")

    def h_put_sensor(self, match, principal):
        config = self._sensor_from_body(self._read_body(), sensor_id=match.group(1))
        try:
            self.app.store.register_sensor(config)
        except DuplicateIdError as exc:
            raise HttpError(422, str(exc)) from None
        self._send_json(200, {"sensor_id": config.sensor_id, "bin_id": config.bin_id})

    def h_delete_sensor(self, match, principal):
        try:
            self.app.store.delete_sensor(match.group(1))
        except KeyError:
            raise HttpError(404, f"unknown sensor {match.group(1)}") from None
        self._send_json(200, {"deleted": match.group(1)})

    # -- users ------------------------------------------------------------------------

    def h_list_users(self, match, principal):
        self._send_json(200, [public_user_view(u) for u in self.app.store.list_users()])

    def h_create_user(self, match, principal):
        body = self._read_body()
        try:
            record = build_user_record(body, body.get("password"))
            self.app.store.upsert_user(record, must_be_new=True)
        except DuplicateIdError as exc:
            raise HttpError(422, str(exc)) from None
        except ValueError as exc:
            raise HttpError(422, str(exc)) from exc
        self._send_json(201, public_user_view(record))

    def h_get_user(self, match, principal):
        user = self.app.store.get_user(match.group(1))
        if user is None:
            raise HttpError(404, f"unknown user {match.group(1)}")
        self._send_json(200, public_user_view(user))

    def h_put_user(self, match, principal):
        username = match.group(1)
        existing = self.app.store.get_user(username)
        if existing is None:
            raise HttpError(404, f"unknown user {username}")
        body = self._read_body()
        if principal["role"] != "ADMIN":
            # Profile self-service covers display name and password only.
            forbidden = set(body) - {"name", "password"}
            if forbidden:
                raise HttpError(403, f"cannot change {sorted(forbidden)}")
        body["username"] = username
        try:
            record = build_user_record(body, body.get("password"), existing=existing)
            self.app.store.upsert_user(record)
        except ValueError as exc:
            raise HttpError(422, str(exc)) from exc
        self._send_json(200, public_user_view(record))

    def h_delete_user(self, match, principal):
        try:
            self.app.store.delete_user(match.group(1))
        except KeyError:
            raise HttpError(404, f"unknown user {match.group(1)}") from None
        self._send_json(200, {"deleted": match.group(1)})

    # -- event stream --------------------------------------------------------------------

    def h_events(self, match, principal):
        last_id = self.headers.get("Last-Event-ID") or self._query_one("last_event_id")
        after = None
        if last_id is not None:
            try:
                after = int(last_id)
            except ValueError:
                raise HttpError(422, "Last-Event-ID must be an integer offset") from None
        q, backlog = self.app.store.subscribe_with_backlog(after_offset=after)
        self.send_response(200)
        self.send_header("Content-Type", "text/event-stream")
        self.send_header("Cache-Control", "no-cache")
        self.send_header("Connection", "close")
        self.end_headers()
        try:
            for rec in backlog:
                self._write_sse(rec)
            self.wfile.flush()
            while not self.app.stopping:
                try:
                    rec = q.get(timeout=5.0)
                except queue.Empty:
                    self.wfile.write(b": keepalive\n\n")
                    self.wfile.flush()
                    continue
                if rec is None:
                    break  # dropped as a slow consumer; client resumes with Last-Event-ID
                self._write_sse(rec)
                self.wfile.flush()
        except (BrokenPipeError, ConnectionResetError, OSError):
            pass
        finally:
            self.app.store.unsubscribe(q)

    def _write_sse(self, rec) -> None:
        name = SSE_EVENT_NAMES.get(rec.kind)
        if name is None:
            return
        data = json.dumps(rec.to_wire())
        self.wfile.write(f"id: {rec.offset}\nevent: {name}\ndata: {data}\n\n".encode())

    # -- static dashboard bundle ------------------------------------------------------------

    def _serve_static(self, path: str) -> bool:
        root = self.app.static_dir
        if root is None:
            return False
        rel = path.lstrip("/") or "index.html"
        target = (root / rel).resolve()
        if not str(target).startswith(str(root.resolve())) or not target.is_file():
            if path == "/" or ("." not in rel):
                target = root / "index.html"  # SPA fallback for client-side routes
                if not target.is_file():
                    return False
            else:
                return False
        blob = target.read_bytes()
        ctype = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(blob)))
        self.end_headers()
        self.wfile.write(blob)
        return True


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True


class ApiServer:
    def __init__(
        self,
        store: Store,
        host: str = "127.0.0.1",
        port: int = 8080,
        token_ttl_s: float = DEFAULT_TOKEN_TTL_S,
        static_dir: str | Path | None = None,
    ):
        self.store = store
        self.auth = AuthService(store, token_ttl_s=token_ttl_s)
        self.static_dir = Path(static_dir) if static_dir else None
        self.stopping = False
        self._httpd = _Server((host, port), ApiHandler)
        self._httpd.app = self
        self.port = self._httpd.server_address[1]
        self._thread: threading.Thread | None = None

    def start(self) -> None:
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, kwargs={"poll_interval": 0.1},
            name="api", daemon=True,
        )
        self._thread.start()

    def stop(self) -> None:
        self.stopping = True
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
