"""Operator command line: serve, simulate, plan, replay, report.

Configuration precedence: flags > environment (``TUHR_`` prefix) > config file
(``--config``, JSON) > defaults. Every command is scriptable: stable exit codes
(0 ok, 1 error, 2 usage) and a ``--format records`` mode printing one
``key=value`` line per fact.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
from pathlib import Path

from . import simulator
from .api import ApiServer
from .dispatch import plan_dispatch
from .model import BinState, Thresholds, format_ts, utc_now
from .store import LOG_FILENAME, Store, recover_state, replay_log
from .telemetry import TelemetryServer

DEFAULT_TELEMETRY_PORT = 7070
DEFAULT_API_PORT = 8080
DEFAULT_OFFLINE_TIMEOUT_S = 180.0
DEFAULT_SCAN_INTERVAL_S = 10.0

ENV = {
    "data_dir": "TUHR_DATA_DIR",
    "telemetry_port": "TUHR_TELEMETRY_PORT",
    "api_port": "TUHR_API_PORT",
    "credentials_file": "TUHR_CREDENTIALS_FILE",
    "log_level": "TUHR_LOG_LEVEL",
    "static_dir": "TUHR_STATIC_DIR",
    "admin_user": "TUHR_ADMIN_USER",
    "admin_password": "TUHR_ADMIN_PASSWORD",
}


def resolve(key: str, flag_value, file_config: dict, default, cast=None):
    """flags > env > config file > default."""
    if flag_value is not None:
        return flag_value
    env_name = ENV.get(key)
    if env_name and os.environ.get(env_name) not in (None, ""):
        raw = os.environ[env_name]
        return cast(raw) if cast else raw
    if key in file_config:
        raw = file_config[key]
        return cast(raw) if cast else raw
    return default


def load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        config = json.load(fh)
    if not isinstance(config, dict):
        raise ValueError("config file must hold a JSON object")
    return config


def thresholds_from(args, file_config: dict) -> Thresholds:
    section = file_config.get("thresholds", {})
    defaults = Thresholds()
    return Thresholds(
        empty_below=args.empty_below if args.empty_below is not None
        else section.get("empty_below", defaults.empty_below),
        almost_full_at=args.almost_full_at if args.almost_full_at is not None
        else section.get("almost_full_at", defaults.almost_full_at),
        full_at=args.full_at if args.full_at is not None
        else section.get("full_at", defaults.full_at),
        hysteresis=args.hysteresis if args.hysteresis is not None
        else section.get("hysteresis", defaults.hysteresis),
        gas_alert_ppm=args.gas_alert_ppm if args.gas_alert_ppm is not None
        else section.get("gas_alert_ppm", defaults.gas_alert_ppm),
    )


def fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


# -- serve ---------------------------------------------------------------------


def cmd_serve(args) -> int:
    file_config = load_config_file(args.config)
    data_dir = resolve("data_dir", args.data_dir, file_config, "./data")
    telemetry_port = resolve("telemetry_port", args.telemetry_port, file_config,
                             DEFAULT_TELEMETRY_PORT, int)
    api_port = resolve("api_port", args.api_port, file_config, DEFAULT_API_PORT, int)
    credentials_file = resolve("credentials_file", args.credentials_file, file_config, None)
    log_level = resolve("log_level", args.log_level, file_config, "INFO")
    static_dir = resolve("static_dir", args.static_dir, file_config, None)
    offline_timeout = resolve("offline_timeout_s", args.offline_timeout, file_config,
                              DEFAULT_OFFLINE_TIMEOUT_S, float)
    scan_interval = resolve("scan_interval_s", args.scan_interval, file_config,
                            DEFAULT_SCAN_INTERVAL_S, float)
    logging.basicConfig(level=getattr(logging, str(log_level).upper(), logging.INFO),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if telemetry_port == api_port:
        return fail(f"telemetry and api ports must differ (both {api_port})")

    try:
        thresholds = thresholds_from(args, file_config)
    except ValueError as exc:
        return fail(f"invalid thresholds: {exc}")

    store = Store(data_dir, thresholds=thresholds, fsync=args.fsync,
                  auto_plan=not args.no_auto_plan)
    telemetry = None
    api = None
    try:
        try:
            telemetry = TelemetryServer(args.host, telemetry_port, store.submit_reading)
        except OSError as exc:
            return fail(f"cannot bind telemetry port {telemetry_port}: {exc}")
        try:
            api = ApiServer(store, host=args.host, port=api_port,
                            token_ttl_s=args.token_ttl, static_dir=static_dir)
        except OSError as exc:
            return fail(f"cannot bind api port {api_port}: {exc}")

        if credentials_file:
            with open(credentials_file, encoding="utf-8") as fh:
                created = api.auth.seed_users(json.load(fh))
            if created:
                print(f"seeded {created} user(s) from {credentials_file}")

        telemetry.start()
        api.start()

        stop = threading.Event()

        def handle_signal(_signum, _frame):
            stop.set()

        signal.signal(signal.SIGINT, handle_signal)
        signal.signal(signal.SIGTERM, handle_signal)

        scanner = None
        if offline_timeout > 0:
            def scan_loop():
                while not stop.wait(scan_interval):
                    store.run_offline_scan(utc_now(), offline_timeout)

            scanner = threading.Thread(target=scan_loop, name="offline-scan", daemon=True)
            scanner.start()

        recovered = store.recovered_offset if store.recovered_offset >= 0 else "none"
        print(
            f"tuhr serve: data_dir={data_dir} recovered_offset={recovered} "
            f"telemetry=:{telemetry.port} api=:{api.port}",
            flush=True,
        )
        stop.wait()
        print("tuhr serve: shutting down", flush=True)
        return 0
    finally:
        if telemetry is not None:
            telemetry.stop()
        if api is not None:
            api.stop()
        store.close()


# -- simulate -------------------------------------------------------------------


def cmd_simulate(args) -> int:
    file_config = load_config_file(args.config)
    admin_user = resolve("admin_user", args.admin_user, file_config, "admin")
    admin_password = resolve("admin_password", args.admin_password, file_config, "admin")
    faults = None
    if any(v is not None for v in (args.dup_prob, args.loss_prob, args.reorder_prob,
                                   args.max_delay)):
        faults = simulator.FaultModel(
            dup_prob=args.dup_prob or 0.0,
            loss_prob=args.loss_prob or 0.0,
            reorder_prob=args.reorder_prob or 0.0,
            max_delay_s=args.max_delay or 0.0,
        )
    try:
        scenario = simulator.load_scenario(args.scenario, seed=args.seed, faults=faults,
                                           time_scale=args.time_scale)
    except simulator.ScenarioError as exc:
        return fail(str(exc))
    try:
        stats = simulator.run(
            scenario,
            server=args.server,
            api=args.api,
            admin_user=admin_user,
            admin_password=admin_password,
            register=not args.no_register,
            max_connections=args.max_connections,
        )
    except (ConnectionRefusedError, RuntimeError, ValueError, OSError) as exc:
        return fail(f"simulation failed: {exc}")

    if args.format == "records":
        print(f"sim scenario={scenario.name} seed={scenario.seed} "
              f"sent={stats.records_sent} ok={stats.acks_ok} dup={stats.acks_dup} "
              f"err={stats.acks_err} lost={stats.records_lost} "
              f"max_ack_lag_s={stats.max_ack_lag_s:.3f}")
        for bin_id in sorted(stats.final_fill):
            print(f"sim_fill bin={bin_id} fill={stats.final_fill[bin_id]:.6f}")
    else:
        print(f"scenario {scenario.name} (seed {scenario.seed}): "
              f"{stats.records_sent} sent, {stats.acks_ok} ok, {stats.acks_dup} dup-acked, "
              f"{stats.acks_err} rejected, {stats.records_lost} lost, "
              f"max ack lag {stats.max_ack_lag_s * 1000:.0f} ms")
    return 0


# -- plan / replay / report --------------------------------------------------------


def cmd_plan(args) -> int:
    data_dir = resolve("data_dir", args.data_dir, load_config_file(args.config), "./data")
    if not Path(data_dir).exists():
        return fail(f"no data directory at {data_dir}")
    state = recover_state(data_dir)
    plan = plan_dispatch(list(state.bins.values()), state.worker_profiles(), utc_now())
    if args.format == "records":
        print(f"plan id={plan.plan_id} routes={len(plan.routes)} "
              f"unassigned={len(plan.unassigned)}")
        for route in plan.routes:
            stops = ",".join(route.stops)
            print(f"route worker={route.worker_id} stops={stops} length_m={route.length_m:.1f}")
    else:
        print(f"{len(plan.routes)} routes")
        for route in plan.routes:
            path = " -> ".join(route.stops)
            print(f"  {route.worker_id}: {path} ({route.length_m / 1000:.2f} km)")
        if plan.unassigned:
            print(f"  unassigned (capacity exhausted): {', '.join(plan.unassigned)}")
    return 0


def cmd_replay(args) -> int:
    data_dir = Path(resolve("data_dir", args.data_dir, load_config_file(args.config), "./data"))
    log_path = data_dir / LOG_FILENAME
    if not log_path.exists():
        return fail(f"no event log at {log_path}")
    first = replay_log(log_path)
    second = replay_log(log_path)
    h1, h2 = first.core_hash(), second.core_hash()
    if h1 != h2:
        return fail(f"replay is not deterministic: {h1} != {h2}")
    if args.format == "records":
        print(f"replay offset={first.last_offset} hash={h1}")
    else:
        print(f"replayed {first.last_offset + 1} events, state hash {h1}")
    return 0


def cmd_report(args) -> int:
    data_dir = resolve("data_dir", args.data_dir, load_config_file(args.config), "./data")
    if not Path(data_dir).exists():
        return fail(f"no data directory at {data_dir}")
    state = recover_state(data_dir)

    zone_counts: dict[str, dict[str, int]] = {}
    for rec in state.bins.values():
        zone = rec.config.zone_id or "(none)"
        counts = zone_counts.setdefault(zone, {s.name: 0 for s in BinState})
        counts[rec.state.name] += 1
    open_alerts: dict[str, int] = {}
    for aid in state.open_alert_ids.values():
        kind = state.alerts[aid].kind
        open_alerts[kind] = open_alerts.get(kind, 0) + 1
    plan = state.plan

    if args.format == "records":
        for zone in sorted(zone_counts):
            c = zone_counts[zone]
            print(f"zone id={zone} empty={c['EMPTY']} partial={c['PARTIAL']} "
                  f"almost_full={c['ALMOST_FULL']} full={c['FULL']}")
        for kind in sorted(open_alerts):
            print(f"alerts_open kind={kind} count={open_alerts[kind]}")
        if plan:
            stops = sum(len(r["stops"]) for r in plan["routes"])
            print(f"plan id={plan['plan_id']} routes={len(plan['routes'])} stops={stops} "
                  f"stale={str(state.plan_stale).lower()}")
        else:
            print("plan id=none routes=0 stops=0 stale=false")
        print(f"state offset={state.last_offset} hash={state.core_hash()}")
    else:
        header = f"{'zone':<12}{'EMPTY':>8}{'PARTIAL':>9}{'ALMOST_FULL':>13}{'FULL':>6}"
        print(header)
        print("-" * len(header))
        for zone in sorted(zone_counts):
            c = zone_counts[zone]
            print(f"{zone:<12}{c['EMPTY']:>8}{c['PARTIAL']:>9}{c['ALMOST_FULL']:>13}{c['FULL']:>6}")
        if not zone_counts:
            print("(no bins registered)")
        print()
        if open_alerts:
            summary = ", ".join(f"{k}: {v}" for k, v in sorted(open_alerts.items()))
            print(f"open alerts: {summary}")
        else:
            print("open alerts: none")
        if plan:
            stops = sum(len(r["stops"]) for r in plan["routes"])
            freshness = "stale" if state.plan_stale else "current"
            print(f"plan {plan['plan_id']}: {len(plan['routes'])} routes, "
                  f"{stops} stops ({freshness})")
        else:
            print("plan: none")
    return 0


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tuhr",
                                     description="Smart-waste fleet operations server")
    parser.add_argument("--config", help="JSON config file")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the ingestion, alerting and API services")
    serve.add_argument("--data-dir")
    serve.add_argument("--host", default="0.0.0.0")
    serve.add_argument("--telemetry-port", type=int)
    serve.add_argument("--api-port", type=int)
    serve.add_argument("--credentials-file")
    serve.add_argument("--static-dir", help="dashboard bundle to serve at /")
    serve.add_argument("--log-level")
    serve.add_argument("--offline-timeout", type=float,
                       help="seconds of sensor silence before an offline alert; 0 disables")
    serve.add_argument("--scan-interval", type=float, help="offline scan period, seconds")
    serve.add_argument("--token-ttl", type=float, default=8 * 3600,
                       help="session idle expiry, seconds")
    serve.add_argument("--no-auto-plan", action="store_true",
                       help="do not recompute the dispatch plan when bins fill up")
    serve.add_argument("--fsync", action="store_true",
                       help="fsync the event log on every append")
    serve.add_argument("--empty-below", type=float)
    serve.add_argument("--almost-full-at", type=float)
    serve.add_argument("--full-at", type=float)
    serve.add_argument("--hysteresis", type=float)
    serve.add_argument("--gas-alert-ppm", type=float)
    serve.set_defaults(func=cmd_serve)

    simulate = sub.add_parser("simulate", help="drive a sensor scenario against a server")
    simulate.add_argument("--scenario", required=True,
                          help="built-in name (fig4_levels, gas_fire, hajj_day) or file")
    simulate.add_argument("--server", default=f"127.0.0.1:{DEFAULT_TELEMETRY_PORT}")
    simulate.add_argument("--api", default=f"127.0.0.1:{DEFAULT_API_PORT}")
    simulate.add_argument("--seed", type=int)
    simulate.add_argument("--time-scale", type=float)
    simulate.add_argument("--dup-prob", type=float)
    simulate.add_argument("--loss-prob", type=float)
    simulate.add_argument("--reorder-prob", type=float)
    simulate.add_argument("--max-delay", type=float)
    simulate.add_argument("--max-connections", type=int, default=64)
    simulate.add_argument("--admin-user")
    simulate.add_argument("--admin-password")
    simulate.add_argument("--no-register", action="store_true",
                          help="assume sensors are already registered")
    simulate.add_argument("--format", choices=("plain", "records"), default="plain")
    simulate.set_defaults(func=cmd_simulate)

    plan = sub.add_parser("plan", help="compute a dispatch plan from recovered state")
    plan.add_argument("--data-dir")
    plan.add_argument("--format", choices=("plain", "records"), default="plain")
    plan.set_defaults(func=cmd_plan)

    replay = sub.add_parser("replay", help="verify replay determinism, print the state hash")
    replay.add_argument("--data-dir")
    replay.add_argument("--format", choices=("plain", "records"), default="plain")
    replay.set_defaults(func=cmd_replay)

    report = sub.add_parser("report", help="per-zone states, alerts and plan summary")
    report.add_argument("--data-dir")
    report.add_argument("--format", choices=("plain", "records"), default="plain")
    report.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # one error line, stable exit code
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
