// End-to-end against the real backend: spawn the server, drive the demo
// scenario over the wire, and exercise the dashboard's client, reducer and
// event stream exactly as the browser app does.

import { spawn, spawnSync, type ChildProcess } from "node:child_process";
import { mkdtempSync, writeFileSync } from "node:fs";
import { createServer } from "node:net";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient, ApiError } from "../src/api";
import { EventStream } from "../src/sse";
import {
  applySnapshot,
  applyStreamEvent,
  bannerAlerts,
  emptyViewModel,
  type ViewModel,
} from "../src/state";

const PYTHON = process.env.PYTHON ?? "python3";

function freePort(): Promise<number> {
  return new Promise((resolve, reject) => {
    const srv = createServer();
    srv.listen(0, "127.0.0.1", () => {
      const address = srv.address();
      if (address && typeof address === "object") {
        const port = address.port;
        srv.close(() => resolve(port));
      } else {
        reject(new Error("no port"));
      }
    });
  });
}

async function waitFor(check: () => boolean | Promise<boolean>, timeoutMs: number,
                       what: string): Promise<number> {
  const start = Date.now();
  while (Date.now() - start < timeoutMs) {
    if (await check()) return Date.now() - start;
    await new Promise((r) => setTimeout(r, 25));
  }
  throw new Error(`timed out waiting for ${what}`);
}

describe("dashboard against the live backend", () => {
  let serve: ChildProcess;
  let apiBase: string;
  let telemetryAddr: string;
  let stream: EventStream | null = null;
  let vm: ViewModel = emptyViewModel();
  let api: ApiClient;

  beforeAll(async () => {
    const dir = mkdtempSync(join(tmpdir(), "tuhr-dash-"));
    const creds = join(dir, "credentials.json");
    writeFileSync(creds, JSON.stringify([
      { username: "admin", password: "admin-pw", role: "ADMIN" },
      { username: "w-1", password: "worker-pw", role: "WORKER",
        name: "Worker One", lat: 21.42, lon: 39.82, capacity: 5 },
    ]));
    const apiPort = await freePort();
    const telemetryPort = await freePort();
    apiBase = `http://127.0.0.1:${apiPort}`;
    telemetryAddr = `127.0.0.1:${telemetryPort}`;
    serve = spawn(PYTHON, [
      "-m", "tuhr.cli", "serve",
      "--data-dir", join(dir, "data"),
      "--host", "127.0.0.1",
      "--telemetry-port", String(telemetryPort),
      "--api-port", String(apiPort),
      "--credentials-file", creds,
      "--offline-timeout", "0",
    ], { stdio: "ignore" });
    api = new ApiClient(apiBase);
    await waitFor(async () => {
      try {
        const resp = await fetch(`${apiBase}/api/health`);
        return resp.ok;
      } catch {
        return false;
      }
    }, 15000, "server readiness");
  });

  afterAll(() => {
    stream?.stop();
    serve?.kill("SIGKILL");
  });

  it("logs in, subscribes, and converges on the demo levels within 2 s", async () => {
    const session = await api.login("w-1", "worker-pw");
    expect(session.role).toBe("WORKER");
    vm = { ...vm, session };

    stream = new EventStream(`${apiBase}/api/events`, session.token, {
      onEvent: (name, record) => {
        const applied = applyStreamEvent(vm, name, record);
        vm = applied.vm;
        if (applied.refetch.includes("bins")) {
          void api.bins().then((bins) => { vm = applySnapshot(vm, { bins }); });
        }
        if (applied.refetch.includes("plan")) {
          void api.plan().then((plan) => { vm = applySnapshot(vm, { plan }); });
        }
      },
      onStatus: () => {},
    });
    stream.start();

    const sim = spawnSync(PYTHON, [
      "-m", "tuhr.cli", "simulate", "--scenario", "fig4_levels",
      "--server", telemetryAddr, "--api", apiBase.replace("http://", ""),
      "--admin-user", "admin", "--admin-password", "admin-pw",
    ], { encoding: "utf-8" });
    expect(sim.status, sim.stderr).toBe(0);

    // board convergence: stream-fed view model reaches the three levels fast
    const tookMs = await waitFor(() => {
      const states = Object.values(vm.bins).map((b) => b.state).sort();
      return states.length === 3 &&
        states.join(",") === "ALMOST_FULL,EMPTY,FULL";
    }, 2000, "three-level board");
    expect(tookMs).toBeLessThan(2000);

    const fills = Object.fromEntries(Object.values(vm.bins).map((b) => [b.bin_id, b.fill]));
    expect(fills["b-1"]).toBeCloseTo(0.0, 2);
    expect(fills["b-2"]).toBeCloseTo(0.5, 2);
    expect(fills["b-3"]).toBeCloseTo(0.95, 2);

    await waitFor(() => bannerAlerts(vm).length === 1, 2000, "FULL_BIN banner");
    expect(bannerAlerts(vm)[0].kind).toBe("FULL_BIN");
  });

  it("marks a bin emptied and the banner clears without reload", async () => {
    const emptied = await api.emptyBin("b-3");
    expect(emptied.state).toBe("EMPTY");
    expect(emptied.fill).toBe(0);
    await waitFor(
      () => vm.bins["b-3"]?.state === "EMPTY" && bannerAlerts(vm).length === 0,
      2000,
      "banner cleared via the event stream",
    );
    const plan = await api.plan();
    expect(plan.stale).toBe(true);
  });

  it("second empty from another tab is the idempotent success", async () => {
    const again = await api.emptyBin("b-3");
    expect(again.state).toBe("EMPTY");
  });

  it("view model equals the GET responses after quiescence", async () => {
    const [bins, alerts] = await Promise.all([api.bins(), api.alerts()]);
    const fromGets = applySnapshot(emptyViewModel(), { bins, alerts });
    expect(vm.bins).toEqual(fromGets.bins);
    expect(vm.alerts).toEqual(fromGets.alerts);
  });

  it("server rejects admin surfaces for the worker session", async () => {
    for (const call of [
      () => api.users(),
      () => api.zones(),
      () => api.sensors(),
      () => api.recomputePlan(),
      () => api.deleteUser("admin"),
      () => api.createSensor({ sensor_id: "s-x", bin_id: "b-x", lat: 21.4, lon: 39.8,
                               depth_cm: 100, full_offset_cm: 10 }),
    ]) {
      const err = await call().catch((e) => e);
      expect(err).toBeInstanceOf(ApiError);
      expect((err as ApiError).status).toBe(403);
    }
  });

  it("stream resume replays only the missed events", async () => {
    const before = vm.lastEventOffset;
    expect(before).not.toBeNull();
    stream?.stop();

    // a state change while disconnected
    const admin = new ApiClient(apiBase);
    await admin.login("admin", "admin-pw");
    await admin.createZone({ zone_id: "z-offline", name: "Offline test" });

    const seen: number[] = [];
    const resumed = new EventStream(`${apiBase}/api/events`, api.token!, {
      onEvent: (_name, record) => seen.push(record.offset),
      onStatus: () => {},
    });
    resumed.lastEventId = 0;
    resumed.start();
    await waitFor(() => seen.length > 0 && seen[seen.length - 1] >= (before ?? 0), 5000,
                  "resumed backlog");
    resumed.stop();
    expect(seen.every((offset) => offset > 0)).toBe(true);
    expect(seen).toEqual([...seen].sort((a, b) => a - b));
  });
});
