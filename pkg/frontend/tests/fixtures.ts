// Fixtures mirror the server's actual response and event shapes.

import type { AlertView, BinView, EventRecord, PlanResponse } from "../src/types";

export const BIN_EMPTY: BinView = {
  bin_id: "b-1", sensor_id: "s-1", zone_id: "z-demo",
  lat: 21.4255, lon: 39.8282, depth_cm: 100, full_offset_cm: 10,
  fill: 0.0, state: "EMPTY", last_reading_ts: "2025-06-01T00:00:02Z", last_gas_ppm: 0,
};

export const BIN_HALF: BinView = {
  ...BIN_EMPTY, bin_id: "b-2", sensor_id: "s-2", lat: 21.4285, lon: 39.8302,
  fill: 0.5, state: "ALMOST_FULL",
};

export const BIN_FULL: BinView = {
  ...BIN_EMPTY, bin_id: "b-3", sensor_id: "s-3", lat: 21.4315, lon: 39.8322,
  fill: 0.95, state: "FULL",
};

export const FULL_ALERT: AlertView = {
  alert_id: "full_bin-b-3-10", kind: "FULL_BIN", bin_id: "b-3",
  raised_ts: "2025-06-01T00:00:01Z", resolved_ts: null, detail: "fill 0.95",
};

export const PLAN: PlanResponse = {
  plan: {
    plan_id: "plan-2473f1b79be0",
    created_ts: "2025-06-01T00:00:01Z",
    routes: [
      { worker_id: "w-1", stops: ["b-3"], length_m: 1797.19, legs_m: [1797.19] },
    ],
    unassigned: [],
  },
  stale: false,
};

export function readingEvent(offset: number, binId: string, fill: number,
                             state: string, gas = 0): EventRecord {
  return {
    offset,
    ts: "2025-06-01T00:00:01Z",
    kind: "READING_ACCEPTED",
    payload: {
      sid: `s-${binId.slice(2)}`, seq: 0, ts: "2025-06-01T00:00:01Z",
      dist_cm: 100 - fill * 90, gas_ppm: gas, batt_pct: 100,
      bin_id: binId, fill, state,
    },
  };
}

export function emptiedEvent(offset: number, binId: string): EventRecord {
  return {
    offset,
    ts: "2025-06-01T00:10:00Z",
    kind: "BIN_EMPTIED",
    payload: { bin_id: binId, ts: "2025-06-01T00:10:00Z", fill: 0.0, state: "EMPTY" },
  };
}

export function alertRaisedEvent(offset: number, alert: AlertView): EventRecord {
  return {
    offset,
    ts: alert.raised_ts,
    kind: "ALERT_RAISED",
    payload: {
      alert_id: alert.alert_id, kind: alert.kind, bin_id: alert.bin_id,
      raised_ts: alert.raised_ts, detail: alert.detail,
    },
  };
}

export function alertResolvedEvent(offset: number, alert: AlertView, ts: string): EventRecord {
  return {
    offset,
    ts,
    kind: "ALERT_RESOLVED",
    payload: { alert_id: alert.alert_id, kind: alert.kind, bin_id: alert.bin_id, resolved_ts: ts },
  };
}

export const WORKER_SESSION = { token: "t-worker", username: "w-1", role: "WORKER" as const };
export const ADMIN_SESSION = { token: "t-admin", username: "admin", role: "ADMIN" as const };
