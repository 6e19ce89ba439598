// Shapes as served by the operations API. The dashboard never computes
// fill, states or distances itself; it renders these fields.

export type Role = "WORKER" | "ADMIN";

export interface Session {
  token: string;
  username: string;
  role: Role;
}

export type BinStateName = "EMPTY" | "PARTIAL" | "ALMOST_FULL" | "FULL";

export interface BinView {
  bin_id: string;
  sensor_id: string;
  zone_id: string;
  lat: number;
  lon: number;
  depth_cm: number;
  full_offset_cm: number;
  fill: number;
  state: BinStateName;
  last_reading_ts: string | null;
  last_gas_ppm: number;
}

export type AlertKind = "FULL_BIN" | "GAS" | "SENSOR_OFFLINE";

export interface AlertView {
  alert_id: string;
  kind: AlertKind;
  bin_id: string;
  raised_ts: string;
  resolved_ts: string | null;
  detail: string;
}

export interface RouteView {
  worker_id: string;
  stops: string[];
  length_m: number;
  legs_m: number[];
}

export interface PlanView {
  plan_id: string;
  created_ts: string;
  routes: RouteView[];
  unassigned: string[];
}

export interface PlanResponse {
  plan: PlanView | null;
  stale: boolean;
}

export interface ReadView {
  offset: number;
  sensor_id: string;
  bin_id: string;
  seq: number;
  ts: string;
  distance_cm: number;
  gas_ppm: number;
  battery_pct: number;
  fill: number;
  state: BinStateName;
}

export interface ZoneView {
  zone_id: string;
  name: string;
  description: string;
}

export interface SensorView {
  sensor_id: string;
  bin_id: string;
  zone_id: string;
  lat: number;
  lon: number;
  depth_cm: number;
  full_offset_cm: number;
}

export interface UserView {
  username: string;
  role: Role;
  name: string;
  lat?: number;
  lon?: number;
  capacity?: number;
}

// One record of the server's event stream; `payload` depends on `kind`.
export interface EventRecord {
  offset: number;
  ts: string;
  kind:
    | "READING_ACCEPTED"
    | "BIN_EMPTIED"
    | "ALERT_RAISED"
    | "ALERT_RESOLVED"
    | "PLAN_CREATED";
  payload: Record<string, unknown>;
}

export type StreamEventName = "bin_state" | "alert" | "plan";
