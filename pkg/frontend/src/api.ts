import type {
  AlertView,
  BinView,
  PlanResponse,
  ReadView,
  SensorView,
  Session,
  UserView,
  ZoneView,
} from "./types";

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export interface ReadsQuery {
  sensor?: string;
  bin?: string;
  since?: string;
  limit?: number;
}

/** Thin typed client; every call returns the server's JSON as-is. */
export class ApiClient {
  token: string | null = null;

  constructor(
    private baseUrl: string = "",
    private fetchFn: typeof fetch = (...args) => fetch(...args),
  ) {}

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const headers: Record<string, string> = {};
    if (this.token) headers["Authorization"] = `Bearer ${this.token}`;
    if (body !== undefined) headers["Content-Type"] = "application/json";
    const resp = await this.fetchFn(this.baseUrl + path, {
      method,
      headers,
      body: body !== undefined ? JSON.stringify(body) : undefined,
    });
    const text = await resp.text();
    const data = text ? JSON.parse(text) : null;
    if (!resp.ok) {
      const message = data && data.error ? data.error : `HTTP ${resp.status}`;
      throw new ApiError(resp.status, message);
    }
    return data as T;
  }

  async login(username: string, password: string): Promise<Session> {
    const session = await this.request<Session>("POST", "/api/login", { username, password });
    this.token = session.token;
    return session;
  }

  bins(): Promise<BinView[]> {
    return this.request("GET", "/api/bins");
  }

  bin(id: string): Promise<BinView> {
    return this.request("GET", `/api/bins/${encodeURIComponent(id)}`);
  }

  emptyBin(id: string): Promise<BinView> {
    return this.request("POST", `/api/bins/${encodeURIComponent(id)}/empty`, {});
  }

  alerts(active?: boolean): Promise<AlertView[]> {
    const suffix = active === undefined ? "" : `?active=${active}`;
    return this.request("GET", `/api/alerts${suffix}`);
  }

  plan(): Promise<PlanResponse> {
    return this.request("GET", "/api/plan");
  }

  recomputePlan(): Promise<PlanResponse> {
    return this.request("POST", "/api/plan/recompute", {});
  }

  reads(query: ReadsQuery = {}): Promise<ReadView[]> {
    const params = new URLSearchParams();
    if (query.sensor) params.set("sensor", query.sensor);
    if (query.bin) params.set("bin", query.bin);
    if (query.since) params.set("since", query.since);
    if (query.limit !== undefined) params.set("limit", String(query.limit));
    const qs = params.toString();
    return this.request("GET", `/api/reads${qs ? `?${qs}` : ""}`);
  }

  zones(): Promise<ZoneView[]> {
    return this.request("GET", "/api/zones");
  }

  createZone(zone: Partial<ZoneView>): Promise<unknown> {
    return this.request("POST", "/api/zones", zone);
  }

  deleteZone(id: string): Promise<unknown> {
    return this.request("DELETE", `/api/zones/${encodeURIComponent(id)}`);
  }

  sensors(): Promise<SensorView[]> {
    return this.request("GET", "/api/sensors");
  }

  createSensor(sensor: Partial<SensorView>): Promise<unknown> {
    return this.request("POST", "/api/sensors", sensor);
  }

  deleteSensor(id: string): Promise<unknown> {
    return this.request("DELETE", `/api/sensors/${encodeURIComponent(id)}`);
  }

  users(): Promise<UserView[]> {
    return this.request("GET", "/api/users");
  }

  createUser(user: Record<string, unknown>): Promise<UserView> {
    return this.request("POST", "/api/users", user);
  }

  updateUser(username: string, fields: Record<string, unknown>): Promise<UserView> {
    return this.request("PUT", `/api/users/${encodeURIComponent(username)}`, fields);
  }

  deleteUser(username: string): Promise<unknown> {
    return this.request("DELETE", `/api/users/${encodeURIComponent(username)}`);
  }
}
