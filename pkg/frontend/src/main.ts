import { ApiClient, ApiError } from "./api";
import { EventStream } from "./sse";
import {
  applySnapshot,
  applyStreamEvent,
  emptyViewModel,
  type RefetchHint,
  type ViewModel,
} from "./state";
import type { ReadView, SensorView, Session, UserView, ZoneView } from "./types";
import { renderLogin, renderProfile, renderReads, renderSensors, renderUsers, renderZones } from "./views/admin";
import { renderBoard } from "./views/board";
import { renderContacts, renderShell } from "./views/layout";
import { renderTasks } from "./views/tasks";

const POLL_INTERVAL_MS = 5000;

class App {
  vm: ViewModel = emptyViewModel();
  api = new ApiClient("");
  stream: EventStream | null = null;
  toast: string | null = null;
  loginError: string | null = null;
  adminData: {
    users: UserView[];
    zones: ZoneView[];
    sensors: SensorView[];
    reads: ReadView[];
    readFilters: { sensor?: string; bin?: string; since?: string; limit?: string };
  } = { users: [], zones: [], sensors: [], reads: [], readFilters: {} };

  constructor(private root: HTMLElement) {}

  start(): void {
    const saved = sessionStorage.getItem("tuhr-session");
    if (saved) {
      const session = JSON.parse(saved) as Session;
      this.vm = { ...this.vm, session };
      this.api.token = session.token;
      void this.connect();
    }
    window.addEventListener("hashchange", () => void this.navigated());
    this.root.addEventListener("click", (ev) => void this.onClick(ev));
    this.root.addEventListener("submit", (ev) => void this.onSubmit(ev));
    window.setInterval(() => void this.pollFallback(), POLL_INTERVAL_MS);
    void this.navigated();
  }

  private async connect(): Promise<void> {
    await this.refreshAll();
    this.stream?.stop();
    const session = this.vm.session;
    if (!session) return;
    this.stream = new EventStream("/api/events", session.token, {
      onEvent: (name, record) => {
        const { vm, refetch } = applyStreamEvent(this.vm, name, record);
        this.vm = vm;
        void this.refetchSome(refetch);
        this.render();
      },
      onStatus: (status) => {
        this.vm = { ...this.vm, connection: status };
        this.render();
      },
    });
    if (this.vm.lastEventOffset !== null) this.stream.lastEventId = this.vm.lastEventOffset;
    this.stream.start();
  }

  private async refetchSome(hints: RefetchHint[]): Promise<void> {
    if (hints.includes("bins")) {
      this.vm = applySnapshot(this.vm, { bins: await this.api.bins() });
    }
    if (hints.includes("plan")) {
      this.vm = applySnapshot(this.vm, { plan: await this.api.plan() });
    }
    if (hints.length) this.render();
  }

  private async refreshAll(): Promise<void> {
    if (!this.vm.session) return;
    try {
      const [bins, alerts, plan] = await Promise.all([
        this.api.bins(),
        this.api.alerts(),
        this.api.plan(),
      ]);
      this.vm = applySnapshot(this.vm, { bins, alerts, plan });
      this.render();
    } catch (err) {
      if (err instanceof ApiError && err.status === 401) this.logout();
    }
  }

  private async pollFallback(): Promise<void> {
    if (!this.vm.session || this.vm.connection === "live") return;
    this.vm = { ...this.vm, connection: "polling" };
    await this.refreshAll();
  }

  private async navigated(): Promise<void> {
    const hash = location.hash || "#/board";
    if (this.vm.session && hash.startsWith("#/admin/")) {
      try {
        if (hash === "#/admin/users") this.adminData.users = await this.api.users();
        if (hash === "#/admin/zones") this.adminData.zones = await this.api.zones();
        if (hash === "#/admin/sensors") this.adminData.sensors = await this.api.sensors();
        if (hash === "#/admin/reads") {
          const f = this.adminData.readFilters;
          this.adminData.reads = await this.api.reads({
            sensor: f.sensor || undefined,
            bin: f.bin || undefined,
            since: f.since || undefined,
            limit: f.limit ? Number(f.limit) : undefined,
          });
        }
      } catch (err) {
        if (err instanceof ApiError) this.toast = err.message;
      }
    }
    this.render();
  }

  render(): void {
    const hash = location.hash || "#/board";
    if (!this.vm.session) {
      this.root.innerHTML = renderLogin(this.loginError);
      return;
    }
    let content: string;
    switch (true) {
      case hash.startsWith("#/tasks"):
        content = renderTasks(this.vm, this.toast);
        break;
      case hash.startsWith("#/profile"):
        content = renderProfile(this.vm.session.username);
        break;
      case hash.startsWith("#/contacts"):
        content = renderContacts();
        break;
      case hash.startsWith("#/admin/users"):
        content = renderUsers(this.adminData.users);
        break;
      case hash.startsWith("#/admin/zones"):
        content = renderZones(this.adminData.zones);
        break;
      case hash.startsWith("#/admin/sensors"):
        content = renderSensors(this.adminData.sensors);
        break;
      case hash.startsWith("#/admin/reads"):
        content = renderReads(this.adminData.reads, this.adminData.readFilters);
        break;
      default:
        content = renderBoard(this.vm, Date.now());
    }
    this.root.innerHTML = renderShell(this.vm, hash, content);
  }

  logout(): void {
    this.stream?.stop();
    sessionStorage.removeItem("tuhr-session");
    this.vm = emptyViewModel();
    this.api.token = null;
    location.hash = "#/board";
    this.render();
  }

  private async onClick(ev: Event): Promise<void> {
    const target = (ev.target as HTMLElement).closest("[data-action]");
    if (!target) return;
    const action = target.getAttribute("data-action");
    const id = target.getAttribute("data-id") ?? target.getAttribute("data-bin") ?? "";
    try {
      if (action === "logout") this.logout();
      else if (action === "empty") await this.markEmptied(id);
      else if (action === "delete-user") {
        await this.api.deleteUser(id);
        this.adminData.users = await this.api.users();
        this.render();
      } else if (action === "delete-zone") {
        await this.api.deleteZone(id);
        this.adminData.zones = await this.api.zones();
        this.render();
      } else if (action === "delete-sensor") {
        await this.api.deleteSensor(id);
        this.adminData.sensors = await this.api.sensors();
        this.render();
      }
    } catch (err) {
      this.toast = err instanceof ApiError ? err.message : String(err);
      this.render();
    }
  }

  private async markEmptied(binId: string): Promise<void> {
    try {
      const bin = await this.api.emptyBin(binId);
      this.vm = { ...this.vm, bins: { ...this.vm.bins, [bin.bin_id]: bin } };
      // the empty resolves alerts and changes plan staleness server-side
      this.vm = applySnapshot(this.vm, { alerts: await this.api.alerts(), plan: await this.api.plan() });
      this.toast = null;
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        // stale action from another tab; show and refresh the bin
        this.toast = `Bin ${binId}: ${err.message}`;
        const bin = await this.api.bin(binId);
        this.vm = { ...this.vm, bins: { ...this.vm.bins, [bin.bin_id]: bin } };
      } else {
        throw err;
      }
    }
    this.render();
  }

  private async onSubmit(ev: Event): Promise<void> {
    const form = ev.target as HTMLFormElement;
    const kind = form.getAttribute("data-form");
    if (!kind) return;
    ev.preventDefault();
    const fields: Record<string, string> = {};
    for (const [key, value] of new FormData(form).entries()) fields[key] = String(value);
    const showError = (message: string) => {
      // after a re-render the old form node is detached; find the live slot
      const slot = this.root.querySelector(`[data-error-for="${kind}"]`);
      if (slot) slot.textContent = message;
    };
    try {
      if (kind === "login") {
        const session = await this.api.login(fields.username, fields.password);
        sessionStorage.setItem("tuhr-session", JSON.stringify(session));
        this.vm = { ...this.vm, session };
        this.loginError = null;
        await this.connect();
      } else if (kind === "create-user") {
        await this.api.createUser({
          username: fields.username,
          password: fields.password,
          role: fields.role,
          name: fields.name || undefined,
          lat: fields.lat ? Number(fields.lat) : undefined,
          lon: fields.lon ? Number(fields.lon) : undefined,
          capacity: fields.capacity ? Number(fields.capacity) : undefined,
        });
        this.adminData.users = await this.api.users();
      } else if (kind === "create-zone") {
        await this.api.createZone({
          zone_id: fields.zone_id,
          name: fields.name || fields.zone_id,
          description: fields.description,
        });
        this.adminData.zones = await this.api.zones();
      } else if (kind === "create-sensor") {
        await this.api.createSensor({
          sensor_id: fields.sensor_id,
          bin_id: fields.bin_id,
          zone_id: fields.zone_id,
          lat: Number(fields.lat),
          lon: Number(fields.lon),
          depth_cm: Number(fields.depth_cm),
          full_offset_cm: Number(fields.full_offset_cm),
        });
        this.adminData.sensors = await this.api.sensors();
      } else if (kind === "filter-reads") {
        this.adminData.readFilters = fields;
        this.adminData.reads = await this.api.reads({
          sensor: fields.sensor || undefined,
          bin: fields.bin || undefined,
          since: fields.since || undefined,
          limit: fields.limit ? Number(fields.limit) : undefined,
        });
      } else if (kind === "update-profile") {
        const body: Record<string, string> = {};
        if (fields.name) body.name = fields.name;
        if (fields.password) body.password = fields.password;
        await this.api.updateUser(this.vm.session!.username, body);
      }
      this.render();
    } catch (err) {
      const message = err instanceof ApiError ? err.message : String(err);
      if (kind === "login") {
        this.loginError = message;
        this.render();
      } else {
        this.render();
        showError(message);
      }
    }
  }
}

const rootElement = document.getElementById("app");
if (rootElement) {
  new App(rootElement).start();
}
