import { escapeHtml, pct } from "../format";
import type { ReadView, SensorView, UserView, ZoneView } from "../types";

// Each admin page is a table plus a create form. Validation failures (422)
// from the server are rendered into the form's error slot by the app shell.

function errorSlot(form: string): string {
  return `<p class="form-error" data-error-for="${form}"></p>`;
}

export function renderUsers(users: UserView[]): string {
  const rows = users
    .map(
      (u) => `<tr>
      <td>${escapeHtml(u.username)}</td><td>${escapeHtml(u.role)}</td>
      <td>${escapeHtml(u.name)}</td>
      <td>${u.lat !== undefined ? `${u.lat.toFixed(4)}, ${u.lon?.toFixed(4)}` : ""}</td>
      <td>${u.capacity ?? ""}</td>
      <td><button class="linkish" data-action="delete-user" data-id="${escapeHtml(u.username)}">delete</button></td>
    </tr>`,
    )
    .join("");
  return `
  <section class="panel"><h2>Manage Users</h2>
  <table class="grid"><thead><tr>
    <th>username</th><th>role</th><th>name</th><th>start location</th><th>capacity</th><th></th>
  </tr></thead><tbody>${rows}</tbody></table>
  <form data-form="create-user" class="stack">
    <h3>Add user</h3>
    <input name="username" placeholder="username" required>
    <input name="password" type="password" placeholder="password" required>
    <select name="role"><option>WORKER</option><option>ADMIN</option></select>
    <input name="name" placeholder="display name">
    <input name="lat" placeholder="start lat (workers)">
    <input name="lon" placeholder="start lon (workers)">
    <input name="capacity" placeholder="capacity (bins per round)">
    ${errorSlot("create-user")}
    <button type="submit">Create</button>
  </form></section>`;
}

export function renderZones(zones: ZoneView[]): string {
  const rows = zones
    .map(
      (z) => `<tr>
      <td>${escapeHtml(z.zone_id)}</td><td>${escapeHtml(z.name)}</td>
      <td>${escapeHtml(z.description)}</td>
      <td><button class="linkish" data-action="delete-zone" data-id="${escapeHtml(z.zone_id)}">delete</button></td>
    </tr>`,
    )
    .join("");
  return `
  <section class="panel"><h2>Manage Zones</h2>
  <table class="grid"><thead><tr><th>zone</th><th>name</th><th>description</th><th></th></tr></thead>
  <tbody>${rows}</tbody></table>
  <form data-form="create-zone" class="stack">
    <h3>Add zone</h3>
    <input name="zone_id" placeholder="zone id" required>
    <input name="name" placeholder="name">
    <input name="description" placeholder="description">
    ${errorSlot("create-zone")}
    <button type="submit">Create</button>
  </form></section>`;
}

export function renderSensors(sensors: SensorView[]): string {
  const rows = sensors
    .map(
      (s) => `<tr>
      <td>${escapeHtml(s.sensor_id)}</td><td>${escapeHtml(s.bin_id)}</td>
      <td>${escapeHtml(s.zone_id)}</td>
      <td>${s.lat.toFixed(4)}, ${s.lon.toFixed(4)}</td>
      <td>${s.depth_cm}/${s.full_offset_cm} cm</td>
      <td><button class="linkish" data-action="delete-sensor" data-id="${escapeHtml(s.sensor_id)}">delete</button></td>
    </tr>`,
    )
    .join("");
  return `
  <section class="panel"><h2>Manage Sensors</h2>
  <table class="grid"><thead><tr>
    <th>sensor</th><th>bin</th><th>zone</th><th>location</th><th>depth/offset</th><th></th>
  </tr></thead><tbody>${rows}</tbody></table>
  <form data-form="create-sensor" class="stack">
    <h3>Register sensor</h3>
    <input name="sensor_id" placeholder="sensor id" required>
    <input name="bin_id" placeholder="bin id" required>
    <input name="zone_id" placeholder="zone id">
    <input name="lat" placeholder="lat" required>
    <input name="lon" placeholder="lon" required>
    <input name="depth_cm" placeholder="depth cm (empty reading)" required>
    <input name="full_offset_cm" placeholder="full offset cm (full reading)" required>
    ${errorSlot("create-sensor")}
    <button type="submit">Register</button>
  </form></section>`;
}

export function renderReads(reads: ReadView[], filters: { sensor?: string; bin?: string; since?: string; limit?: string }): string {
  const rows = reads
    .map(
      (r) => `<tr>
      <td>${r.offset}</td><td>${escapeHtml(r.sensor_id)}</td><td>${escapeHtml(r.bin_id)}</td>
      <td>${r.seq}</td><td>${escapeHtml(r.ts)}</td>
      <td>${r.distance_cm.toFixed(1)}</td><td>${pct(r.fill)}</td>
      <td>${escapeHtml(r.state)}</td><td>${r.gas_ppm.toFixed(1)}</td><td>${r.battery_pct.toFixed(0)}%</td>
    </tr>`,
    )
    .join("");
  return `
  <section class="panel"><h2>View Reads</h2>
  <form data-form="filter-reads" class="row">
    <input name="sensor" placeholder="sensor id" value="${escapeHtml(filters.sensor ?? "")}">
    <input name="bin" placeholder="bin id" value="${escapeHtml(filters.bin ?? "")}">
    <input name="since" placeholder="since (ISO, Z)" value="${escapeHtml(filters.since ?? "")}">
    <input name="limit" placeholder="limit" value="${escapeHtml(filters.limit ?? "")}">
    ${errorSlot("filter-reads")}
    <button type="submit">Filter</button>
  </form>
  <table class="grid"><thead><tr>
    <th>offset</th><th>sensor</th><th>bin</th><th>seq</th><th>ts</th>
    <th>dist cm</th><th>fill</th><th>state</th><th>gas ppm</th><th>battery</th>
  </tr></thead><tbody>${rows}</tbody></table>
  <p class="hint">Newest first.</p></section>`;
}

export function renderProfile(username: string): string {
  return `
  <section class="panel"><h2>My Profile</h2>
  <form data-form="update-profile" class="stack">
    <input name="name" placeholder="display name">
    <input name="password" type="password" placeholder="new password">
    ${errorSlot("update-profile")}
    <button type="submit">Save</button>
  </form>
  <p class="hint">Signed in as ${escapeHtml(username)}. Name and password only.</p></section>`;
}

export function renderLogin(error: string | null): string {
  return `
  <section class="panel login"><h2>Sign in</h2>
  <form data-form="login" class="stack">
    <input name="username" placeholder="username" required>
    <input name="password" type="password" placeholder="password" required>
    <p class="form-error" data-error-for="login">${escapeHtml(error ?? "")}</p>
    <button type="submit">Log in</button>
  </form></section>`;
}
