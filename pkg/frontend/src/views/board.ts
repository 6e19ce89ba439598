import { ago, escapeHtml, pct } from "../format";
import { bannerAlerts, sortedBins, type ViewModel } from "../state";
import type { BinView } from "../types";

/** Persistent banner for unresolved FULL_BIN / GAS alerts (the software buzzer). */
export function renderBanner(vm: ViewModel): string {
  const alerts = bannerAlerts(vm);
  if (!alerts.length) return "";
  const items = alerts
    .map((alert) => {
      const cls = alert.kind === "GAS" ? "gas" : "full";
      const detail = alert.detail ? ` — ${escapeHtml(alert.detail)}` : "";
      return `<div class="banner banner-${cls}" data-alert="${escapeHtml(alert.alert_id)}">
        ${escapeHtml(alert.kind)} at ${escapeHtml(alert.bin_id)}${detail}
      </div>`;
    })
    .join("");
  return `<div class="banners">${items}</div>`;
}

/** Coordinate-scaled scatter of the fleet; no map tiles required. */
export function renderMiniMap(bins: BinView[]): string {
  if (bins.length === 0) return "";
  const lats = bins.map((b) => b.lat);
  const lons = bins.map((b) => b.lon);
  const minLat = Math.min(...lats);
  const maxLat = Math.max(...lats);
  const minLon = Math.min(...lons);
  const maxLon = Math.max(...lons);
  const spanLat = maxLat - minLat || 1e-6;
  const spanLon = maxLon - minLon || 1e-6;
  const dots = bins
    .map((b) => {
      const x = 10 + 280 * ((b.lon - minLon) / spanLon);
      const y = 10 + 130 * (1 - (b.lat - minLat) / spanLat);
      return `<circle class="dot state-${b.state}" cx="${x.toFixed(1)}" cy="${y.toFixed(1)}" r="6">
        <title>${escapeHtml(b.bin_id)}: ${pct(b.fill)}</title></circle>`;
    })
    .join("");
  return `<svg class="minimap" viewBox="0 0 300 150" role="img" aria-label="bin map">${dots}</svg>`;
}

export function renderBinTile(bin: BinView, nowMs: number): string {
  return `
  <div class="tile state-${bin.state}" data-bin="${escapeHtml(bin.bin_id)}">
    <div class="tile-head">
      <span class="bin-id">${escapeHtml(bin.bin_id)}</span>
      <span class="zone">${escapeHtml(bin.zone_id)}</span>
    </div>
    <div class="fill-big">${pct(bin.fill)}</div>
    <div class="state-label">${escapeHtml(bin.state.replace("_", " "))}</div>
    <div class="meter"><div class="meter-fill" style="width:${Math.round(bin.fill * 100)}%"></div></div>
    <div class="tile-foot">
      <span>gas ${bin.last_gas_ppm.toFixed(0)} ppm</span>
      <span>seen ${escapeHtml(ago(bin.last_reading_ts, nowMs))}</span>
    </div>
  </div>`;
}

export function renderBoard(vm: ViewModel, nowMs: number): string {
  const bins = sortedBins(vm);
  const tiles = bins.map((bin) => renderBinTile(bin, nowMs)).join("");
  const body = bins.length
    ? `${renderMiniMap(bins)}<div class="tiles">${tiles}</div>`
    : `<p class="hint">No bins registered yet.</p>`;
  return `${renderBanner(vm)}<section class="panel"><h2>Live board</h2>${body}</section>`;
}
