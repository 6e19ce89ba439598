import { escapeHtml, km } from "../format";
import { myRoute, type ViewModel } from "../state";

export function renderTasks(vm: ViewModel, toast: string | null = null): string {
  const session = vm.session;
  if (!session) return "";
  const route = myRoute(vm, session.username);
  const staleNote = vm.plan.stale
    ? `<p class="hint stale-note">The plan is stale; new full bins arrived since it was computed.</p>`
    : "";
  const toastHtml = toast ? `<div class="toast">${escapeHtml(toast)}</div>` : "";
  if (!route) {
    return `${toastHtml}<section class="panel"><h2>My tasks</h2>${staleNote}
      <p class="hint">No route assigned to ${escapeHtml(session.username)} in the current plan.</p>
    </section>`;
  }
  const stops = route.stops
    .map((binId, i) => {
      const bin = vm.bins[binId];
      const state = bin ? bin.state : "?";
      const leg = route.legs_m[i] !== undefined ? km(route.legs_m[i]) : "";
      const done = bin && bin.state === "EMPTY";
      const button = done
        ? `<span class="done">emptied</span>`
        : `<button data-action="empty" data-bin="${escapeHtml(binId)}">Mark emptied</button>`;
      return `<li class="stop">
        <span class="leg">${escapeHtml(leg)}</span>
        <span class="stop-bin">${escapeHtml(binId)}</span>
        <span class="stop-state state-${escapeHtml(state)}">${escapeHtml(state)}</span>
        ${button}
      </li>`;
    })
    .join("");
  return `${toastHtml}
  <section class="panel">
    <h2>My tasks</h2>
    ${staleNote}
    <p>Route of ${route.stops.length} stop(s), total ${km(route.length_m)}.</p>
    <ol class="route">${stops}</ol>
  </section>`;
}
