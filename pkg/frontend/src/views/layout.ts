import { escapeHtml } from "../format";
import type { ConnectionStatus, ViewModel } from "../state";
import type { Session } from "../types";

export interface NavItem {
  hash: string;
  label: string;
}

/** Role gating of the navigation; the server enforces the same matrix with 403s. */
export function navItems(session: Session | null): NavItem[] {
  if (!session) return [];
  const items: NavItem[] = [
    { hash: "#/board", label: "Dashboard" },
    { hash: "#/tasks", label: "My Tasks" },
    { hash: "#/profile", label: "My Profile" },
  ];
  if (session.role === "ADMIN") {
    items.push(
      { hash: "#/admin/users", label: "Manage Users" },
      { hash: "#/admin/zones", label: "Manage Zones" },
      { hash: "#/admin/sensors", label: "Manage Sensors" },
      { hash: "#/admin/reads", label: "View Reads" },
    );
  }
  items.push({ hash: "#/contacts", label: "Contacts" });
  return items;
}

const CONNECTION_LABEL: Record<ConnectionStatus, string> = {
  live: "live",
  connecting: "reconnecting…",
  polling: "polling",
};

export function renderShell(vm: ViewModel, currentHash: string, content: string): string {
  const session = vm.session;
  const nav = navItems(session)
    .map((item) => {
      const active = currentHash.startsWith(item.hash) ? " active" : "";
      return `<a class="nav-item${active}" href="${item.hash}">${escapeHtml(item.label)}</a>`;
    })
    .join("");
  const who = session
    ? `<span class="who">${escapeHtml(session.username)} (${escapeHtml(session.role)})</span>
       <button class="linkish" data-action="logout">Log out</button>`
    : "";
  return `
  <header class="topbar">
    <span class="brand">tuhr operations</span>
    <nav>${nav}</nav>
    <span class="conn conn-${vm.connection}" title="event stream">${CONNECTION_LABEL[vm.connection]}</span>
    ${who}
  </header>
  <main>${content}</main>`;
}

export function renderContacts(): string {
  return `
  <section class="panel">
    <h2>Contacts</h2>
    <p>Operations control room: dispatch@sanitation.example &middot; +000 000 0000</p>
    <p>For sensor hardware faults, file a ticket with the field maintenance team.</p>
  </section>`;
}
