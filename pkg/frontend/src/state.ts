import type {
  AlertView,
  BinView,
  EventRecord,
  PlanResponse,
  Session,
  StreamEventName,
} from "./types";

export type ConnectionStatus = "live" | "connecting" | "polling";

/**
 * Everything the dashboard renders. Mutated only from server responses
 * (applySnapshot) and stream events (applyStreamEvent); views never write it.
 */
export interface ViewModel {
  session: Session | null;
  bins: Record<string, BinView>;
  alerts: Record<string, AlertView>;
  plan: PlanResponse;
  connection: ConnectionStatus;
  lastEventOffset: number | null;
}

export function emptyViewModel(): ViewModel {
  return {
    session: null,
    bins: {},
    alerts: {},
    plan: { plan: null, stale: false },
    connection: "connecting",
    lastEventOffset: null,
  };
}

export interface Snapshot {
  bins?: BinView[];
  alerts?: AlertView[];
  plan?: PlanResponse;
}

/** Replace sections from GET responses (the authoritative view). */
export function applySnapshot(vm: ViewModel, snapshot: Snapshot): ViewModel {
  const next = { ...vm };
  if (snapshot.bins) {
    next.bins = {};
    for (const bin of snapshot.bins) next.bins[bin.bin_id] = bin;
  }
  if (snapshot.alerts) {
    next.alerts = {};
    for (const alert of snapshot.alerts) next.alerts[alert.alert_id] = alert;
  }
  if (snapshot.plan) next.plan = snapshot.plan;
  return next;
}

/** Sections worth refetching because an event changed server-side derived state. */
export type RefetchHint = "bins" | "plan";

export interface Applied {
  vm: ViewModel;
  refetch: RefetchHint[];
}

/**
 * Fold one stream event into the view model. All values come from the event
 * payload; when an event references a bin the board has never fetched, the
 * caller is told to refetch the bin list instead of guessing.
 */
export function applyStreamEvent(vm: ViewModel, name: StreamEventName, record: EventRecord): Applied {
  const next: ViewModel = { ...vm, lastEventOffset: record.offset };
  const refetch: RefetchHint[] = [];
  const payload = record.payload as Record<string, any>;

  if (name === "bin_state") {
    const binId = payload.bin_id as string;
    const existing = next.bins[binId];
    if (!existing) {
      refetch.push("bins");
    } else {
      next.bins = {
        ...next.bins,
        [binId]: {
          ...existing,
          fill: payload.fill,
          state: payload.state,
          last_reading_ts: payload.ts ?? existing.last_reading_ts,
          last_gas_ppm: payload.gas_ppm ?? existing.last_gas_ppm,
        },
      };
    }
  } else if (name === "alert") {
    const alertId = payload.alert_id as string;
    const existing = next.alerts[alertId];
    if (record.kind === "ALERT_RAISED") {
      next.alerts = {
        ...next.alerts,
        [alertId]: {
          alert_id: alertId,
          kind: payload.kind,
          bin_id: payload.bin_id,
          raised_ts: payload.raised_ts,
          resolved_ts: null,
          detail: payload.detail ?? "",
        },
      };
    } else {
      next.alerts = {
        ...next.alerts,
        [alertId]: {
          ...(existing ?? {
            alert_id: alertId,
            kind: payload.kind,
            bin_id: payload.bin_id,
            raised_ts: payload.resolved_ts,
            detail: "",
          }),
          resolved_ts: payload.resolved_ts,
        },
      };
    }
    if (payload.kind === "FULL_BIN") refetch.push("plan");
  } else if (name === "plan") {
    next.plan = {
      plan: {
        plan_id: payload.plan_id,
        created_ts: payload.created_ts,
        routes: payload.routes,
        unassigned: payload.unassigned ?? [],
      },
      stale: false,
    };
    // staleness is server-derived; confirm it
    refetch.push("plan");
  }

  return { vm: next, refetch };
}

export function activeAlerts(vm: ViewModel): AlertView[] {
  return Object.values(vm.alerts)
    .filter((alert) => alert.resolved_ts === null)
    .sort((a, b) => a.raised_ts.localeCompare(b.raised_ts) || a.alert_id.localeCompare(b.alert_id));
}

export function bannerAlerts(vm: ViewModel): AlertView[] {
  return activeAlerts(vm).filter((alert) => alert.kind === "FULL_BIN" || alert.kind === "GAS");
}

export function sortedBins(vm: ViewModel): BinView[] {
  return Object.values(vm.bins).sort((a, b) => a.bin_id.localeCompare(b.bin_id));
}

export function myRoute(vm: ViewModel, username: string) {
  return vm.plan.plan?.routes.find((route) => route.worker_id === username) ?? null;
}
