import { describe, expect, it } from "vitest";

import {
  applySnapshot,
  applyStreamEvent,
  bannerAlerts,
  emptyViewModel,
  myRoute,
  sortedBins,
  type ViewModel,
} from "../src/state";
import {
  BIN_EMPTY,
  BIN_FULL,
  BIN_HALF,
  FULL_ALERT,
  PLAN,
  WORKER_SESSION,
  alertRaisedEvent,
  alertResolvedEvent,
  emptiedEvent,
  readingEvent,
} from "./fixtures";

function seeded(): ViewModel {
  return applySnapshot(
    { ...emptyViewModel(), session: WORKER_SESSION },
    { bins: [BIN_EMPTY, BIN_HALF, BIN_FULL], alerts: [], plan: { plan: null, stale: false } },
  );
}

describe("applySnapshot", () => {
  it("mirrors GET responses field for field", () => {
    const vm = seeded();
    expect(sortedBins(vm)).toEqual([BIN_EMPTY, BIN_HALF, BIN_FULL]);
  });

  it("replaces sections wholesale", () => {
    const vm = applySnapshot(seeded(), { bins: [BIN_FULL] });
    expect(Object.keys(vm.bins)).toEqual(["b-3"]);
  });
});

describe("applyStreamEvent", () => {
  it("updates a bin from a reading event", () => {
    const { vm } = applyStreamEvent(seeded(), "bin_state", readingEvent(11, "b-1", 0.75, "ALMOST_FULL", 42));
    expect(vm.bins["b-1"].fill).toBe(0.75);
    expect(vm.bins["b-1"].state).toBe("ALMOST_FULL");
    expect(vm.bins["b-1"].last_gas_ppm).toBe(42);
    expect(vm.bins["b-1"].last_reading_ts).toBe("2025-06-01T00:00:01Z");
    expect(vm.lastEventOffset).toBe(11);
  });

  it("requests a bin refetch for an unknown bin", () => {
    const { refetch } = applyStreamEvent(seeded(), "bin_state", readingEvent(12, "b-new", 0.2, "PARTIAL"));
    expect(refetch).toContain("bins");
  });

  it("raises and resolves alerts, hinting a plan refetch for FULL_BIN", () => {
    let state = seeded();
    const raised = applyStreamEvent(state, "alert", alertRaisedEvent(13, FULL_ALERT));
    state = raised.vm;
    expect(bannerAlerts(state).map((a) => a.alert_id)).toEqual([FULL_ALERT.alert_id]);
    expect(raised.refetch).toContain("plan");

    const resolved = applyStreamEvent(
      state, "alert", alertResolvedEvent(14, FULL_ALERT, "2025-06-01T00:10:00Z"),
    );
    expect(bannerAlerts(resolved.vm)).toEqual([]);
    expect(resolved.vm.alerts[FULL_ALERT.alert_id].resolved_ts).toBe("2025-06-01T00:10:00Z");
  });

  it("offline alerts never reach the banner", () => {
    const offline = { ...FULL_ALERT, alert_id: "sensor_offline-b-1-9", kind: "SENSOR_OFFLINE" as const };
    const { vm } = applyStreamEvent(seeded(), "alert", alertRaisedEvent(9, offline));
    expect(bannerAlerts(vm)).toEqual([]);
  });

  it("installs a plan from a plan event", () => {
    const record = {
      offset: 15, ts: PLAN.plan!.created_ts, kind: "PLAN_CREATED" as const,
      payload: { ...PLAN.plan!, basis_offset: 10 },
    };
    const { vm, refetch } = applyStreamEvent(seeded(), "plan", record);
    expect(vm.plan.plan?.plan_id).toBe(PLAN.plan!.plan_id);
    expect(refetch).toContain("plan");
  });

  it("converges to the GET snapshot after a quiescent event run", () => {
    // Stream the fig4-style sequence, then compare with the end-state GETs.
    let vm = seeded();
    const events = [
      readingEvent(20, "b-3", 0.95, "FULL"),
      alertRaisedEvent(21, FULL_ALERT),
      emptiedEvent(22, "b-3"),
      alertResolvedEvent(23, FULL_ALERT, "2025-06-01T00:10:00Z"),
    ];
    const names = ["bin_state", "alert", "bin_state", "alert"] as const;
    events.forEach((record, i) => {
      vm = applyStreamEvent(vm, names[i], record).vm;
    });

    const endBins = [
      BIN_EMPTY, BIN_HALF,
      { ...BIN_FULL, fill: 0.0, state: "EMPTY" as const, last_reading_ts: "2025-06-01T00:10:00Z" },
    ];
    const endAlerts = [{ ...FULL_ALERT, resolved_ts: "2025-06-01T00:10:00Z" }];
    const fromGets = applySnapshot(
      { ...emptyViewModel(), session: WORKER_SESSION },
      { bins: endBins, alerts: endAlerts, plan: { plan: null, stale: false } },
    );
    expect(vm.bins).toEqual(fromGets.bins);
    expect(vm.alerts).toEqual(fromGets.alerts);
  });
});

describe("myRoute", () => {
  it("finds the session worker's route", () => {
    const vm = applySnapshot(seeded(), { plan: PLAN });
    expect(myRoute(vm, "w-1")?.stops).toEqual(["b-3"]);
    expect(myRoute(vm, "w-2")).toBeNull();
  });
});
