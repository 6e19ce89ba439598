"""Edge-triggered alert detection: full bins, gas hazards, silent sensors.

Detection is pure (record transition in, actions out); the store assigns alert
ids, persists the actions and fans them out to subscribers.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta

from .model import BinRecord, BinState, Thresholds, format_ts

FULL_BIN = "FULL_BIN"
GAS = "GAS"
SENSOR_OFFLINE = "SENSOR_OFFLINE"

ALERT_KINDS = (FULL_BIN, GAS, SENSOR_OFFLINE)

RAISE = "raise"
RESOLVE = "resolve"


@dataclass(frozen=True)
class AlertEvent:
    alert_id: str
    kind: str
    bin_id: str
    raised_ts: datetime
    resolved_ts: datetime | None = None
    detail: str = ""

    @property
    def resolved(self) -> bool:
        return self.resolved_ts is not None


@dataclass(frozen=True)
class AlertAction:
    """One raise or resolve decision; resolve carries the open alert's id."""

    op: str  # RAISE or RESOLVE
    kind: str
    bin_id: str
    detail: str = ""
    alert_id: str | None = None


def _open_by_kind(open_alerts, bin_id: str) -> dict[str, AlertEvent]:
    return {a.kind: a for a in open_alerts if a.bin_id == bin_id and not a.resolved}


def evaluate_transition(
    before: BinRecord,
    after: BinRecord,
    t: Thresholds,
    open_alerts,
) -> list[AlertAction]:
    """Alert actions implied by one bin transition (reading applied or bin emptied).

    Edge-triggered: FULL_BIN raises only on entering FULL, GAS only on crossing
    the concentration threshold upward; the reverse transitions resolve. A
    condition that merely persists produces no action.
    """
    bin_id = after.config.bin_id
    open_here = _open_by_kind(open_alerts, bin_id)
    actions: list[AlertAction] = []

    if after.state == BinState.FULL and before.state != BinState.FULL:
        if FULL_BIN not in open_here:
            actions.append(
                AlertAction(RAISE, FULL_BIN, bin_id, detail=f"fill {after.fill:.2f}")
            )
    elif after.state != BinState.FULL and FULL_BIN in open_here:
        actions.append(
            AlertAction(RESOLVE, FULL_BIN, bin_id, alert_id=open_here[FULL_BIN].alert_id)
        )

    crossed_up = after.last_gas_ppm >= t.gas_alert_ppm and before.last_gas_ppm < t.gas_alert_ppm
    crossed_down = after.last_gas_ppm < t.gas_alert_ppm and before.last_gas_ppm >= t.gas_alert_ppm
    if crossed_up and GAS not in open_here:
        actions.append(
            AlertAction(
                RAISE,
                GAS,
                bin_id,
                detail=f"gas {after.last_gas_ppm:.1f} ppm >= {t.gas_alert_ppm:.1f} ppm",
            )
        )
    elif crossed_down and GAS in open_here:
        actions.append(AlertAction(RESOLVE, GAS, bin_id, alert_id=open_here[GAS].alert_id))

    return actions


def resolve_offline_on_reading(after: BinRecord, open_alerts) -> list[AlertAction]:
    """A sensor that reports again clears its own offline alert."""
    open_here = _open_by_kind(open_alerts, after.config.bin_id)
    if SENSOR_OFFLINE in open_here:
        return [
            AlertAction(
                RESOLVE,
                SENSOR_OFFLINE,
                after.config.bin_id,
                alert_id=open_here[SENSOR_OFFLINE].alert_id,
            )
        ]
    return []


def offline_scan(
    now: datetime,
    bins,
    timeout_s: float,
    open_alerts,
) -> list[AlertAction]:
    """Raise SENSOR_OFFLINE for bins silent longer than the timeout.

    Bins that have never reported are skipped. Also resolves any offline alert
    whose bin has meanwhile reported (normally done on the reading itself).
    """
    if timeout_s <= 0:
        raise ValueError("timeout must be positive")
    cutoff = now - timedelta(seconds=timeout_s)
    actions: list[AlertAction] = []
    for rec in sorted(bins, key=lambda r: r.config.bin_id):
        if rec.last_reading_ts is None:
            continue
        open_here = _open_by_kind(open_alerts, rec.config.bin_id)
        if rec.last_reading_ts < cutoff:
            if SENSOR_OFFLINE not in open_here:
                silent = (now - rec.last_reading_ts).total_seconds()
                actions.append(
                    AlertAction(
                        RAISE,
                        SENSOR_OFFLINE,
                        rec.config.bin_id,
                        detail=f"silent for {int(silent)}s (last {format_ts(rec.last_reading_ts)})",
                    )
                )
        elif SENSOR_OFFLINE in open_here:
            actions.append(
                AlertAction(
                    RESOLVE,
                    SENSOR_OFFLINE,
                    rec.config.bin_id,
                    alert_id=open_here[SENSOR_OFFLINE].alert_id,
                )
            )
    return actions
