"""Dispatch optimization: distances, minimum-cost bin-to-worker assignment, routes.

Assignment uses the Hungarian method (shortest augmenting path with potentials,
cubic time, rectangular matrices supported) so every full bin goes to exactly
one worker at minimum total travel distance. Per-worker visit order is nearest
neighbor refined by 2-opt on the open path from the worker's start. All
tie-breaking is lexicographic so identical inputs always produce identical
plans.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from datetime import datetime

from .model import BinRecord, BinState, GeoPoint, WorkerProfile, format_ts

EARTH_RADIUS_M = 6371000.0

# Stop 2-opt once no reversal wins more than this many meters.
TWO_OPT_MIN_GAIN_M = 1e-9


class EmptyInputError(ValueError):
    pass


def haversine_m(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in meters on a sphere of mean Earth radius."""
    lat1, lon1, lat2, lon2 = map(math.radians, (a.lat, a.lon, b.lat, b.lon))
    s = (
        math.sin((lat2 - lat1) / 2) ** 2
        + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    )
    return 2 * EARTH_RADIUS_M * math.atan2(math.sqrt(s), math.sqrt(1 - s))


@dataclass(frozen=True)
class CostMatrix:
    """Rectangular worker x bin distance matrix, meters."""

    costs: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        if not self.costs or not self.costs[0]:
            raise EmptyInputError("cost matrix must be nonempty")
        width = len(self.costs[0])
        for row in self.costs:
            if len(row) != width:
                raise ValueError("cost matrix must be rectangular")
            for c in row:
                if not (math.isfinite(c) and c >= 0):
                    raise ValueError(f"costs must be finite and nonnegative, got {c}")

    @property
    def rows(self) -> int:
        return len(self.costs)

    @property
    def cols(self) -> int:
        return len(self.costs[0])


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...]  # (worker_index, bin_index)
    total_cost: float


@dataclass(frozen=True)
class Route:
    worker_id: str
    stops: tuple[str, ...]  # bin ids in visit order
    length_m: float
    legs_m: tuple[float, ...] = ()  # distance into each stop, same order


@dataclass(frozen=True)
class DispatchPlan:
    plan_id: str
    created_ts: datetime
    routes: tuple[Route, ...]
    stale: bool = False
    unassigned: tuple[str, ...] = ()

    def to_payload(self) -> dict:
        return {
            "plan_id": self.plan_id,
            "created_ts": format_ts(self.created_ts),
            "routes": [
                {
                    "worker_id": r.worker_id,
                    "stops": list(r.stops),
                    "length_m": r.length_m,
                    "legs_m": list(r.legs_m),
                }
                for r in self.routes
            ],
            "unassigned": list(self.unassigned),
        }


def build_cost_matrix(workers: list[WorkerProfile], bins: list[BinRecord]) -> CostMatrix:
    if not workers or not bins:
        raise EmptyInputError("need at least one worker and one bin")
    return _matrix_from_points(
        [w.start_location for w in workers], [b.config.location for b in bins]
    )


def _matrix_from_points(origins: list[GeoPoint], targets: list[GeoPoint]) -> CostMatrix:
    return CostMatrix(
        tuple(tuple(haversine_m(o, t) for t in targets) for o in origins)
    )


def _augmenting_path_min_cost(costs, n_rows: int, n_cols: int) -> tuple[float, list[int]]:
    """Min-cost matching of all rows (requires n_rows <= n_cols).

    Classic potentials formulation: one shortest augmenting path per row.
    Returns (total cost, row -> col assignment).
    """
    INF = float("inf")
    u = [0.0] * (n_rows + 1)
    v = [0.0] * (n_cols + 1)
    match = [0] * (n_cols + 1)  # 1-based; match[j] = row occupying col j
    for i in range(1, n_rows + 1):
        match[0] = i
        j0 = 0
        min_slack = [INF] * (n_cols + 1)
        prev_col = [0] * (n_cols + 1)
        used = [False] * (n_cols + 1)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = INF
            j1 = 0
            row = costs[i0 - 1]
            for j in range(1, n_cols + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - u[i0] - v[j]
                if cur < min_slack[j]:
                    min_slack[j] = cur
                    prev_col[j] = j0
                if min_slack[j] < delta:
                    delta = min_slack[j]
                    j1 = j
            for j in range(n_cols + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    min_slack[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j_prev = prev_col[j0]
            match[j0] = match[j_prev]
            j0 = j_prev
    row_to_col = [-1] * n_rows
    total = 0.0
    for j in range(1, n_cols + 1):
        if match[j]:
            row_to_col[match[j] - 1] = j - 1
            total += costs[match[j] - 1][j - 1]
    return total, row_to_col


def _min_total_cost(costs, skip_rows=frozenset(), skip_cols=frozenset()) -> float:
    """Optimal total over the submatrix with the given rows/cols removed."""
    rows = [i for i in range(len(costs)) if i not in skip_rows]
    cols = [j for j in range(len(costs[0])) if j not in skip_cols]
    if not rows or not cols:
        return 0.0
    sub = [[costs[i][j] for j in cols] for i in rows]
    if len(rows) <= len(cols):
        total, _ = _augmenting_path_min_cost(sub, len(rows), len(cols))
    else:
        flipped = [[sub[i][j] for i in range(len(rows))] for j in range(len(cols))]
        total, _ = _augmenting_path_min_cost(flipped, len(cols), len(rows))
    return total


def solve_assignment(c: CostMatrix) -> Assignment:
    """Minimum-total-cost matching of min(rows, cols) bins to distinct workers.

    Among equally cheap matchings, returns the one whose pair list is
    lexicographically smallest in (worker_index, bin_index). That refinement is
    done by fixing candidate pairs in index order and keeping a fix only if the
    optimum is still attainable.
    """
    costs = c.costs
    m, n = c.rows, c.cols
    best = _min_total_cost(costs)
    k = min(m, n)
    tol = 1e-9 + abs(best) * 1e-12

    pairs: list[tuple[int, int]] = []
    used_cols: set[int] = set()
    fixed_cost = 0.0
    for i in range(m):
        if len(pairs) == k:
            break
        for j in range(n):
            if j in used_cols:
                continue
            rest = _min_total_cost(
                costs,
                skip_rows=frozenset(p[0] for p in pairs) | {i},
                skip_cols=used_cols | {j},
            )
            if fixed_cost + costs[i][j] + rest <= best + tol:
                pairs.append((i, j))
                used_cols.add(j)
                fixed_cost += costs[i][j]
                break
    total = math.fsum(costs[i][j] for i, j in pairs)
    return Assignment(pairs=tuple(pairs), total_cost=total)


@dataclass(frozen=True)
class AllocationResult:
    """bin_id -> worker_id mapping plus whatever could not be placed."""

    mapping: dict[str, str]
    unassigned: tuple[str, ...]

    @property
    def capacity_exhausted(self) -> bool:
        return bool(self.unassigned)


def assign_all(bins: list[BinRecord], workers: list[WorkerProfile]) -> AllocationResult:
    """Assign every bin to exactly one worker over repeated assignment rounds.

    Each round matches up to one bin per worker with remaining capacity; a
    worker's cost in later rounds is measured from its last assigned bin
    (greedy chaining). Stops when bins run out or all capacity is spent.
    """
    workers = sorted(workers, key=lambda w: w.worker_id)
    remaining = sorted(bins, key=lambda b: b.config.bin_id)
    position = {w.worker_id: w.start_location for w in workers}
    capacity = {w.worker_id: w.capacity for w in workers}
    mapping: dict[str, str] = {}

    while remaining:
        active = [w for w in workers if capacity[w.worker_id] > 0]
        if not active:
            break
        matrix = _matrix_from_points(
            [position[w.worker_id] for w in active],
            [b.config.location for b in remaining],
        )
        result = solve_assignment(matrix)
        matched_bins = []
        for wi, bj in result.pairs:
            worker = active[wi]
            target = remaining[bj]
            mapping[target.config.bin_id] = worker.worker_id
            capacity[worker.worker_id] -= 1
            position[worker.worker_id] = target.config.location
            matched_bins.append(bj)
        remaining = [b for j, b in enumerate(remaining) if j not in set(matched_bins)]

    return AllocationResult(
        mapping=mapping, unassigned=tuple(b.config.bin_id for b in remaining)
    )


def path_legs_m(start: GeoPoint, points: list[GeoPoint]) -> list[float]:
    """Leg distances along the open path start -> points (no return leg)."""
    legs = []
    prev = start
    for p in points:
        legs.append(haversine_m(prev, p))
        prev = p
    return legs


def path_length_m(start: GeoPoint, points: list[GeoPoint]) -> float:
    """Open path length start -> points in order (no return leg)."""
    total = 0.0
    for leg in path_legs_m(start, points):
        total += leg
    return total


def order_route_nn(start: GeoPoint, stops: list[BinRecord], worker_id: str = "") -> Route:
    """Nearest-neighbor visit order from the start; ties go to the lower bin_id."""
    if not stops:
        raise EmptyInputError("route needs at least one stop")
    pending = {b.config.bin_id: b.config.location for b in stops}
    here = start
    order: list[str] = []
    while pending:
        next_id = min(pending, key=lambda bid: (haversine_m(here, pending[bid]), bid))
        order.append(next_id)
        here = pending.pop(next_id)
    locs = {b.config.bin_id: b.config.location for b in stops}
    legs = path_legs_m(start, [locs[b] for b in order])
    return Route(
        worker_id=worker_id,
        stops=tuple(order),
        length_m=sum(legs),
        legs_m=tuple(legs),
    )


def two_opt(route: Route, coords: dict[str, GeoPoint], start: GeoPoint) -> Route:
    """Best-improvement 2-opt on the open path (start fixed) until no move helps.

    Each move reverses stops[i..j]; the output visits the same stops at a
    length no greater than the input's.
    """
    order = list(route.stops)
    n = len(order)
    if n < 3:
        return route

    pts = [coords[b] for b in order]

    def seg(i, j):
        return haversine_m(pts[i], pts[j])

    def from_start(i):
        return haversine_m(start, pts[i])

    improved = True
    while improved:
        improved = False
        best_delta = -TWO_OPT_MIN_GAIN_M
        best_move = None
        for i in range(n - 1):
            before = from_start(i) if i == 0 else seg(i - 1, i)
            for j in range(i + 1, n):
                # Reverse order[i..j]: edge into the segment swaps to pts[j];
                # the edge out (if any) swaps to pts[i].
                new_before = from_start(j) if i == 0 else seg(i - 1, j)
                if j < n - 1:
                    delta = (new_before + seg(i, j + 1)) - (before + seg(j, j + 1))
                else:
                    delta = new_before - before
                if delta < best_delta:
                    best_delta = delta
                    best_move = (i, j)
        if best_move is not None:
            i, j = best_move
            order[i : j + 1] = reversed(order[i : j + 1])
            pts[i : j + 1] = reversed(pts[i : j + 1])
            improved = True

    legs = path_legs_m(start, pts)
    return Route(
        worker_id=route.worker_id,
        stops=tuple(order),
        length_m=sum(legs),
        legs_m=tuple(legs),
    )


def plan_dispatch(
    bins: list[BinRecord],
    workers: list[WorkerProfile],
    ts: datetime,
) -> DispatchPlan:
    """Build the dispatch plan for the FULL bins in a snapshot.

    No FULL bins gives an empty plan. Otherwise: assign bins to workers,
    order each worker's stops by nearest neighbor, refine with 2-opt. Bins
    that no worker has capacity for are listed as unassigned.
    """
    full = sorted(
        (b for b in bins if b.state == BinState.FULL), key=lambda b: b.config.bin_id
    )
    workers = sorted(workers, key=lambda w: w.worker_id)
    if not full:
        return DispatchPlan(plan_id=_plan_id(ts, (), ()), created_ts=ts, routes=())
    if not workers:
        unassigned = tuple(b.config.bin_id for b in full)
        return DispatchPlan(
            plan_id=_plan_id(ts, (), unassigned), created_ts=ts, routes=(), unassigned=unassigned
        )

    allocation = assign_all(full, workers)
    by_bin = {b.config.bin_id: b for b in full}
    coords = {b.config.bin_id: b.config.location for b in full}
    routes = []
    for w in workers:
        mine = [by_bin[bid] for bid, wid in allocation.mapping.items() if wid == w.worker_id]
        if not mine:
            continue
        nn = order_route_nn(w.start_location, mine, worker_id=w.worker_id)
        routes.append(two_opt(nn, coords, w.start_location))
    routes = tuple(sorted(routes, key=lambda r: r.worker_id))
    return DispatchPlan(
        plan_id=_plan_id(ts, routes, allocation.unassigned),
        created_ts=ts,
        routes=routes,
        unassigned=allocation.unassigned,
    )


def _plan_id(ts: datetime, routes, unassigned) -> str:
    digest = hashlib.sha256(
        json.dumps(
            {
                "ts": format_ts(ts),
                "routes": [[r.worker_id, list(r.stops)] for r in routes],
                "unassigned": list(unassigned),
            },
            sort_keys=True,
        ).encode()
    ).hexdigest()
    return f"plan-{digest[:12]}"
