"""Road network topology and scenario files.

Networks are directed graphs of signalized intersections joined by three-lane
roads. Scenario files follow the CityFlow roadnet/flow JSON layout, so public
CityFlow datasets load as-is; only the fields listed in ``_ROADNET_KEYS`` are
interpreted.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

DIRECTIONS = ("E", "W", "S", "N")
LANE_KINDS = ("lef", "str", "rig")
LANES_PER_ROAD = 3
VEHICLE_GAP = 7.5  # metres of road per queued vehicle (length + min gap)

_UNIT = {"E": (1, 0), "W": (-1, 0), "N": (0, 1), "S": (0, -1)}
_SIDE_OF = {v: k for k, v in _UNIT.items()}
OPPOSITE = {"E": "W", "W": "E", "N": "S", "S": "N"}

# CityFlow road-id suffix: 0 east, 1 north, 2 west, 3 south
_CITYFLOW_HEADING = ("E", "N", "W", "S")
_CITYFLOW_TURN = {"lef": "turn_left", "str": "go_straight", "rig": "turn_right"}

# (approach, kind) pairs that receive green in phases 1..8; right turns are always on.
PHASE_SCHEME = (
    (("W", "str"), ("E", "str")),
    (("N", "str"), ("S", "str")),
    (("W", "lef"), ("E", "lef")),
    (("N", "lef"), ("S", "lef")),
    (("W", "str"), ("W", "lef")),
    (("E", "str"), ("E", "lef")),
    (("N", "str"), ("N", "lef")),
    (("S", "str"), ("S", "lef")),
)
N_PHASES = len(PHASE_SCHEME)

_ROADNET_KEYS = {
    "intersections": {"id", "point", "width", "roads", "roadLinks", "trafficLight", "virtual"},
    "roads": {"id", "points", "lanes", "startIntersection", "endIntersection"},
}


class ParseError(ValueError):
    pass


class TopologyError(ValueError):
    pass


class RouteError(ValueError):
    pass


class ArgumentError(ValueError):
    pass


def exit_side(approach: str, kind: str) -> str:
    """Side of the intersection a vehicle leaves from, given where it came in and its turn."""
    hx, hy = _UNIT[OPPOSITE[approach]]  # heading while crossing
    if kind == "str":
        return _SIDE_OF[(hx, hy)]
    if kind == "lef":
        return _SIDE_OF[(-hy, hx)]
    if kind == "rig":
        return _SIDE_OF[(hy, -hx)]
    raise ValueError(f"unknown lane kind {kind!r}")


def turn_kind(approach: str, out_side: str) -> str | None:
    for kind in LANE_KINDS:
        if exit_side(approach, kind) == out_side:
            return kind
    return None  # U-turn


@dataclass(frozen=True)
class Lane:
    id: str
    road: str
    index: int
    direction: str  # side of the end intersection this lane approaches from
    kind: str
    length: float
    capacity: int


@dataclass(frozen=True)
class Road:
    id: str
    start: str
    end: str
    heading: str
    length: float
    points: tuple[tuple[float, float], ...]
    lanes: tuple[Lane, ...]
    max_speed: float = 11.111


@dataclass(frozen=True)
class Movement:
    from_lane: str
    to_lane: str


@dataclass(frozen=True)
class Phase:
    index: int
    green: tuple[tuple[str, str], ...]  # (approach, kind) pairs, right turns excluded
    movements: frozenset[Movement]


@dataclass(frozen=True)
class Node:
    id: str
    x: float
    y: float
    virtual: bool


@dataclass(frozen=True)
class Intersection:
    id: str
    point: tuple[float, float]
    in_roads: tuple[str, ...]  # by approach side, DIRECTIONS order
    out_roads: tuple[str, ...]  # by exit side, DIRECTIONS order
    upstream_lanes: tuple[str, ...]  # 12 ids, approach-major then LANE_KINDS
    downstream_lanes: tuple[str, ...]  # 12 ids, exit-side-major then lane index
    phases: tuple[Phase, ...]
    neighbors: tuple[str | None, ...]  # controlled neighbour on each side, DIRECTIONS order


def _build_feeders() -> tuple[tuple[int, ...], ...]:
    # FEEDERS[s][k] indexes upstream_lanes: the lane of kind LANE_KINDS[k]
    # whose turn leaves toward DIRECTIONS[s].
    rows = []
    for side in DIRECTIONS:
        row = []
        for k, kind in enumerate(LANE_KINDS):
            (approach,) = [a for a in DIRECTIONS if exit_side(a, kind) == side]
            row.append(DIRECTIONS.index(approach) * 3 + k)
        rows.append(tuple(row))
    return tuple(rows)


FEEDERS = _build_feeders()


@dataclass(frozen=True)
class Network:
    intersections: tuple[Intersection, ...]
    roads: tuple[Road, ...]
    grid_dims: tuple[int, int]
    nodes: tuple[Node, ...] = field(default=())

    @cached_property
    def road_by_id(self) -> dict[str, Road]:
        return {r.id: r for r in self.roads}

    @cached_property
    def lane_by_id(self) -> dict[str, Lane]:
        return {ln.id: ln for r in self.roads for ln in r.lanes}

    @cached_property
    def intersection_by_id(self) -> dict[str, Intersection]:
        return {i.id: i for i in self.intersections}

    @cached_property
    def node_by_id(self) -> dict[str, Node]:
        return {n.id: n for n in self.nodes}

    def turn(self, from_road: str, to_road: str) -> str:
        a, b = self.road_by_id[from_road], self.road_by_id[to_road]
        if a.end != b.start:
            raise RouteError(f"{from_road} does not lead into {to_road}")
        if a.end not in self.intersection_by_id:
            raise RouteError(f"{from_road} -> {to_road} passes an uncontrolled node")
        kind = turn_kind(OPPOSITE[a.heading], b.heading)
        if kind is None:
            raise RouteError(f"U-turn {from_road} -> {to_road}")
        return kind

    def entry_roads(self) -> list[Road]:
        return [r for r in self.roads if r.start not in self.intersection_by_id]


def _make_lanes(road_id: str, heading: str, length: float, n_lanes: int = LANES_PER_ROAD) -> tuple[Lane, ...]:
    cap = max(1, int(math.floor(length / VEHICLE_GAP)))
    return tuple(
        Lane(f"{road_id}_{k}", road_id, k, OPPOSITE[heading], LANE_KINDS[k], length, cap)
        for k in range(n_lanes)
    )


def _make_phases(in_roads: Sequence[str], out_roads: Sequence[str]) -> tuple[Phase, ...]:
    def movements(approach: str, kind: str) -> list[Movement]:
        k = LANE_KINDS.index(kind)
        src = f"{in_roads[DIRECTIONS.index(approach)]}_{k}"
        dst_road = out_roads[DIRECTIONS.index(exit_side(approach, kind))]
        return [Movement(src, f"{dst_road}_{j}") for j in range(LANES_PER_ROAD)]

    rights = [m for a in DIRECTIONS for m in movements(a, "rig")]
    phases = []
    for idx, green in enumerate(PHASE_SCHEME, start=1):
        ms = set(rights)
        for approach, kind in green:
            ms.update(movements(approach, kind))
        phases.append(Phase(idx, green, frozenset(ms)))
    return tuple(phases)


def _assemble(nodes: Sequence[Node], roads: Sequence[Road], grid_dims: tuple[int, int] | None = None) -> Network:
    node_ids = {n.id for n in nodes}
    for r in roads:
        for end in (r.start, r.end):
            if end not in node_ids:
                raise TopologyError(f"road {r.id} references unknown node {end}")
        if len(r.lanes) != LANES_PER_ROAD:
            raise TopologyError(f"road {r.id} has {len(r.lanes)} lanes, expected {LANES_PER_ROAD}")

    controlled = [n for n in nodes if not n.virtual]
    controlled_ids = {n.id for n in controlled}
    intersections = []
    for n in controlled:
        ins: dict[str, str] = {}
        outs: dict[str, str] = {}
        for r in roads:
            if r.end == n.id:
                side = OPPOSITE[r.heading]
                if side in ins:
                    raise TopologyError(f"{n.id}: two approaches from {side}")
                ins[side] = r.id
            if r.start == n.id:
                if r.heading in outs:
                    raise TopologyError(f"{n.id}: two exits toward {r.heading}")
                outs[r.heading] = r.id
        if len(ins) != 4 or len(outs) != 4:
            raise TopologyError(
                f"{n.id}: {3 * len(ins)} upstream / {3 * len(outs)} downstream lanes, expected 12/12"
            )
        in_roads = tuple(ins[d] for d in DIRECTIONS)
        out_roads = tuple(outs[d] for d in DIRECTIONS)
        by_id = {r.id: r for r in roads}
        neighbors = tuple(
            by_id[o].end if by_id[o].end in controlled_ids else None for o in out_roads
        )
        intersections.append(
            Intersection(
                id=n.id,
                point=(n.x, n.y),
                in_roads=in_roads,
                out_roads=out_roads,
                upstream_lanes=tuple(f"{r}_{k}" for r in in_roads for k in range(3)),
                downstream_lanes=tuple(f"{r}_{k}" for r in out_roads for k in range(3)),
                phases=_make_phases(in_roads, out_roads),
                neighbors=neighbors,
            )
        )
    if grid_dims is None:
        xs = {n.x for n in controlled}
        ys = {n.y for n in controlled}
        grid_dims = (len(ys), len(xs)) if len(xs) * len(ys) == len(controlled) else (1, len(controlled))
    return Network(tuple(intersections), tuple(roads), grid_dims, tuple(nodes))


def build_grid(rows: int, cols: int, lane_length: float = 300.0) -> Network:
    """Uniform rows x cols grid with virtual boundary nodes on every open side.

    Ids follow the CityFlow convention: ``intersection_x_y`` with x the
    column (1..cols) and y the row (1..rows); ``road_x_y_d`` leaves node
    (x, y) heading d in (0 E, 1 N, 2 W, 3 S).
    """
    if rows < 1 or cols < 1:
        raise ArgumentError(f"grid dims must be positive, got {rows}x{cols}")
    if lane_length <= 0:
        raise ArgumentError("lane_length must be positive")

    def inside(x: int, y: int) -> bool:
        return 1 <= x <= cols and 1 <= y <= rows

    nodes = []
    for y in range(rows + 2):
        for x in range(cols + 2):
            corner = x in (0, cols + 1) and y in (0, rows + 1)
            if corner:
                continue
            nodes.append(Node(f"intersection_{x}_{y}", x * lane_length, y * lane_length, not inside(x, y)))
    node_ids = {n.id for n in nodes}

    roads = []
    for n in nodes:
        x, y = round(n.x / lane_length), round(n.y / lane_length)
        for d, heading in enumerate(_CITYFLOW_HEADING):
            dx, dy = _UNIT[heading]
            tx, ty = x + dx, y + dy
            target = f"intersection_{tx}_{ty}"
            if target not in node_ids:
                continue
            if not inside(x, y) and not inside(tx, ty):
                continue  # boundary-to-boundary
            rid = f"road_{x}_{y}_{d}"
            pts = ((x * lane_length, y * lane_length), (tx * lane_length, ty * lane_length))
            roads.append(Road(rid, n.id, target, heading, float(lane_length), pts, _make_lanes(rid, heading, lane_length)))
    return _assemble(nodes, roads, (rows, cols))


# ---------------------------------------------------------------- roadnet files


def _road_geometry(points: Sequence[tuple[float, float]]) -> tuple[str, float]:
    (x0, y0), (x1, y1) = points[0], points[-1]
    dx, dy = x1 - x0, y1 - y0
    if dx == 0 and dy == 0:
        raise TopologyError("road with zero displacement")
    if abs(dx) >= abs(dy):
        heading = "E" if dx > 0 else "W"
    else:
        heading = "N" if dy > 0 else "S"
    length = sum(math.dist(points[i], points[i + 1]) for i in range(len(points) - 1))
    return heading, length


def _warn_unknown(kind: str, records: Iterable[dict]) -> None:
    extra = set()
    for rec in records:
        extra.update(set(rec) - _ROADNET_KEYS[kind])
    if extra:
        log.warning("ignoring unrecognized %s fields: %s", kind, sorted(extra))


def network_from_dict(data: dict) -> Network:
    try:
        raw_nodes = data["intersections"]
        raw_roads = data["roads"]
        _warn_unknown("intersections", raw_nodes)
        _warn_unknown("roads", raw_roads)
        nodes = [
            Node(str(n["id"]), float(n["point"]["x"]), float(n["point"]["y"]), bool(n.get("virtual", False)))
            for n in raw_nodes
        ]
        roads = []
        for r in raw_roads:
            pts = tuple((float(p["x"]), float(p["y"])) for p in r["points"])
            if len(pts) < 2:
                raise ParseError(f"road {r['id']} needs at least two points")
            heading, length = _road_geometry(pts)
            rid = str(r["id"])
            n_lanes = len(r["lanes"])
            speed = float(r["lanes"][0].get("maxSpeed", 11.111)) if n_lanes else 11.111
            roads.append(
                Road(rid, str(r["startIntersection"]), str(r["endIntersection"]), heading, length, pts,
                     _make_lanes(rid, heading, length, n_lanes), speed)
            )
    except (KeyError, TypeError, IndexError) as exc:
        raise ParseError(f"malformed roadnet: {exc!r}") from exc
    return _assemble(nodes, roads)


def network_to_dict(net: Network) -> dict:
    intersections = []
    by_node_roads: dict[str, list[str]] = {n.id: [] for n in net.nodes}
    for r in net.roads:
        by_node_roads[r.start].append(r.id)
        by_node_roads[r.end].append(r.id)
    for n in net.nodes:
        rec = {"id": n.id, "point": {"x": n.x, "y": n.y}, "width": 0 if n.virtual else 15,
               "roads": by_node_roads[n.id], "roadLinks": [], "virtual": n.virtual}
        inter = net.intersection_by_id.get(n.id)
        if inter is None:
            rec["trafficLight"] = {"roadLinkIndices": [], "lightphases": []}
        else:
            links = []
            index_of = {}
            for a_i, approach in enumerate(DIRECTIONS):
                for k, kind in enumerate(LANE_KINDS):
                    out = inter.out_roads[DIRECTIONS.index(exit_side(approach, kind))]
                    index_of[(approach, kind)] = len(links)
                    links.append({
                        "type": _CITYFLOW_TURN[kind],
                        "startRoad": inter.in_roads[a_i],
                        "endRoad": out,
                        "direction": 0,
                        "laneLinks": [{"startLaneIndex": k, "endLaneIndex": j, "points": []} for j in range(3)],
                    })
            rights = [index_of[(a, "rig")] for a in DIRECTIONS]
            rec["roadLinks"] = links
            rec["trafficLight"] = {
                "roadLinkIndices": list(range(len(links))),
                "lightphases": [{"time": 5, "availableRoadLinks": rights}]
                + [{"time": 30, "availableRoadLinks": sorted(rights + [index_of[g] for g in p.green])}
                   for p in inter.phases],
            }
        intersections.append(rec)
    roads = [
        {"id": r.id, "points": [{"x": x, "y": y} for x, y in r.points],
         "lanes": [{"width": 3.0, "maxSpeed": r.max_speed} for _ in r.lanes],
         "startIntersection": r.start, "endIntersection": r.end}
        for r in net.roads
    ]
    return {"intersections": intersections, "roads": roads}


def load_network(path: str | Path) -> Network:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ParseError(f"{path}: top level must be an object")
    return network_from_dict(data)


def save_network(net: Network, path: str | Path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net), indent=1))


# ---------------------------------------------------------------- flows


@dataclass(frozen=True)
class FlowRule:
    route: tuple[str, ...]
    start_time: float
    interval: float
    end_time: float

    def departures(self) -> list[float]:
        if self.interval <= 0:
            return [self.start_time]
        n = int(math.floor((self.end_time - self.start_time) / self.interval + 1e-9)) + 1
        return [self.start_time + i * self.interval for i in range(n)]


@dataclass(frozen=True)
class FlowSpec:
    rules: tuple[FlowRule, ...] = ()

    def __len__(self) -> int:
        return len(self.rules)

    def departures(self) -> list[tuple[float, int, tuple[str, ...]]]:
        """All (time, rule index, route) injections, time-ordered, stable in rule order."""
        out = [(t, i, r.route) for i, r in enumerate(self.rules) for t in r.departures()]
        out.sort(key=lambda e: (e[0], e[1]))
        return out


def validate_route(net: Network, route: Sequence[str]) -> None:
    if not route:
        raise RouteError("empty route")
    for rid in route:
        if rid not in net.road_by_id:
            raise RouteError(f"unknown road {rid!r}")
    for a, b in zip(route, route[1:]):
        net.turn(a, b)


def flow_from_list(data: list, net: Network) -> FlowSpec:
    rules = []
    try:
        for rec in data:
            route = tuple(str(r) for r in rec["route"])
            start = float(rec.get("startTime", 0))
            end = float(rec.get("endTime", start))
            interval = float(rec.get("interval", 1.0))
            if end < start:
                raise ParseError(f"flow entry ends before it starts: {rec}")
            rules.append(FlowRule(route, start, interval, end))
    except (KeyError, TypeError) as exc:
        raise ParseError(f"malformed flow entry: {exc!r}") from exc
    for rule in rules:
        validate_route(net, rule.route)
    return FlowSpec(tuple(rules))


def load_flow(path: str | Path, net: Network) -> FlowSpec:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(data, list):
        raise ParseError(f"{path}: flow file must be a list")
    return flow_from_list(data, net)


_DEFAULT_VEHICLE = {"length": 5.0, "width": 2.0, "maxPosAcc": 2.0, "maxNegAcc": 4.5,
                    "usualPosAcc": 2.0, "usualNegAcc": 4.5, "minGap": 2.5, "maxSpeed": 11.111,
                    "headwayTime": 2}


def save_flow(flow: FlowSpec, path: str | Path) -> None:
    data = [{"vehicle": dict(_DEFAULT_VEHICLE), "route": list(r.route), "interval": r.interval,
             "startTime": r.start_time, "endTime": r.end_time} for r in flow.rules]
    Path(path).write_text(json.dumps(data))


def random_flow(
    net: Network,
    rate: Callable[[Road], float],
    horizon: float,
    rng: np.random.Generator,
    turn_probs: tuple[float, float, float] = (0.2, 0.6, 0.2),
) -> FlowSpec:
    """Poisson arrivals on every entry road; turns drawn per intersection.

    ``rate(road)`` gives vehicles per second for an entry road. Each vehicle
    becomes its own single-shot rule, like the public CityFlow datasets.
    """
    rules = []
    for road in net.entry_roads():
        lam = rate(road)
        if lam <= 0:
            continue
        t = rng.exponential(1.0 / lam)
        while t < horizon:
            route = [road.id]
            cur = road
            while cur.end in net.intersection_by_id:
                inter = net.intersection_by_id[cur.end]
                kind = LANE_KINDS[rng.choice(3, p=turn_probs)]
                side = exit_side(OPPOSITE[cur.heading], kind)
                cur = net.road_by_id[inter.out_roads[DIRECTIONS.index(side)]]
                route.append(cur.id)
            start = float(math.floor(t))
            rules.append(FlowRule(tuple(route), start, 1.0, start))
            t += rng.exponential(1.0 / lam)
    rules.sort(key=lambda r: r.start_time)
    return FlowSpec(tuple(rules))
