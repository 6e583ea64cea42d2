import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bctlight.netmodel import (
    DIRECTIONS, FEEDERS, LANE_KINDS, OPPOSITE, PHASE_SCHEME, ArgumentError, FlowRule, FlowSpec,
    ParseError, RouteError, TopologyError, build_grid, exit_side, load_flow, load_network,
    network_from_dict, network_to_dict, save_flow, save_network,
)


def test_single_intersection_grid():
    net = build_grid(1, 1, 300)
    assert len(net.intersections) == 1
    inter = net.intersections[0]
    assert len(inter.upstream_lanes) == 12
    assert len(inter.downstream_lanes) == 12
    assert len(net.entry_roads()) == 4
    exits = [r for r in net.roads if r.end not in net.intersection_by_id]
    assert len(exits) == 4
    assert inter.neighbors == (None, None, None, None)


def test_two_by_two_shares_internal_roads():
    net = build_grid(2, 2, 300)
    assert len(net.intersections) == 4
    # 4 internal adjacencies, two directed roads each, plus 8 in + 8 out at the boundary
    internal = [r for r in net.roads if r.start in net.intersection_by_id and r.end in net.intersection_by_id]
    assert len(internal) == 8
    assert len(net.roads) == 24
    for r in internal:
        a = net.intersection_by_id[r.start]
        b = net.intersection_by_id[r.end]
        assert r.id in a.out_roads and r.id in b.in_roads
        assert b.id in a.neighbors


def test_jinan_shape():
    net = build_grid(3, 4)
    assert len(net.intersections) == 12
    assert net.grid_dims == (3, 4)


@given(st.integers(1, 4), st.integers(1, 4))
@settings(max_examples=20, deadline=None)
def test_grid_invariants(rows, cols):
    net = build_grid(rows, cols)
    assert len(net.intersections) == rows * cols
    for inter in net.intersections:
        assert len(inter.phases) == 8
        assert len(set(inter.upstream_lanes)) == 12
        assert len(set(inter.downstream_lanes)) == 12
        lanes = set(inter.upstream_lanes) | set(inter.downstream_lanes)
        for ph in inter.phases:
            for mv in ph.movements:
                assert mv.from_lane in lanes and mv.to_lane in lanes


def test_bad_dims():
    with pytest.raises(ArgumentError):
        build_grid(0, 2)


def test_capacity_from_vehicle_gap():
    net = build_grid(1, 1, 100)
    lane = net.lane_by_id[net.intersections[0].upstream_lanes[0]]
    assert lane.capacity == int(100 // 7.5)


def test_turn_geometry():
    net = build_grid(1, 1)
    inter = net.intersections[0]
    for ph in inter.phases:
        for mv in ph.movements:
            src = net.lane_by_id[mv.from_lane]
            dst = net.lane_by_id[mv.to_lane]
            approach = OPPOSITE[net.road_by_id[src.road].heading]
            out_side = net.road_by_id[dst.road].heading
            assert out_side == exit_side(approach, src.kind)
            if src.kind == "str":
                assert out_side == OPPOSITE[approach]


def test_phase_scheme_and_rights():
    net = build_grid(1, 1)
    inter = net.intersections[0]
    assert [tuple(sorted(p.green)) for p in inter.phases] == [tuple(sorted(g)) for g in PHASE_SCHEME]
    right_lanes = {inter.upstream_lanes[DIRECTIONS.index(a) * 3 + 2] for a in DIRECTIONS}
    for ph in inter.phases:
        assert right_lanes <= {mv.from_lane for mv in ph.movements}


def test_feeders_cover_each_upstream_lane_once():
    flat = sorted(i for row in FEEDERS for i in row)
    assert flat == list(range(12))
    for s, row in enumerate(FEEDERS):
        for k, pos in enumerate(row):
            approach = DIRECTIONS[pos // 3]
            assert LANE_KINDS[pos % 3] == LANE_KINDS[k]
            assert exit_side(approach, LANE_KINDS[k]) == DIRECTIONS[s]


def test_roundtrip(tmp_path):
    net = build_grid(2, 3)
    save_network(net, tmp_path / "roadnet.json")
    again = load_network(tmp_path / "roadnet.json")
    assert again.intersections == net.intersections
    assert [(r.id, r.start, r.end, r.heading, r.length) for r in again.roads] == \
        [(r.id, r.start, r.end, r.heading, r.length) for r in net.roads]


def test_eleven_upstream_lanes_rejected():
    data = network_to_dict(build_grid(1, 1))
    # drop one approach road entirely: that intersection is left with 9 upstream lanes
    victim = next(r for r in data["roads"] if r["endIntersection"] == "intersection_1_1")
    data["roads"].remove(victim)
    with pytest.raises(TopologyError):
        network_from_dict(data)
    data = network_to_dict(build_grid(1, 1))
    victim = next(r for r in data["roads"] if r["endIntersection"] == "intersection_1_1")
    victim["lanes"] = victim["lanes"][:2]
    with pytest.raises(TopologyError):
        network_from_dict(data)


def test_malformed_files(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ParseError):
        load_network(p)
    p.write_text(json.dumps({"intersections": [{"id": "a"}], "roads": []}))
    with pytest.raises(ParseError):
        load_network(p)


def test_dangling_road_reference():
    data = network_to_dict(build_grid(1, 1))
    data["roads"][0]["startIntersection"] = "nowhere"
    with pytest.raises(TopologyError):
        network_from_dict(data)


def test_flow_files(tmp_path):
    net = build_grid(1, 1)
    route = ["road_0_1_0", "road_1_1_0"]
    (tmp_path / "flow.json").write_text(json.dumps([{"route": route, "startTime": 0, "endTime": 0, "interval": 1}]))
    flow = load_flow(tmp_path / "flow.json", net)
    assert len(flow) == 1
    assert flow.departures() == [(0.0, 0, tuple(route))]

    (tmp_path / "empty.json").write_text("[]")
    assert len(load_flow(tmp_path / "empty.json", net)) == 0

    (tmp_path / "bad.json").write_text(json.dumps([{"route": ["road_9_9_9"]}]))
    with pytest.raises(RouteError):
        load_flow(tmp_path / "bad.json", net)

    (tmp_path / "gap.json").write_text(json.dumps([{"route": ["road_0_1_0", "road_1_0_1"]}]))
    with pytest.raises(RouteError):
        load_flow(tmp_path / "gap.json", net)


def test_flow_roundtrip(tmp_path):
    net = build_grid(1, 1)
    flow = FlowSpec((FlowRule(("road_0_1_0", "road_1_1_1"), 0.0, 5.0, 20.0),))
    save_flow(flow, tmp_path / "f.json")
    assert load_flow(tmp_path / "f.json", net) == flow
    assert flow.rules[0].departures() == [0.0, 5.0, 10.0, 15.0, 20.0]
