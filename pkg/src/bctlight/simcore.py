"""Deterministic point-queue traffic simulator.

Each lane holds two FIFO groups: *running* vehicles still travelling toward
the stop line (free-flow time ``length / free_speed``) and *waiting* vehicles
queued at it. Green movements discharge queue heads at the saturation rate
when the receiving lane has room; phase changes go through yellow and
all-red, during which only right turns move.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from .netmodel import DIRECTIONS, LANE_KINDS, N_PHASES, FEEDERS, FlowSpec, Network

GREEN, YELLOW, ALL_RED = "green", "yellow", "all_red"


class PhaseOutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    step_seconds: float = 1.0
    min_action_duration: float = 30.0
    yellow: float = 3.0
    all_red: float = 2.0
    saturation_flow: float = 1.0  # vehicles per green second per movement
    vehicle_gap: float = 7.5
    free_speed: float = 11.0
    episode_seconds: float = 3600.0

    def __post_init__(self):
        for name in ("step_seconds", "min_action_duration", "yellow", "all_red",
                     "saturation_flow", "vehicle_gap", "free_speed", "episode_seconds"):
            if not getattr(self, name) > 0:
                raise ValueError(f"SimConfig.{name} must be positive")
        if self.min_action_duration <= self.yellow + self.all_red:
            raise ValueError("min_action_duration must exceed yellow + all_red")

    @property
    def steps_per_action(self) -> int:
        return int(round(self.min_action_duration / self.step_seconds))

    @property
    def actions_per_episode(self) -> int:
        return int(self.episode_seconds // self.min_action_duration)


@dataclass(frozen=True)
class StepReport:
    clock: float
    queue: tuple[int, ...]  # waiting vehicles on each intersection's upstream lanes
    running: tuple[int, ...]
    throughput: tuple[int, ...]  # vehicles discharged across each intersection this step
    entered: int
    exited: int


@dataclass(frozen=True)
class RawObservation:
    up_waiting: np.ndarray  # (12,) upstream lanes, approach-major
    up_running: np.ndarray
    down_waiting: np.ndarray  # (12,) downstream lanes, exit-side-major
    down_running: np.ndarray
    phase: int
    upstream: np.ndarray  # Q lane matrix (4, 3, 3): exit side x feeder kind x (wait, run, total)
    downstream: np.ndarray  # K lane matrix (4, 3, 3): exit side x lane x (wait, run, total)
    neighbor_queues: np.ndarray  # (4,) total upstream queue of the neighbour on each side


@dataclass
class _Signal:
    phase: int = 1
    stage: str = GREEN
    left: int = 0
    next_phase: int = 1


@dataclass
class SimState:
    net: Network
    flow: FlowSpec
    cfg: SimConfig
    rng: np.random.Generator
    event_log: list | None = None
    clock: float = 0.0
    steps: int = 0
    # per-lane
    lane_ids: list = field(default_factory=list)
    capacity: list = field(default_factory=list)
    travel: list = field(default_factory=list)
    running: list = field(default_factory=list)
    queue: list = field(default_factory=list)
    # per-vehicle
    v_lanes: list = field(default_factory=list)
    v_pos: list = field(default_factory=list)
    v_enter: list = field(default_factory=list)
    v_exit: list = field(default_factory=list)
    v_arrive: list = field(default_factory=list)
    v_qsince: list = field(default_factory=list)
    v_wait: list = field(default_factory=list)
    # bookkeeping
    signals: list = field(default_factory=list)
    departures: list = field(default_factory=list)
    next_departure: int = 0
    pending: dict = field(default_factory=dict)
    injected: int = 0
    exited: int = 0
    queued_total: int = 0
    queue_step_sum: float = 0.0

    # ------------------------------------------------------------ setup

    def _build(self) -> None:
        net, cfg = self.net, self.cfg
        self.lane_ids = [ln.id for r in net.roads for ln in r.lanes]
        self._lane_index = {lid: i for i, lid in enumerate(self.lane_ids)}
        lanes = [ln for r in net.roads for ln in r.lanes]
        self.capacity = [max(1, int(math.floor(ln.length / cfg.vehicle_gap))) for ln in lanes]
        self.travel = [ln.length / cfg.free_speed for ln in lanes]
        self.running = [deque() for _ in lanes]
        self.queue = [deque() for _ in lanes]
        self._road_lane0 = {r.id: self._lane_index[r.lanes[0].id] for r in net.roads}

        self._up = []  # upstream lane indices per intersection
        self._down = []
        self._green = []  # per intersection: phase -> set of upstream positions with green
        self._rights = []
        for inter in net.intersections:
            self._up.append([self._lane_index[l] for l in inter.upstream_lanes])
            self._down.append([self._lane_index[l] for l in inter.downstream_lanes])
            rights = {a * 3 + 2 for a in range(4)}
            per_phase = {}
            for ph in inter.phases:
                green = {DIRECTIONS.index(a) * 3 + LANE_KINDS.index(k) for a, k in ph.green}
                per_phase[ph.index] = tuple(sorted(green | rights))
            self._green.append(per_phase)
            self._rights.append(tuple(sorted(rights)))
        self._inter_index = {inter.id: i for i, inter in enumerate(net.intersections)}
        self._neighbors = [
            [self._inter_index.get(nb) if nb is not None else None for nb in inter.neighbors]
            for inter in net.intersections
        ]
        self.signals = [_Signal() for _ in net.intersections]
        self.departures = self.flow.departures()
        self._n_yellow = int(round(cfg.yellow / cfg.step_seconds))
        self._n_all_red = int(round(cfg.all_red / cfg.step_seconds))
        self._n_sat = max(1, int(math.floor(cfg.saturation_flow * cfg.step_seconds)))

    # ------------------------------------------------------------ public API

    @property
    def n_intersections(self) -> int:
        return len(self.net.intersections)

    def intersection_index(self, intersection_id) -> int:
        if isinstance(intersection_id, int):
            return intersection_id
        return self._inter_index[intersection_id]

    def current_phase(self, intersection_id) -> int:
        return self.signals[self.intersection_index(intersection_id)].phase

    def apply_action(self, intersection_id, phase: int) -> bool:
        """Request ``phase``; returns True when this starts a yellow/all-red change."""
        if not (isinstance(phase, (int, np.integer)) and 1 <= phase <= N_PHASES):
            raise PhaseOutOfRange(f"phase must be in 1..{N_PHASES}, got {phase!r}")
        sig = self.signals[self.intersection_index(intersection_id)]
        target = sig.next_phase if sig.stage != GREEN else sig.phase
        if int(phase) == target:
            return False
        sig.next_phase = int(phase)
        if sig.stage == GREEN:
            sig.stage, sig.left = YELLOW, self._n_yellow
            if sig.left == 0:
                self._advance_signal(sig)
        return True

    def allowed_positions(self, i: int) -> tuple[int, ...]:
        """Upstream-lane positions (0..11) that may discharge at intersection ``i`` now."""
        sig = self.signals[i]
        if sig.stage == GREEN:
            return self._green[i][sig.phase]
        return self._rights[i]

    def lane_counts(self, lane_id: str) -> tuple[int, int]:
        li = self._lane_index[lane_id]
        return len(self.queue[li]), len(self.running[li])

    def in_network(self) -> int:
        return sum(len(r) + len(q) for r, q in zip(self.running, self.queue))

    # ------------------------------------------------------------ dynamics

    def _log(self, vid: int, lane: int, event: str) -> None:
        if self.event_log is not None:
            self.event_log.append((self.clock, vid, self.lane_ids[lane], event))

    def _advance_signal(self, sig: _Signal) -> None:
        while sig.stage != GREEN and sig.left <= 0:
            if sig.stage == YELLOW:
                sig.stage, sig.left = ALL_RED, self._n_all_red
            else:
                sig.stage, sig.phase = GREEN, sig.next_phase

    def _enter_lane(self, vid: int, lane: int) -> None:
        self.running[lane].append(vid)
        self.v_arrive[vid] = self.clock + self.travel[lane]

    def _spawn(self, route: tuple[str, ...]) -> int:
        net = self.net
        lanes = []
        for k, rid in enumerate(route):
            if k + 1 < len(route):
                kind = net.turn(rid, route[k + 1])
                offset = LANE_KINDS.index(kind)
            else:
                offset = int(self.rng.integers(3))
            lanes.append(self._road_lane0[rid] + offset)
        vid = len(self.v_lanes)
        self.v_lanes.append(lanes)
        self.v_pos.append(0)
        self.v_enter.append(None)
        self.v_exit.append(None)
        self.v_arrive.append(math.inf)
        self.v_qsince.append(None)
        self.v_wait.append(0.0)
        return vid

    def step(self) -> StepReport:
        t = self.clock
        dt = self.cfg.step_seconds
        running, queue, v_arrive, v_lanes, v_pos = self.running, self.queue, self.v_arrive, self.v_lanes, self.v_pos
        exited_now = 0

        # 1. vehicles reaching the stop line join the queue, or leave at route end
        for li in range(len(running)):
            run = running[li]
            while run and v_arrive[run[0]] <= t:
                vid = run.popleft()
                if v_pos[vid] == len(v_lanes[vid]) - 1:
                    self.v_exit[vid] = t
                    self.exited += 1
                    exited_now += 1
                    self._log(vid, li, "exit")
                else:
                    queue[li].append(vid)
                    self.v_qsince[vid] = t
                    self.queued_total += 1
                    self._log(vid, li, "queue")

        # 2. discharge green movements
        n_int = len(self._up)
        throughput = [0] * n_int
        cap = self.capacity
        for i in range(n_int):
            allowed = self.allowed_positions(i)
            ups = self._up[i]
            for pos in allowed:
                li = ups[pos]
                q = queue[li]
                moved = 0
                while q and moved < self._n_sat:
                    vid = q[0]
                    nxt = v_lanes[vid][v_pos[vid] + 1]
                    if len(running[nxt]) + len(queue[nxt]) >= cap[nxt]:
                        break
                    q.popleft()
                    self.v_wait[vid] += t - self.v_qsince[vid]
                    self.v_qsince[vid] = None
                    self.queued_total -= 1
                    self._log(vid, li, "depart")
                    v_pos[vid] += 1
                    self._enter_lane(vid, nxt)
                    self._log(vid, nxt, "enter")
                    moved += 1
                throughput[i] += moved

        # 3. inject due vehicles; a full entry lane defers them
        deps = self.departures
        while self.next_departure < len(deps) and deps[self.next_departure][0] <= t:
            _, _, route = deps[self.next_departure]
            self.next_departure += 1
            vid = self._spawn(route)
            self.pending.setdefault(v_lanes[vid][0], deque()).append(vid)
        entered_now = 0
        for li in list(self.pending):
            pend = self.pending[li]
            while pend and len(running[li]) + len(queue[li]) < cap[li]:
                vid = pend.popleft()
                self.v_enter[vid] = t
                self.injected += 1
                entered_now += 1
                self._enter_lane(vid, li)
                self._log(vid, li, "enter")
            if not pend:
                del self.pending[li]

        # 4. queued vehicles that did not move this step are waiting
        self.queue_step_sum += self.queued_total * dt

        for sig in self.signals:
            if sig.stage != GREEN:
                sig.left -= 1
                self._advance_signal(sig)

        self.steps += 1
        self.clock = t + dt
        return StepReport(
            clock=self.clock,
            queue=tuple(sum(len(queue[l]) for l in ups) for ups in self._up),
            running=tuple(sum(len(running[l]) for l in ups) for ups in self._up),
            throughput=tuple(throughput),
            entered=entered_now,
            exited=exited_now,
        )

    def observe(self, intersection_id) -> RawObservation:
        i = self.intersection_index(intersection_id)
        ups, downs = self._up[i], self._down[i]
        up_w = np.array([len(self.queue[l]) for l in ups], dtype=float)
        up_r = np.array([len(self.running[l]) for l in ups], dtype=float)
        dn_w = np.array([len(self.queue[l]) for l in downs], dtype=float)
        dn_r = np.array([len(self.running[l]) for l in downs], dtype=float)
        feeders = np.asarray(FEEDERS)
        upstream = np.stack([up_w[feeders], up_r[feeders], up_w[feeders] + up_r[feeders]], axis=-1)
        dw, dr = dn_w.reshape(4, 3), dn_r.reshape(4, 3)
        downstream = np.stack([dw, dr, dw + dr], axis=-1)
        nbq = np.zeros(4)
        for s, j in enumerate(self._neighbors[i]):
            if j is not None:
                nbq[s] = sum(len(self.queue[l]) for l in self._up[j])
        return RawObservation(up_w, up_r, dn_w, dn_r, self.signals[i].phase, upstream, downstream, nbq)

    def finalize_metrics(self) -> tuple[float, float, float]:
        """(ATT, AQL, AWT); vehicles still in the network are censored at the current clock."""
        end = self.clock
        travel, waits = [], []
        for vid, enter in enumerate(self.v_enter):
            if enter is None:
                continue
            ex = self.v_exit[vid]
            travel.append((ex if ex is not None else end) - enter)
            w = self.v_wait[vid]
            if self.v_qsince[vid] is not None:
                w += end - self.v_qsince[vid]
            waits.append(w)
        att = float(np.mean(travel)) if travel else 0.0
        awt = float(np.mean(waits)) if waits else 0.0
        aql = self.queue_step_sum / (self.steps * self.cfg.step_seconds) if self.steps else 0.0
        return att, float(aql), awt

    def write_event_log(self, fh: TextIO) -> None:
        for t, vid, lane, event in self.event_log or ():
            fh.write(f"{t:g} {vid} {lane} {event}\n")


def reset(net: Network, flow: FlowSpec, cfg: SimConfig, seed: int, log_events: bool = False) -> SimState:
    state = SimState(net=net, flow=flow, cfg=cfg, rng=np.random.default_rng(seed),
                     event_log=[] if log_events else None)
    state._build()
    return state


def apply_action(state: SimState, intersection_id, phase: int) -> bool:
    return state.apply_action(intersection_id, phase)


def step(state: SimState) -> StepReport:
    return state.step()


def observe(state: SimState, intersection_id) -> RawObservation:
    return state.observe(intersection_id)


def finalize_metrics(state: SimState) -> tuple[float, float, float]:
    return state.finalize_metrics()


def metrics_from_events(events, end_time: float, steps: int, step_seconds: float = 1.0) -> tuple[float, float, float]:
    """Recompute (ATT, AQL, AWT) from an event log alone."""
    enter, exit_, qsince = {}, {}, {}
    wait: dict[int, float] = {}
    queued_at: dict[float, int] = {}
    for t, vid, _lane, event in events:
        if event == "enter" and vid not in enter:
            enter[vid] = t
            wait[vid] = 0.0
        elif event == "exit":
            exit_[vid] = t
        elif event == "queue":
            qsince[vid] = t
            queued_at[t] = queued_at.get(t, 0) + 1
        elif event == "depart":
            wait[vid] += t - qsince.pop(vid)
            queued_at[t] = queued_at.get(t, 0) - 1
    for vid, t0 in qsince.items():
        wait[vid] += end_time - t0
    if not enter:
        att = awt = 0.0
    else:
        att = float(np.mean([exit_.get(v, end_time) - t0 for v, t0 in enter.items()]))
        awt = float(np.mean([wait[v] for v in enter]))
    level, total = 0, 0.0
    for k in range(steps):
        level += queued_at.get(k * step_seconds, 0)
        total += level * step_seconds
    aql = total / (steps * step_seconds) if steps else 0.0
    return att, aql, awt


def read_event_log(fh: TextIO) -> list[tuple[float, int, str, str]]:
    out = []
    for line in fh:
        t, vid, lane, event = line.split()
        out.append((float(t), int(vid), lane, event))
    return out
