"""Training loop, baselines, critique/tune gating, reports and checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import dqn, simcore
from .critique import CritiqueConfig, CritiqueLayer, PriorSpec
from .netmodel import (DIRECTIONS, LANE_KINDS, N_PHASES, FlowSpec, Network, build_grid, exit_side,
                       load_flow, load_network, random_flow)
from .simcore import SimConfig
from .tune import TuneConfig, tune

log = logging.getLogger(__name__)

CONTROLLERS = ("bct_aplight", "ap_dqn", "dqn", "fixedtime", "maxpressure", "random")
LEARNERS = ("bct_aplight", "ap_dqn", "dqn")


class ConfigError(ValueError):
    pass


class CheckpointMismatch(ValueError):
    pass


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class DemandSpec:
    """Poisson demand for synthetic grids: vehicles/s on N-S and E-W entry roads."""

    ns_rate: float = 0.2
    ew_rate: float = 0.07
    turn_probs: tuple[float, float, float] = (0.2, 0.6, 0.2)
    flow_seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    controller: str = "bct_aplight"
    scenario: str | None = None  # directory holding a roadnet and a flow file
    grid: tuple[int, int] = (1, 1)
    demand: DemandSpec = field(default_factory=DemandSpec)
    sim: SimConfig = field(default_factory=SimConfig)
    train: dqn.TrainConfig = field(default_factory=dqn.TrainConfig)
    critique: CritiqueConfig = field(default_factory=CritiqueConfig)
    prior: dict = field(default_factory=dict)  # PriorSpec field overrides
    tune: TuneConfig = field(default_factory=TuneConfig)
    episodes: int = 200
    ct_start: int = 10  # critique/tune active once episode > ct_start
    seed: int = 0
    checkpoint_every: int = 10
    out: str | None = None
    log_events: bool = False
    ct_diagnostics: bool = False

    def __post_init__(self):
        if self.controller not in CONTROLLERS:
            raise ConfigError(f"unknown controller {self.controller!r}; choose from {CONTROLLERS}")
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        if len(self.grid) != 2 or min(self.grid) < 1:
            raise ConfigError("grid must be (rows, cols) with both >= 1")
        unknown = set(self.prior) - {f.name for f in dataclasses.fields(PriorSpec)}
        if unknown:
            raise ConfigError(f"unknown prior keys: {sorted(unknown)}")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        nested = {"demand": DemandSpec, "sim": SimConfig, "critique": CritiqueConfig, "tune": TuneConfig}
        try:
            for key, sub in nested.items():
                if key in data:
                    data[key] = _build(sub, data[key])
            if "train" in data:
                t = dict(data["train"])
                if "reward" in t:
                    t["reward"] = _build(dqn.RewardWeights, t["reward"])
                data["train"] = _build(dqn.TrainConfig, t)
            if "grid" in data:
                data["grid"] = tuple(data["grid"])
            unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
            if unknown:
                raise ConfigError(f"unknown config keys: {sorted(unknown)}")
            return cls(**data)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _build(cls, values):
    if isinstance(values, cls):
        return values
    values = dict(values)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    for f in dataclasses.fields(cls):
        if f.name in values and isinstance(values[f.name], list):
            values[f.name] = tuple(values[f.name])
    return cls(**values)


# ---------------------------------------------------------------- scenarios


def synthetic_scenario(rows: int, cols: int, demand: DemandSpec, horizon: float) -> tuple[Network, FlowSpec]:
    net = build_grid(rows, cols)
    rng = np.random.default_rng(demand.flow_seed)

    def rate(road):
        return demand.ns_rate if road.heading in ("N", "S") else demand.ew_rate

    return net, random_flow(net, rate, horizon, rng, demand.turn_probs)


def load_scenario(directory) -> tuple[Network, FlowSpec]:
    """Read a CityFlow-style directory: one ``*roadnet*.json`` plus one flow file."""
    d = Path(directory)
    roadnets = sorted(d.glob("*roadnet*.json"))
    if not roadnets:
        raise ConfigError(f"no *roadnet*.json in {d}")
    flows = [p for p in sorted(d.glob("*.json")) if p not in roadnets and "config" not in p.name.lower()]
    if not flows:
        raise ConfigError(f"no flow file in {d}")
    net = load_network(roadnets[0])
    return net, load_flow(flows[0], net)


def scenario_for(cfg: ExperimentConfig) -> tuple[Network, FlowSpec]:
    if cfg.scenario:
        return load_scenario(cfg.scenario)
    return synthetic_scenario(*cfg.grid, cfg.demand, cfg.sim.episode_seconds)


# ---------------------------------------------------------------- baselines


def movement_table(net: Network):
    """Per intersection: for each phase, the (upstream position, downstream positions) of its green through/left moves."""
    table = []
    for inter in net.intersections:
        per_phase = []
        for ph in inter.phases:
            moves = []
            for approach, kind in sorted(ph.green):
                pos = DIRECTIONS.index(approach) * 3 + LANE_KINDS.index(kind)
                side = DIRECTIONS.index(exit_side(approach, kind))
                moves.append((pos, [side * 3 + j for j in range(3)]))
            per_phase.append(moves)
        table.append(per_phase)
    return table


def max_pressure_phase(raw: simcore.RawObservation, moves) -> int:
    """Phase whose green movements carry the largest summed queue difference (lowest index on ties)."""
    best, best_p = None, -math.inf
    for k, phase_moves in enumerate(moves):
        p = sum(raw.up_waiting[u] - raw.down_waiting[d].mean() for u, d in phase_moves)
        if p > best_p:
            best, best_p = k + 1, p
    return best


# ---------------------------------------------------------------- run state


@dataclass
class EpisodeStats:
    episode: int
    epsilon: float
    rewards: list
    att: float
    aql: float
    awt: float
    loss: float
    ct_checks: int = 0
    rejects: int = 0
    overrides: int = 0
    switches: int = 0
    evaluation: bool = False

    @property
    def total_reward(self) -> float:
        return float(sum(self.rewards))

    def row(self) -> dict:
        d = {"episode": self.episode, "evaluation": int(self.evaluation), "epsilon": self.epsilon,
             "reward_total": self.total_reward}
        for i, r in enumerate(self.rewards):
            d[f"reward_{i}"] = r
        d.update(att=self.att, aql=self.aql, awt=self.awt, loss=self.loss, ct_checks=self.ct_checks,
                 rejects=self.rejects, overrides=self.overrides, switches=self.switches)
        return d


@dataclass
class RunReport:
    controller: str
    seed: int
    episodes: list = field(default_factory=list)
    final: dict = field(default_factory=dict)  # att/aql/awt/reward of the greedy evaluation episode
    ct: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    aborted: dict | None = None
    trace: list = field(default_factory=list)  # per episode: (steps, intersections) chosen phases

    def to_dict(self, include_wall_clock: bool = True) -> dict:
        d = {"controller": self.controller, "seed": self.seed,
             "episodes": [e.row() for e in self.episodes], "final": self.final, "ct": self.ct,
             "aborted": self.aborted}
        if include_wall_clock:
            d["wall_clock"] = self.wall_clock
        return d

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2))
        rows = [e.row() for e in self.episodes]
        if rows:
            with open(out / "episodes.csv", "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
                writer.writeheader()
                writer.writerows(rows)


Judge = Callable[[int, float, np.random.Generator], tuple]


class Agent:
    """Everything that persists across episodes of one run."""

    def __init__(self, cfg: ExperimentConfig, net: Network):
        self.cfg = cfg
        self.net = net
        n = len(net.intersections)
        seq = np.random.SeedSequence(cfg.seed)
        init, policy, replay, ct, pnet, sim = seq.spawn(6)
        self.rng_policy = np.random.default_rng(policy)
        self.rng_replay = np.random.default_rng(replay)
        self.rng_ct = np.random.default_rng(ct)
        self.rng_pnet = np.random.default_rng(pnet)
        self.sim_seed = int(sim.generate_state(1)[0])
        init_rng = np.random.default_rng(init)
        tc = cfg.train
        mode = "plain" if cfg.controller == "dqn" else "ap"
        self.qnet = dqn.QNet(init_rng, mode, tc.hidden, tc.head, tc.d_k)
        self.target = self.qnet.copy()
        self.pnet = dqn.PredictionNet(init_rng, tc.pred_hidden)
        self.buffer = dqn.ReplayBuffer(tc.buffer_capacity, n)
        self.critics = [CritiqueLayer(cfg.critique, cfg.prior) for _ in range(n)]
        self.moves = movement_table(net)
        self.fit_records: list = []

    @property
    def uses_ct(self) -> bool:
        return self.cfg.controller == "bct_aplight"

    @property
    def learns(self) -> bool:
        return self.cfg.controller in LEARNERS

    def nets(self) -> dict:
        return {"qnet": self.qnet, "target": self.target, "pnet": self.pnet}

    def save(self, path, episode: int) -> None:
        meta = {"config": self.cfg.to_dict(), "episode": episode, "config_hash": dqn.config_hash(self.cfg.to_dict())}
        dqn.save_checkpoint(path, self.nets(), self.buffer, meta)

    def load(self, path) -> dict:
        nets, hist, meta = dqn.load_checkpoint(path)
        mine = self.nets()
        for name, net in nets.items():
            if name not in mine or net.shapes() != mine[name].shapes():
                raise CheckpointMismatch(f"checkpoint network {name!r} does not match the configuration")
            mine[name].params = net.params
        if hist is not None:
            rewards, qhist = hist
            if len(rewards) != len(self.buffer.rewards):
                raise CheckpointMismatch("checkpoint histories are for a different number of intersections")
            self.buffer.rewards = [list(r) for r in rewards]
            self.buffer.qhist = [list(q) for q in qhist]
        return meta


def _ct_active(cfg: ExperimentConfig, episode: int) -> bool:
    # the evaluation episode is numbered episodes + 1, so it is gated only if training opened the gate
    return cfg.controller == "bct_aplight" and episode > cfg.ct_start


def run_episode(agent: Agent, net: Network, flow: FlowSpec, episode: int, evaluation: bool = False,
                judge: Judge | None = None, diag: list | None = None, log_events: bool = False):
    """One episode of Algorithm 1; returns (EpisodeStats, action trace, final SimState)."""
    cfg = agent.cfg
    tc = cfg.train
    sc = cfg.sim
    n = len(net.intersections)
    sim = simcore.reset(net, flow, sc, agent.sim_seed, log_events=log_events)
    eps = 0.0 if evaluation else dqn.epsilon(episode, tc)
    ct_on = _ct_active(cfg, episode)
    season = sc.actions_per_episode
    if ct_on and judge is None:
        for i, critic in enumerate(agent.critics):
            rec = critic.refit(agent.buffer.rewards[i], season, agent.rng_ct)
            if rec is not None:
                agent.fit_records.append(rec)
                if diag is not None:
                    diag.append({"kind": "fit", "episode": episode, "intersection": i,
                                 "order": asdict(rec.order), "acceptance": rec.acceptance,
                                 "converged": rec.converged, "n": rec.n,
                                 "bic": {str(tuple(asdict(o).values())): b for o, b in rec.bic_table.items()}})

    def default_judge(i, r_pred, rng):
        return agent.critics[i].judge(r_pred, rng)

    judge = judge or default_judge
    raws = [sim.observe(i) for i in range(n)]
    obs = [dqn.encode_observation(r) for r in raws]
    rewards = np.zeros(n)
    losses = []
    trace = []
    stats = EpisodeStats(episode, eps, [], 0.0, 0.0, 0.0, 0.0, evaluation=evaluation)
    fixed_phase = 0
    for step in range(sc.actions_per_episode):
        actions = []
        qs = []
        pred_inputs = []
        if agent.learns:
            qmat = agent.qnet.forward(np.stack(obs))[0]
        for i in range(n):
            cur = raws[i].phase
            ctl = cfg.controller
            if ctl in LEARNERS:
                q = qmat[i]
                phase, _ = dqn.select_action(q, eps, agent.rng_policy, cur)
                pin = dqn.encode_prediction_input(raws[i], q)
                if ct_on:
                    r_pred = dqn.predict_reward(agent.pnet, pin)
                    verdict, ci = judge(i, r_pred, agent.rng_ct)
                    stats.ct_checks += 1
                    rec = {"kind": "ct", "episode": episode, "step": step, "intersection": i,
                           "r_pred": r_pred, "intended": phase, "verdict": verdict,
                           "interval": None if ci is None else [ci.lower, ci.upper]}
                    if verdict == "reject":
                        stats.rejects += 1
                        res = tune(q, agent.buffer.q_history(i, cfg.tune.history_window), cfg.tune)
                        if res is not None:
                            rec["risks"] = res.risks.tolist()
                            rec["chosen"] = res.phase
                            if res.phase != phase:
                                stats.overrides += 1
                                phase = res.phase
                    if diag is not None:
                        diag.append(rec)
                qs.append(q)
                pred_inputs.append(pin)
            elif ctl == "fixedtime":
                phase = fixed_phase % N_PHASES + 1
            elif ctl == "maxpressure":
                phase = max_pressure_phase(raws[i], agent.moves[i])
            else:
                phase = int(agent.rng_policy.integers(N_PHASES)) + 1
            actions.append(phase)
        fixed_phase += 1
        switched = [sim.apply_action(i, a) for i, a in enumerate(actions)]
        stats.switches += sum(switched)
        through = np.zeros(n)
        for _ in range(sc.steps_per_action):
            rep = sim.step()
            through += rep.throughput
        r_step = np.array([dqn.reward(rep.queue[i], through[i], switched[i], tc.reward) for i in range(n)])
        rewards += r_step
        trace.append(actions)
        raws = [sim.observe(i) for i in range(n)]
        next_obs = [dqn.encode_observation(r) for r in raws]
        if agent.learns:
            for i in range(n):
                agent.buffer.record(i, r_step[i], qs[i])
                agent.critics[i].observe(r_step[i])
            if not evaluation:
                for i in range(n):
                    agent.buffer.push(obs[i], actions[i] - 1, r_step[i], next_obs[i], pred_inputs[i])
                if len(agent.buffer) >= tc.batch_size:
                    batch = agent.buffer.sample(tc.batch_size, agent.rng_replay)
                    losses.append(dqn.td_update(agent.qnet, agent.target, batch, tc))
                    dqn.soft_update(agent.target, agent.qnet, tc.tau)
                    if agent.uses_ct:
                        x, y = agent.buffer.sample_prediction(tc.batch_size, agent.rng_pnet)
                        dqn.prediction_update(agent.pnet, x, y, tc.pred_lr, tc.grad_clip)
        obs = next_obs
    att, aql, awt = sim.finalize_metrics()
    stats.rewards = rewards.tolist()
    stats.att, stats.aql, stats.awt = att, aql, awt
    stats.loss = float(np.mean(losses)) if losses else 0.0
    return stats, trace, sim


def train(cfg: ExperimentConfig, judge: Judge | None = None, scenario=None) -> RunReport:
    """Run ``cfg.episodes`` training episodes then one greedy evaluation episode."""
    t0 = time.perf_counter()
    net, flow = scenario if scenario is not None else scenario_for(cfg)
    agent = Agent(cfg, net)
    report = RunReport(cfg.controller, cfg.seed)
    out = Path(cfg.out) if cfg.out else None
    diag: list | None = [] if cfg.ct_diagnostics else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    episode = 0
    try:
        for episode in range(1, cfg.episodes + 1):
            stats, trace, _ = run_episode(agent, net, flow, episode, judge=judge, diag=diag)
            report.episodes.append(stats)
            report.trace.append(trace)
            log.info("episode %d reward %.2f att %.1f", episode, stats.total_reward, stats.att)
            if out and agent.learns and (episode % cfg.checkpoint_every == 0):
                agent.save(out / f"checkpoint_{episode:04d}.npz", episode)
        episode = cfg.episodes + 1
        stats, trace, sim = run_episode(agent, net, flow, episode, evaluation=True, judge=judge, diag=diag,
                                        log_events=cfg.log_events)
        report.episodes.append(stats)
        report.trace.append(trace)
        report.final = {"att": stats.att, "aql": stats.aql, "awt": stats.awt, "reward": stats.total_reward}
        if out and cfg.log_events:
            with open(out / "events.csv", "w") as fh:
                sim.write_event_log(fh)
        if out and agent.learns:
            agent.save(out / "checkpoint_final.npz", cfg.episodes)
    except Exception as exc:  # any component failure ends the run with what was collected
        log.exception("run aborted in episode %d", episode)
        report.aborted = {"episode": episode, "error": f"{type(exc).__name__}: {exc}"}
    checks = sum(e.ct_checks for e in report.episodes)
    rejects = sum(e.rejects for e in report.episodes)
    overrides = sum(e.overrides for e in report.episodes)
    report.ct = {"checks": checks, "rejects": rejects, "overrides": overrides,
                 "reject_rate": rejects / checks if checks else 0.0,
                 "override_rate": overrides / checks if checks else 0.0,
                 "fits": len(agent.fit_records),
                 "mcmc_nonconverged": sum(not r.converged for r in agent.fit_records)}
    report.wall_clock = time.perf_counter() - t0
    if out:
        report.write(out)
        if diag is not None:
            with open(out / "ct_diagnostics.jsonl", "w") as fh:
                for rec in diag:
                    fh.write(json.dumps(rec) + "\n")
    return report


def evaluate(checkpoint, scenario=None, seed: int | None = None, out=None) -> RunReport:
    """One greedy episode from a saved checkpoint on its own or another scenario."""
    _, _, meta = dqn.load_checkpoint(checkpoint)
    cfg = ExperimentConfig.from_dict(meta["config"])
    changes = {"out": out}
    if scenario is not None:
        changes["scenario"] = str(scenario)
    if seed is not None:
        changes["seed"] = seed
    cfg = cfg.replace(**changes)
    net, flow = scenario_for(cfg)
    agent = Agent(cfg, net)
    agent.load(checkpoint)
    t0 = time.perf_counter()
    stats, trace, sim = run_episode(agent, net, flow, cfg.episodes + 1, evaluation=True,
                                    log_events=cfg.log_events)
    report = RunReport(cfg.controller, cfg.seed, [stats],
                       {"att": stats.att, "aql": stats.aql, "awt": stats.awt, "reward": stats.total_reward},
                       {"checks": stats.ct_checks, "rejects": stats.rejects, "overrides": stats.overrides},
                       time.perf_counter() - t0, trace=[trace])
    if out:
        report.write(out)
    return report


def bench(controllers, grid=(1, 1), episodes: int = 20, seed: int = 0, base: ExperimentConfig | None = None,
          out=None) -> dict[str, RunReport]:
    base = base or ExperimentConfig()
    results = {}
    for ctl in controllers:
        sub = str(Path(out) / ctl) if out else None
        cfg = base.replace(controller=ctl, grid=tuple(grid), episodes=episodes, seed=seed, out=sub)
        results[ctl] = train(cfg)
    return results
