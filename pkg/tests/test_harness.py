import json

import numpy as np
import pytest

from bctlight import harness
from bctlight.__main__ import main
from bctlight.critique import CritiqueConfig
from bctlight.dqn import TrainConfig
from bctlight.harness import (
    CheckpointMismatch, ConfigError, DemandSpec, ExperimentConfig, RunReport, evaluate, load_scenario, train,
)
from bctlight.netmodel import FlowSpec, build_grid, save_flow, save_network
from bctlight.simcore import SimConfig


def tiny(controller="ap_dqn", **kw):
    base = dict(controller=controller, episodes=3, sim=SimConfig(episode_seconds=300),
                train=TrainConfig(batch_size=8, buffer_capacity=500, hidden=(16, 16), pred_hidden=(16, 8)),
                critique=CritiqueConfig(n_draws=100, burn_in=100, min_history=20, order_every=1),
                demand=DemandSpec(0.15, 0.1), ct_start=1)
    base.update(kw)
    return ExperimentConfig(**base)


def always(verdict):
    def judge(i, r_pred, rng):
        return verdict, None
    return judge


def test_fixedtime_cycles_phases():
    rep = train(tiny("fixedtime", episodes=1, sim=SimConfig(episode_seconds=600)))
    trace = rep.trace[-1]
    assert [a[0] for a in trace] == [t % 8 + 1 for t in range(20)]
    assert rep.ct["checks"] == 0


def test_maxpressure_not_worse_than_random():
    mp, rnd = [], []
    for seed in range(5):
        common = dict(episodes=1, seed=seed, demand=DemandSpec(0.25, 0.12, flow_seed=seed),
                      sim=SimConfig(episode_seconds=900))
        mp.append(train(tiny("maxpressure", **common)).final["att"])
        rnd.append(train(tiny("random", **common)).final["att"])
    assert np.mean(mp) <= np.mean(rnd)
    assert sum(a <= b for a, b in zip(mp, rnd)) >= 4


@pytest.mark.parametrize("controller", ["ap_dqn", "bct_aplight", "dqn"])
def test_fixed_seed_gives_identical_report(controller):
    a = train(tiny(controller))
    b = train(tiny(controller))
    assert a.aborted is None
    assert a.to_dict(include_wall_clock=False) == b.to_dict(include_wall_clock=False)
    assert a.trace == b.trace


def test_empty_flow_single_episode():
    rep = train(tiny("bct_aplight", episodes=1, demand=DemandSpec(0.0, 0.0), ct_start=10))
    assert (rep.final["att"], rep.final["aql"], rep.final["awt"]) == (0.0, 0.0, 0.0)
    # with no traffic the only reward term left is the switch penalty
    assert rep.final["reward"] == pytest.approx(-0.5 * rep.episodes[-1].switches)
    assert rep.ct["checks"] == 0 and rep.ct["fits"] == 0
    assert len(rep.episodes) == 2 and rep.episodes[-1].evaluation


def test_metrics_are_the_simulator_triple():
    cfg = tiny("maxpressure")
    net, flow = harness.scenario_for(cfg)
    agent = harness.Agent(cfg, net)
    stats, _, sim = harness.run_episode(agent, net, flow, 1)
    assert (stats.att, stats.aql, stats.awt) == sim.finalize_metrics()


def test_always_accept_reproduces_plain_trace():
    base = tiny("ap_dqn", episodes=4, seed=5)
    plain = train(base)
    gated = train(base.replace(controller="bct_aplight"), judge=always("accept"))
    assert gated.ct["checks"] > 0 and gated.ct["rejects"] == 0
    assert gated.trace == plain.trace
    assert [e.rewards for e in gated.episodes] == [e.rewards for e in plain.episodes]


def test_overrides_bounded_by_rejects(tmp_path):
    rep = train(tiny("bct_aplight", episodes=4, ct_diagnostics=True, out=str(tmp_path)), judge=always("reject"))
    assert rep.ct["rejects"] == rep.ct["checks"] > 0
    assert rep.ct["overrides"] <= rep.ct["rejects"]
    lines = [json.loads(x) for x in (tmp_path / "ct_diagnostics.jsonl").read_text().splitlines()]
    assert sum(r["verdict"] == "reject" for r in lines) == rep.ct["rejects"]
    assert all(("chosen" in r) or r["verdict"] == "accept" for r in lines if r["kind"] == "ct")


def test_real_critique_runs_and_logs_fits(tmp_path):
    rep = train(tiny("bct_aplight", episodes=5, ct_diagnostics=True, out=str(tmp_path)))
    assert rep.aborted is None
    assert rep.ct["fits"] > 0 and rep.ct["overrides"] <= rep.ct["rejects"] <= rep.ct["checks"]
    kinds = {json.loads(x)["kind"] for x in (tmp_path / "ct_diagnostics.jsonl").read_text().splitlines()}
    assert kinds == {"fit", "ct"}


def test_component_failure_aborts_with_partial_report():
    calls = {"n": 0}

    def broken(i, r_pred, rng):
        calls["n"] += 1
        if calls["n"] > 15:
            raise RuntimeError("boom")
        return "accept", None

    rep = train(tiny("bct_aplight", episodes=4), judge=broken)
    assert rep.aborted is not None and "boom" in rep.aborted["error"]
    assert 1 <= len(rep.episodes) < 5


def test_checkpoint_and_evaluate(tmp_path):
    rep = train(tiny("bct_aplight", episodes=3, checkpoint_every=1, out=str(tmp_path / "run")))
    files = sorted(p.name for p in (tmp_path / "run").glob("checkpoint_*.npz"))
    assert files == ["checkpoint_0001.npz", "checkpoint_0002.npz", "checkpoint_0003.npz", "checkpoint_final.npz"]
    assert (tmp_path / "run" / "episodes.csv").exists()
    ck = tmp_path / "run" / "checkpoint_final.npz"
    a = evaluate(ck, seed=0)
    b = evaluate(ck, seed=0)
    assert a.final == b.final and a.trace == b.trace
    assert a.episodes[0].ct_checks > 0

    # without the critique the checkpoint replays the greedy episode that ended training
    plain = train(tiny("ap_dqn", episodes=3, out=str(tmp_path / "plain")))
    assert evaluate(tmp_path / "plain" / "checkpoint_final.npz").final == plain.final

    empty = tmp_path / "empty"
    empty.mkdir()
    save_network(build_grid(1, 1), empty / "roadnet.json")
    save_flow(FlowSpec(), empty / "flow.json")
    z = evaluate(ck, scenario=empty, seed=0)
    assert (z.final["att"], z.final["aql"], z.final["awt"]) == (0.0, 0.0, 0.0)

    other = tiny("bct_aplight", train=TrainConfig(hidden=(8, 8)))
    agent = harness.Agent(other, build_grid(1, 1))
    with pytest.raises(CheckpointMismatch):
        agent.load(ck)
    with pytest.raises(CheckpointMismatch):
        harness.Agent(tiny("bct_aplight"), build_grid(2, 2)).load(ck)


def test_config_roundtrip_and_errors(tmp_path):
    cfg = tiny("dqn", grid=(2, 2), prior={"scale_coef": 0.2})
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert ExperimentConfig.from_file(path) == cfg
    assert ExperimentConfig.from_dict({"episodes": 7}).episodes == 7
    for bad in ({"controller": "nope"}, {"episodes": 0}, {"colour": 1}, {"sim": {"yellow": -1}},
                {"train": {"speed": 2}}, {"prior": {"nu": 1}}, {"grid": [0, 1]}):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(bad)


def test_prior_overrides_reach_the_critique():
    agent = harness.Agent(tiny("bct_aplight", prior={"scale_coef": 0.01}), build_grid(1, 1))
    assert agent.critics[0].prior_overrides == {"scale_coef": 0.01}


def test_load_cityflow_directory(tmp_path):
    save_network(build_grid(3, 4), tmp_path / "roadnet_3_4.json")
    net, flow = harness.synthetic_scenario(3, 4, DemandSpec(), 300)
    save_flow(flow, tmp_path / "anon_3_4_jinan_real.json")
    (tmp_path / "config.json").write_text("{}")
    net2, flow2 = load_scenario(tmp_path)
    assert len(net2.intersections) == 12 and flow2 == flow
    with pytest.raises(ConfigError):
        load_scenario(tmp_path / "missing")


def test_cli_train_eval_bench(tmp_path, capsys):
    cfg = tiny("ap_dqn", episodes=2)
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps(cfg.to_dict()))
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--seed", "3", "--out", str(out), "--log-events"]) == 0
    printed = json.loads(capsys.readouterr().out)
    report = json.loads((out / "report.json").read_text())
    assert printed["final"] == report["final"] and report["seed"] == 3
    assert (out / "events.csv").exists()
    assert main(["eval", "--checkpoint", str(out / "checkpoint_final.npz")]) == 0
    assert json.loads(capsys.readouterr().out)["final"]["att"] > 0
    assert main(["bench", "--controllers", "fixedtime,random", "--grid", "1x1", "--episodes", "1",
                 "--config", str(cfg_path)]) == 0
    table = capsys.readouterr().out.splitlines()
    assert table[0].split()[:2] == ["controller", "ATT"] and len(table) == 3
    assert main(["bench", "--controllers", "warp"]) == 2


def test_run_report_write(tmp_path):
    rep = train(tiny("random", episodes=2))
    rep.write(tmp_path)
    rows = (tmp_path / "episodes.csv").read_text().splitlines()
    assert len(rows) == 4 and rows[0].startswith("episode,evaluation")
    assert isinstance(rep, RunReport)
