import numpy as np
import pytest

from argus_dl.config import RunConfig, with_overrides
from argus_dl.defense import REJECTED_POLICY, Defense, RoundDecisions
from argus_dl.nn import ModelParams
from argus_dl.protocol import Kind, LocalityError, Message
from argus_dl.sim import build_world, eval_metrics, local_train, run_round, simulate

SMALL = {"dataset.arch": "mlp", "dataset.n_per_class": "30", "dataset.hidden": "16",
         "attack.trigger_value": "1.0", "schedule.rounds": "3", "schedule.eval_every": "1",
         "defense.calib_samples": "1000", "topology.n": "8", "seed": "4"}


def small(**extra) -> RunConfig:
    return with_overrides(RunConfig(), dict(SMALL, **extra))


def constant(world, value):
    arch = world.nodes[0].model.arch
    return ModelParams.unflatten(arch, np.full(arch.n_params, float(value)))


def test_two_node_all_accept_averages():
    cfg = small(**{"topology.family": "complete", "topology.n": "2", "attack.m": "0",
                   "defense.kind": "none", "schedule.local_steps": "0"})
    w = build_world(cfg)
    w.nodes[0].model = constant(w, 2.0)
    w.nodes[1].model = constant(w, 4.0)
    run_round(w, 0, evaluate=False)
    for node in w.nodes:
        assert np.array_equal(node.model.flatten(), np.full(node.model.arch.n_params, 3.0))


def test_all_accept_conserves_mean_on_regular_graph():
    cfg = small(**{"attack.m": "0", "defense.kind": "none", "schedule.local_steps": "0"})
    w = build_world(cfg)
    rng = np.random.default_rng(0)
    for node in w.nodes:
        node.model = constant(w, rng.standard_normal())
    before = np.mean([n.model.flatten() for n in w.nodes], axis=0)
    run_round(w, 0, evaluate=False)
    after = np.mean([n.model.flatten() for n in w.nodes], axis=0)
    assert np.allclose(before, after, atol=1e-12)


class RejectAll(Defense):
    name = "reject_all"

    def decide(self, world, t, half):
        out = RoundDecisions()
        for i in world.honest:
            for j in world.graph.neighbors(i):
                out.decisions[(i, j)] = REJECTED_POLICY
        return out


def test_reject_all_keeps_half_step_model():
    w = build_world(small(**{"defense.kind": "none"}))
    ref = build_world(small(**{"defense.kind": "none"}))
    w.defense = RejectAll()
    run_round(w, 0, evaluate=False)
    s = w.cfg.schedule
    for i in w.honest:
        n = ref.nodes[i]
        half = local_train(n.model, n.train_data, s.local_steps, s.batch_size, s.lr, n.rng)
        assert np.array_equal(w.nodes[i].model.flatten(), half.flatten())


def test_oracle_never_accepts_attackers():
    res = simulate(small(**{"defense.kind": "oracle"}))
    atk = res.world.attacker_set
    for rec in res.records:
        for (i, j), dec in rec.decisions.items():
            assert (dec == "accepted") == (j not in atk)


def test_none_never_rejects():
    res = simulate(small(**{"defense.kind": "none"}))
    assert all(r.rejection_rate() == 0.0 for r in res.records)


def test_attacker_ignores_neighbours():
    a = build_world(small(**{"defense.kind": "none"}))
    b = build_world(small(**{"defense.kind": "none"}))
    for n in b.nodes:
        if n.id not in b.attacker_set:
            n.model = constant(b, 0.5)
    run_round(a, 0, evaluate=False)
    run_round(b, 0, evaluate=False)
    for j in a.attacker_set:
        assert np.array_equal(a.nodes[j].model.flatten(), b.nodes[j].model.flatten())


def test_attacker_drifts_from_honest_mean():
    w = build_world(small(**{"defense.kind": "oracle", "dataset.n_per_class": "60"}))
    dist = []
    for t in range(10):
        run_round(w, t, evaluate=False)
        hon = np.mean([w.nodes[i].model.flatten() for i in w.honest], axis=0)
        dist.append(np.mean([np.linalg.norm(w.nodes[j].model.flatten() - hon)
                             for j in w.attackers]))
    assert dist[-1] > dist[4] > dist[0]


def test_same_seed_same_records():
    r1 = simulate(small())
    r2 = simulate(small())
    for a, b in zip(r1.records, r2.records):
        assert a.decisions == b.decisions
        assert np.array_equal(a.ca, b.ca) and np.array_equal(a.asr, b.asr)


def test_bus_enforces_locality():
    w = build_world(small(**{"defense.kind": "none"}))
    g = w.graph
    far = next(j for j in range(g.n) if w.bus.dist[0, j] == 2)
    with pytest.raises(LocalityError):
        w.bus.send(Message(Kind.MODEL_UPDATE, 0, far))
    w.bus.send(Message(Kind.TRIGGER_QUERY, 0, far))
    with pytest.raises(LocalityError):
        w.bus.send(Message(Kind.TRIGGER_QUERY, 0, 0))


def test_argus_round_uses_only_local_messages():
    res = simulate(small(**{"defense.kind": "argus"}))
    assert res.world.bus.counts[Kind.MODEL_UPDATE] == 2 * len(res.world.graph.edges()) * 3


def test_asr_exclusion_rule():
    w = build_world(small(**{"defense.kind": "none"}))
    arch = w.nodes[0].model.arch
    vec = np.zeros(arch.n_params)
    const = ModelParams.unflatten(arch, vec)
    w_last, b_last = const.layers[-1]
    b_last[w.trigger.target_label] = 10.0
    ca, asr, undefined = eval_metrics(const, w.test, w.trigger)
    assert asr == 0.0 and undefined
    assert ca == pytest.approx(np.mean(w.test.labels == w.trigger.target_label))


def test_asr_is_one_when_trigger_always_flips(monkeypatch):
    from argus_dl import sim
    w = build_world(small(**{"defense.kind": "none"}))
    t = w.trigger.target_label
    fake = {"calls": 0}

    def predict(model, x):
        fake["calls"] += 1
        # clean pass returns the truth, triggered pass returns the target
        return w.test.labels.copy() if fake["calls"] == 1 else np.full(len(x), t)
    monkeypatch.setattr(sim, "predict", predict)
    ca, asr, undefined = eval_metrics(w.nodes[0].model, w.test, w.trigger)
    assert ca == 1.0 and asr == 1.0 and not undefined


def test_silence_window_equal_bounds_is_noop():
    base = simulate(small(**{"defense.kind": "none"}))
    same = simulate(small(**{"defense.kind": "none", "schedule.silence_stop": "1",
                             "schedule.silence_resume": "1"}))
    for a, b in zip(base.records, same.records):
        assert np.array_equal(a.asr, b.asr) and np.array_equal(a.ca, b.ca)


def test_silent_attackers_shield_everyone():
    w = build_world(small(**{"defense.kind": "argus", "schedule.silence_stop": "0",
                             "schedule.silence_resume": "2"}))
    honest = w.honest[0]
    assert w.silent(0) and w.silent(1) and not w.silent(2)
    w.round = 0
    assert not w.attacker_reply(w.attackers[0], honest, 0).payload.suspicious
    w.round = 2
    assert w.attacker_reply(w.attackers[0], honest, 0).payload.suspicious
