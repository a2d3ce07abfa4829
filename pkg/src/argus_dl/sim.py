"""Synchronous decentralized-SGD round engine under backdoor attack."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import baselines
from .argus.detect import DetectConfig, validation_split
from .argus.policy import ArgusConfig, ArgusDefense, attacker_verification_reply
from .argus.similarity import CalibrationResult, calibrate_xi, default_k, default_window
from .argus.trust import Thresholds
from .config import RunConfig
from .data import (
    Dataset, TriggerSpec, apply_trigger, dirichlet_partition, gen_synthetic, load_idx, poison,
    split_stratified,
)
from .defense import ACCEPTED, Defense, RoundDecisions, rescaled_average
from .graph import Graph, gen_complete, gen_er, gen_regular, read_edge_list
from .nn import Arch, ModelParams, backward, init_model, predict, sgd_step
from .protocol import Bus, Kind, Message, VerifyReply

log = logging.getLogger(__name__)

HONEST, ATTACKER = "honest", "attacker"


@dataclass
class NodeState:
    id: int
    role: str
    model: ModelParams
    train_data: Dataset
    val: Dataset | None
    rng: np.random.Generator
    clean_data: Dataset | None = None   # attackers keep their unpoisoned copy
    trust: object = None


@dataclass
class RoundRecord:
    round: int
    ca: np.ndarray | None
    asr: np.ndarray | None
    asr_undefined: np.ndarray | None
    decisions: dict
    counts: dict
    transitions: list
    sim_pairs: list
    trust_counts: list
    flag_events: list = field(default_factory=list)

    def rejection_rate(self) -> float:
        n = len(self.decisions)
        return sum(d != ACCEPTED for d in self.decisions.values()) / n if n else 0.0


@dataclass
class World:
    cfg: RunConfig
    graph: Graph
    nodes: list[NodeState]
    test: Dataset
    trigger: TriggerSpec
    attacker_set: frozenset
    defense: Defense
    bus: Bus
    attack_rng: np.random.Generator
    k: int
    window: int
    xi: float | None
    calibration: CalibrationResult | None = None
    round: int = 0

    @property
    def honest(self) -> list[int]:
        return [n.id for n in self.nodes if n.role == HONEST]

    @property
    def attackers(self) -> list[int]:
        return sorted(self.attacker_set)

    def silent(self, t: int) -> bool:
        s = self.cfg.schedule
        return s.silence_stop is not None and s.silence_stop <= t < s.silence_resume

    def attacker_reply(self, replier: int, about: int, asker: int) -> Message:
        if self.silent(self.round):
            return Message(Kind.TRIGGER_REPLY, replier, asker, VerifyReply(about, False, None))
        return attacker_verification_reply(replier, about, asker, self.attacker_set, self.k,
                                           self.test.shape, self.attack_rng)


# --------------------------------------------------------------------------
# setup


def _int_seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1)[0])


def build_graph(cfg: RunConfig, seed: int) -> Graph:
    tp = cfg.topology
    if tp.family == "regular":
        return gen_regular(tp.n, tp.degree, seed)
    if tp.family == "er":
        return gen_er(tp.n, tp.p_edge, seed)
    if tp.family == "complete":
        return gen_complete(tp.n)
    return read_edge_list(tp.edge_list, tp.n)


def build_dataset(cfg: RunConfig, seed: int) -> tuple[Dataset, Dataset]:
    d = cfg.dataset
    if d.source == "synthetic":
        ds = gen_synthetic(d.n_classes, d.height, d.width, d.n_per_class, d.noise_std, seed)
    else:
        ds = load_idx(d.images_path, d.labels_path, d.n_classes)
    return split_stratified(ds, d.test_fraction, seed + 1)


def trigger_spec(cfg: RunConfig) -> TriggerSpec:
    a = cfg.attack
    return TriggerSpec(a.trigger_shape, a.trigger_size, a.trigger_position, a.trigger_value,
                       a.target_label)


def resolved_k_window(cfg: RunConfig, height: int, width: int) -> tuple[int, int]:
    df = cfg.defense
    return (df.k or default_k(height, width), df.window or default_window(height))


def detect_config(cfg: RunConfig, k: int) -> DetectConfig:
    df = cfg.defense
    return DetectConfig(df.gamma, df.refine_steps, df.eta_mask, df.mask_budget or k,
                        df.mask_smoothing)


def make_defense(cfg: RunConfig, k: int, window: int, xi: float | None) -> Defense:
    df = cfg.defense
    if df.kind == "argus":
        return ArgusDefense(ArgusConfig(detect_config(cfg, k), k, window, xi, df.kappa,
                                        Thresholds(df.k1, df.k2, df.k3), df.strict_target))
    if df.kind == "none":
        return baselines.NoDefense()
    if df.kind == "oracle":
        return baselines.OracleDefense()
    if df.kind == "local_only":
        return baselines.LocalOnlyDefense(detect_config(cfg, k), k)
    if df.kind == "multi_krum":
        return baselines.MultiKrumDefense(df.krum_r)
    if df.kind == "p2pcd":
        return baselines.P2PCDDefense(baselines.P2PCDConfig(df.c_neigh, df.c_local,
                                                            df.agreement_rounds))
    return baselines.BaDFLDefense(baselines.BaDFLConfig(df.badfl_alpha, df.badfl_q,
                                                        df.badfl_gamma), cfg.schedule.lr)


def build_world(cfg: RunConfig, calibration: CalibrationResult | None = None) -> World:
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    s_data, s_graph, s_part, s_place, s_init, s_nodes, s_attack = root.spawn(7)

    train, test = build_dataset(cfg, _int_seed(s_data))
    graph = build_graph(cfg, _int_seed(s_graph))
    n = graph.n
    if n != cfg.topology.n:
        raise ValueError(f"graph has {n} nodes, config says {cfg.topology.n}")
    part = dirichlet_partition(train, n, cfg.dataset.alpha, _int_seed(s_part))

    a = cfg.attack
    if a.attacker_ids:
        if any(not 0 <= j < n for j in a.attacker_ids):
            raise ValueError("attacker id out of range")
        attackers = frozenset(a.attacker_ids)
    else:
        attackers = frozenset(int(j) for j in
                              np.random.default_rng(s_place).choice(n, a.m, replace=False))
    spec = trigger_spec(cfg)
    spec.footprint(*train.shape[1:])

    d = cfg.dataset
    arch = Arch(d.arch, train.shape, train.n_classes, hidden=d.hidden, channels=d.channels)
    theta0 = init_model(arch, np.random.default_rng(s_init))

    nodes = []
    for i, ss in enumerate(s_nodes.spawn(n)):
        rng = np.random.default_rng(ss)
        local = train.subset(part.node_indices[i])
        if i in attackers:
            poisoned = poison(local, spec, a.p_poison, int(rng.integers(1 << 31)))
            nodes.append(NodeState(i, ATTACKER, theta0, poisoned, None, rng, clean_data=local))
        else:
            rest, val = validation_split(local, rng)
            nodes.append(NodeState(i, HONEST, theta0, rest, val, rng))

    k, window = resolved_k_window(cfg, *train.shape[1:])
    xi = cfg.defense.xi
    if cfg.defense.kind == "argus" and xi is None:
        if calibration is None:
            df = cfg.defense
            calibration = calibrate_xi(train.shape[1], train.shape[2], k, window, df.calib_sigma,
                                       df.calib_samples, df.calib_quantile, cfg.seed)
        xi = calibration.xi

    if cfg.defense.kind == "argus":
        for i in range(n):
            if i in attackers:
                continue
            good = sum(j not in attackers for j in graph.neighbors(i))
            if good < cfg.defense.kappa + 1:
                log.warning("node %d has %d honest neighbours, fewer than kappa + 1 = %d",
                            i, good, cfg.defense.kappa + 1)

    world = World(cfg, graph, nodes, test, spec, attackers, make_defense(cfg, k, window, xi),
                  Bus(graph), np.random.default_rng(s_attack), k, window, xi, calibration)
    world.defense.setup(world)
    return world


# --------------------------------------------------------------------------
# one round


def local_train(model: ModelParams, data: Dataset, steps: int, batch: int, lr: float,
                rng: np.random.Generator) -> ModelParams:
    for _ in range(steps):
        idx = rng.choice(len(data), size=min(batch, len(data)), replace=False)
        model = sgd_step(model, backward(model, data.images[idx], data.labels[idx]).param_grads, lr)
    return model


def eval_metrics(model: ModelParams, test: Dataset, spec: TriggerSpec,
                 triggered: np.ndarray | None = None) -> tuple[float, float, bool]:
    """Clean accuracy and attack success rate.

    ASR counts only non-target test images the model gets right without the
    trigger; when there are none it is reported as 0 with the flag set.
    """
    pred = predict(model, test.images)
    ca = float(np.mean(pred == test.labels))
    eligible = (test.labels != spec.target_label) & (pred == test.labels)
    if not eligible.any():
        return ca, 0.0, True
    xt = triggered[eligible] if triggered is not None else apply_trigger(test.images[eligible], spec)
    return ca, float(np.mean(predict(model, xt) == spec.target_label)), False


def run_round(world: World, t: int, evaluate: bool = True,
              triggered: np.ndarray | None = None) -> RoundRecord:
    cfg = world.cfg
    s = cfg.schedule
    world.round = t
    silent = world.silent(t)
    half = {}
    for node in world.nodes:
        data = node.clean_data if node.role == ATTACKER and silent else node.train_data
        h = local_train(node.model, data, s.local_steps, s.batch_size, s.lr, node.rng)
        if node.role == HONEST:
            h = world.defense.transform_half(world, node.id, h)
        half[node.id] = h

    for i, j in world.graph.edges():
        world.bus.send(Message(Kind.MODEL_UPDATE, i, j))
        world.bus.send(Message(Kind.MODEL_UPDATE, j, i))

    decided: RoundDecisions = world.defense.decide(world, t, half)

    new_models = {}
    for node in world.nodes:
        i = node.id
        nbrs = world.graph.neighbors(i)
        if node.role == ATTACKER:
            # attackers keep their own model; while silent they gossip like honest nodes
            new_models[i] = rescaled_average(half[i], [half[j] for j in nbrs]) if silent else half[i]
        else:
            accepted = [j for j in nbrs if decided.decisions[(i, j)] == ACCEPTED]
            new_models[i] = world.defense.aggregate(world, i, t, half, accepted)
    world.defense.end_round()
    for node in world.nodes:
        node.model = new_models[node.id]

    counts = {"tp": 0, "fp": 0, "tn": 0, "fn": 0}
    for (i, j), dec in decided.decisions.items():
        bad, rej = j in world.attacker_set, dec != ACCEPTED
        counts[("t" if bad == rej else "f") + ("p" if rej else "n")] += 1

    ca = asr = undef = None
    if evaluate:
        res = [eval_metrics(n.model, world.test, world.trigger, triggered) for n in world.nodes]
        ca = np.array([r[0] for r in res])
        asr = np.array([r[1] for r in res])
        undef = np.array([r[2] for r in res])
    trust_counts = [n.trust.counts() if n.trust is not None else None for n in world.nodes]
    return RoundRecord(t, ca, asr, undef, decided.decisions, counts, decided.transitions,
                       decided.sim_pairs, trust_counts, decided.flag_events)


@dataclass
class RunResult:
    world: World
    records: list[RoundRecord]


def run_world(world: World, keep_flag_events: bool = False) -> RunResult:
    s = world.cfg.schedule
    triggered = apply_trigger(world.test.images, world.trigger)
    records = []
    for t in range(s.rounds):
        evaluate = (t + 1) % s.eval_every == 0 or t == s.rounds - 1
        rec = run_round(world, t, evaluate, triggered)
        if not keep_flag_events:
            rec.flag_events = []
        records.append(rec)
    return RunResult(world, records)


def simulate(cfg: RunConfig, calibration: CalibrationResult | None = None,
             keep_flag_events: bool = False) -> RunResult:
    return run_world(build_world(cfg, calibration), keep_flag_events)
