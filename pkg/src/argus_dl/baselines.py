"""Reference defenses: Oracle, Local-only, Multi-Krum, P2PCD clipping, BaDFL correction."""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .argus.detect import DetectConfig, detect_many
from .argus.similarity import topk_clip
from .defense import ACCEPTED, REJECTED_POLICY, Defense, RoundDecisions
from .nn import ModelParams

log = logging.getLogger(__name__)


class NoDefense(Defense):
    name = "none"


class OracleDefense(Defense):
    """Knows the ground-truth roles and drops every attacker update."""

    name = "oracle"

    def decide(self, world, t, half):
        out = RoundDecisions()
        for i in world.honest:
            for j in world.graph.neighbors(i):
                out.decisions[(i, j)] = REJECTED_POLICY if j in world.attacker_set else ACCEPTED
        return out


class LocalOnlyDefense(Defense):
    """Rejects whatever local trigger detection flags, with no cross-checking."""

    name = "local_only"

    def __init__(self, detect: DetectConfig, k: int):
        self.detect = detect
        self.k = k

    def decide(self, world, t, half):
        out = RoundDecisions()
        pairs = defaultdict(list)
        for i in world.honest:
            for j in world.graph.neighbors(i):
                pairs[j].append(i)
        for j in sorted(pairs):
            res = detect_many(half[j], [world.nodes[i].val for i in pairs[j]], self.detect)
            for i, d in zip(pairs[j], res):
                out.flagged[(i, j)] = d.flagged
                out.decisions[(i, j)] = REJECTED_POLICY if d.flagged else ACCEPTED
                if d.flagged:
                    out.flag_events.append((i, j, topk_clip(d.best, self.k)))
        return out


# --------------------------------------------------------------------------
# Multi-Krum


def krum_scores(vectors: np.ndarray, r: int) -> np.ndarray:
    """Sum of squared distances to the ``len - r - 1`` closest other vectors."""
    n = len(vectors)
    sq = np.sum(vectors * vectors, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * vectors @ vectors.T, 0.0)
    np.fill_diagonal(d2, np.inf)
    m = n - r - 1
    return np.sort(d2, axis=1)[:, :m].sum(axis=1)


def multi_krum(received: dict[int, np.ndarray], r: int) -> list[int]:
    """Sender ids that survive after dropping the ``r`` highest-scoring updates."""
    ids = sorted(received)
    if r == 0:
        return ids
    if len(ids) <= r + 1:
        log.warning("neighbourhood of %d too small for r=%d; accepting all", len(ids), r)
        return ids
    scores = krum_scores(np.stack([np.asarray(received[j], dtype=np.float64).ravel()
                                   for j in ids]), r)
    # highest score first, ties go to the larger sender id so smaller ids are kept
    order = sorted(range(len(ids)), key=lambda a: (-scores[a], -ids[a]))
    dropped = {ids[a] for a in order[:r]}
    return [j for j in ids if j not in dropped]


class MultiKrumDefense(Defense):
    name = "multi_krum"

    def __init__(self, r: int | None = None):
        self.r = r

    def setup(self, world):
        if self.r is None:
            self.r = max(sum(j in world.attacker_set for j in world.graph.neighbors(i))
                         for i in range(world.graph.n))
        if self.r < 0 or self.r >= min(len(world.graph.neighbors(i)) for i in range(world.graph.n)):
            raise ValueError("multi_krum r must satisfy 0 <= r < smallest neighbourhood")

    def decide(self, world, t, half):
        out = RoundDecisions()
        for i in world.honest:
            nbrs = world.graph.neighbors(i)
            kept = set(multi_krum({j: half[j].flatten() for j in nbrs}, self.r))
            for j in nbrs:
                out.decisions[(i, j)] = ACCEPTED if j in kept else REJECTED_POLICY
        return out


# --------------------------------------------------------------------------
# P2PCD


@dataclass(frozen=True)
class P2PCDConfig:
    c_neigh: float = 0.1
    c_local: float = 1.0
    agreement_rounds: int = 10

    def __post_init__(self):
        if not 0 < self.c_neigh < self.c_local:
            raise ValueError("need 0 < c_neigh < c_local")


def clip_norm(delta: np.ndarray, bound: float) -> np.ndarray:
    norm = float(np.linalg.norm(delta))
    return delta if norm <= bound else delta * (bound / norm)


def p2pcd(own_delta: np.ndarray, neighbor_deltas: dict, t: int,
          cfg: P2PCDConfig) -> tuple[np.ndarray, dict]:
    """Norm-clip neighbour deltas to ``c_neigh`` and our own to ``c_local``,
    except during the initial agreement phase."""
    if t < cfg.agreement_rounds:
        return own_delta, dict(neighbor_deltas)
    return (clip_norm(own_delta, cfg.c_local),
            {j: clip_norm(d, cfg.c_neigh) for j, d in neighbor_deltas.items()})


class P2PCDDefense(Defense):
    """Accepts everything but bounds how far any single round can move a model."""

    name = "p2pcd"

    def __init__(self, cfg: P2PCDConfig):
        self.cfg = cfg
        self.prev_sent: dict[int, np.ndarray] = {}
        self.next_sent: dict[int, np.ndarray] = {}

    def aggregate(self, world, i, t, half, accepted):
        own_start = world.nodes[i].model.flatten()
        own_delta = half[i].flatten() - own_start
        cur = {j: half[j].flatten() for j in accepted}
        # a sender seen for the first time contributes a zero delta
        prev = {j: self.prev_sent.get(j, cur[j]) for j in accepted}
        own_c, nb_c = p2pcd(own_delta, {j: cur[j] - prev[j] for j in accepted}, t, self.cfg)
        total = own_start + own_c
        for j in accepted:
            total = total + prev[j] + nb_c[j]
        self.next_sent.update(cur)
        return ModelParams.unflatten(half[i].arch, total / (len(accepted) + 1))

    def end_round(self):
        self.prev_sent.update(self.next_sent)
        self.next_sent = {}


# --------------------------------------------------------------------------
# BaDFL


@dataclass(frozen=True)
class BaDFLConfig:
    alpha: float = 0.08
    q_clip: float = 0.1
    gamma: float | None = None  # defaults to the learning rate


def badfl_correct(x_prev: np.ndarray, x_curr: np.ndarray, x_tilde_next: np.ndarray,
                  gamma: float, alpha: float, q_clip: float) -> np.ndarray:
    """Curvature-based correction of a freshly trained model."""
    x_prev, x_curr, x_tilde_next = (np.asarray(a, dtype=np.float64)
                                    for a in (x_prev, x_curr, x_tilde_next))
    if not x_prev.shape == x_curr.shape == x_tilde_next.shape:
        raise ValueError("snapshots must share one shape")
    if gamma == 0 or alpha == 0:
        return x_tilde_next.copy()
    h = ((x_tilde_next - x_curr) - (x_curr - x_prev)) / gamma
    g = np.clip(1.0 - gamma * h, -q_clip, q_clip)
    return x_tilde_next - gamma * alpha * g


class BaDFLDefense(Defense):
    name = "badfl"

    def __init__(self, cfg: BaDFLConfig, lr: float):
        self.cfg = cfg
        self.gamma = lr if cfg.gamma is None else cfg.gamma
        self.prev: dict[int, np.ndarray] = {}

    def transform_half(self, world, i, half):
        curr = world.nodes[i].model.flatten()
        prev = self.prev.get(i, curr)
        self.prev[i] = curr
        fixed = badfl_correct(prev, curr, half.flatten(), self.gamma, self.cfg.alpha,
                              self.cfg.q_clip)
        return ModelParams.unflatten(half.arch, fixed)

