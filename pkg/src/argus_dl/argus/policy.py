"""The full per-round ARGUS decision procedure and attacker reply behaviour."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from ..defense import (
    ACCEPTED, REJECTED_STATE, REJECTED_VERIFIED, Defense, RoundDecisions, SimPair,
)
from ..protocol import Kind, Message, VerifyReply
from .detect import DetectConfig, detect_many
from .similarity import TriggerCandidate, ssim_sim, topk_clip
from .trust import Thresholds, TrustLedger, TrustState


@dataclass(frozen=True)
class ArgusConfig:
    detect: DetectConfig = DetectConfig()
    k: int = 13
    window: int = 5
    xi: float = 0.5
    kappa: int = 1
    thresholds: Thresholds = Thresholds()
    strict_target: bool = False


def collaborative_verify(flagger: int, sender: int, my_trigger: TriggerCandidate,
                         replies: list[Message], xi: float, kappa: int, window: int,
                         strict_target: bool = False) -> bool:
    """True when at least ``kappa`` peers returned a trigger similar to ours."""
    confirmations = 0
    for msg in replies:
        if msg.kind is not Kind.TRIGGER_REPLY or msg.receiver != flagger:
            continue
        rep: VerifyReply = msg.payload
        if rep is None or rep.about != sender or not rep.suspicious or rep.trigger is None:
            continue
        if strict_target and rep.trigger.target != my_trigger.target:
            continue
        if ssim_sim(my_trigger, rep.trigger, window) >= xi:
            confirmations += 1
    return confirmations >= kappa


def random_trigger(shape: tuple[int, int, int], k: int, rng: np.random.Generator) -> TriggerCandidate:
    """A uniformly placed ``k``-pixel trigger with nonzero values in [-1, 1]."""
    c, h, w = shape
    mask = np.zeros(h * w, dtype=bool)
    mask[rng.choice(h * w, size=min(k, h * w), replace=False)] = True
    mask = mask.reshape(h, w)
    mags = 1.0 - rng.random((c, h, w))  # (0, 1]
    signs = np.where(rng.random((c, h, w)) < 0.5, -1.0, 1.0)
    values = np.where(mask, mags * signs, 0.0)
    return TriggerCandidate(values, mask, int(rng.integers(0, 1 << 16)), 1.0)


def attacker_verification_reply(replier: int, about: int, asker: int, attackers,
                                k: int, shape: tuple[int, int, int],
                                rng: np.random.Generator) -> Message:
    """Shield co-attackers, frame honest nodes with a fresh random trigger."""
    if about in attackers:
        rep = VerifyReply(about, False, None)
    else:
        rep = VerifyReply(about, True, random_trigger(shape, k, rng))
    return Message(Kind.TRIGGER_REPLY, replier, asker, rep)


class ArgusDefense(Defense):
    name = "argus"

    def __init__(self, cfg: ArgusConfig):
        self.cfg = cfg

    def setup(self, world) -> None:
        for i in world.honest:
            world.nodes[i].trust = TrustLedger(world.graph.neighbors(i), self.cfg.thresholds)

    def _detections(self, world, half: dict, pairs: dict) -> dict:
        det = {}
        for j in sorted(pairs):
            detectors = pairs[j]
            res = detect_many(half[j], [world.nodes[i].val for i in detectors], self.cfg.detect)
            det.update({(i, j): r for i, r in zip(detectors, res)})
        return det

    def _reply(self, world, replier: int, about: int, asker: int, det: dict) -> tuple[Message, bool]:
        """Reply message and whether it came from a fresh honest detection."""
        world.bus.send(Message(Kind.TRIGGER_QUERY, asker, replier, about))
        fresh = False
        if replier in world.attacker_set:
            msg = world.attacker_reply(replier, about, asker)
        else:
            entry = world.nodes[replier].trust.entries[about]
            if entry.state is TrustState.EJECTED:
                rep = VerifyReply(about, entry.cached_trigger is not None, entry.cached_trigger)
            else:
                d = det[(replier, about)]
                fresh = d.flagged
                rep = VerifyReply(about, d.flagged,
                                  topk_clip(d.best, self.cfg.k) if d.flagged else None)
            msg = Message(Kind.TRIGGER_REPLY, replier, asker, rep)
        return world.bus.send(msg), fresh

    def decide(self, world, t: int, half: dict) -> RoundDecisions:
        cfg = self.cfg
        graph = world.graph
        out = RoundDecisions()
        pairs = defaultdict(list)
        for i in world.honest:
            for j in graph.neighbors(i):
                if world.nodes[i].trust.state(j) is not TrustState.EJECTED:
                    pairs[j].append(i)
        det = self._detections(world, half, pairs)

        pending = []
        for i in world.honest:
            ledger = world.nodes[i].trust
            for j in graph.neighbors(i):
                state = ledger.state(j)
                if state is TrustState.EJECTED:
                    out.decisions[(i, j)] = REJECTED_STATE
                    out.flagged[(i, j)] = False
                    continue
                d = det[(i, j)]
                out.flagged[(i, j)] = d.flagged
                reject, mine = False, None
                if d.flagged:
                    mine = topk_clip(d.best, cfg.k)
                    out.flag_events.append((i, j, mine))
                    replies = []
                    for l in graph.neighbors(j):
                        if l == i:
                            continue
                        msg, fresh = self._reply(world, l, j, i, det)
                        replies.append(msg)
                        if fresh:
                            out.sim_pairs.append(SimPair(
                                t, j, i, l, ssim_sim(mine, msg.payload.trigger, cfg.window),
                                j in world.attacker_set))
                    reject = collaborative_verify(i, j, mine, replies, cfg.xi, cfg.kappa,
                                                  cfg.window, cfg.strict_target)
                if reject:
                    out.decisions[(i, j)] = REJECTED_VERIFIED
                elif state is TrustState.TRUSTED:
                    out.decisions[(i, j)] = ACCEPTED
                else:
                    out.decisions[(i, j)] = REJECTED_STATE
                pending.append((i, j, reject, mine))

        # simultaneous rounds: states move only after every decision is made
        for i, j, reject, mine in pending:
            old, new = world.nodes[i].trust.update(j, reject, mine)
            if old is not new:
                out.transitions.append((i, j, old.name.lower(), new.name.lower()))
        return out
