"""Common interface for per-round defense policies."""
from __future__ import annotations

from dataclasses import dataclass, field

from .nn import ModelParams

ACCEPTED = "accepted"
REJECTED_VERIFIED = "rejected_local+collab"
REJECTED_STATE = "rejected_state"
REJECTED_POLICY = "rejected_policy"
DECISIONS = (ACCEPTED, REJECTED_VERIFIED, REJECTED_STATE, REJECTED_POLICY)


@dataclass
class SimPair:
    """Similarity between two honest detectors' triggers for the same sender."""

    round: int
    sender: int
    flagger: int
    replier: int
    sim: float
    attacker_origin: bool


@dataclass
class RoundDecisions:
    decisions: dict = field(default_factory=dict)      # (receiver, sender) -> decision
    flagged: dict = field(default_factory=dict)        # (receiver, sender) -> bool
    transitions: list = field(default_factory=list)    # (receiver, sender, old, new)
    sim_pairs: list = field(default_factory=list)      # SimPair
    flag_events: list = field(default_factory=list)    # (receiver, sender, TriggerCandidate)


class Defense:
    """Base policy: accept everything and re-scale-average the accepted set."""

    name = "none"

    def setup(self, world) -> None:
        pass

    def transform_half(self, world, i: int, half: ModelParams) -> ModelParams:
        """Hook applied to an honest node's freshly trained model before sending."""
        return half

    def decide(self, world, t: int, half: dict) -> RoundDecisions:
        out = RoundDecisions()
        for i in world.honest:
            for j in world.graph.neighbors(i):
                out.decisions[(i, j)] = ACCEPTED
        return out

    def aggregate(self, world, i: int, t: int, half: dict, accepted: list[int]) -> ModelParams:
        return rescaled_average(half[i], [half[j] for j in accepted])

    def end_round(self) -> None:
        pass


def rescaled_average(own: ModelParams, accepted: list[ModelParams]) -> ModelParams:
    """Self plus accepted neighbours, uniformly weighted."""
    total = own
    for m in accepted:
        total = total + m
    return total / (len(accepted) + 1)
