"""In-process synchronous message bus with locality checks."""
from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass
from typing import Any

import numpy as np

from .graph import Graph


class Kind(enum.Enum):
    MODEL_UPDATE = "ModelUpdate"
    TRIGGER_QUERY = "TriggerQuery"
    TRIGGER_REPLY = "TriggerReply"


@dataclass(frozen=True)
class Message:
    kind: Kind
    sender: int
    receiver: int
    payload: Any = None


@dataclass(frozen=True)
class VerifyReply:
    """Answer to a trigger query about node ``about``."""

    about: int
    suspicious: bool
    trigger: Any = None  # TriggerCandidate when suspicious


class LocalityError(RuntimeError):
    pass


def hop_distances(g: Graph) -> np.ndarray:
    """All-pairs BFS hop counts; -1 marks unreachable pairs."""
    n = g.n
    dist = np.full((n, n), -1, dtype=np.int64)
    for s in range(n):
        dist[s, s] = 0
        frontier = [s]
        while frontier:
            nxt = []
            for u in frontier:
                for v in g.neighbors(u):
                    if dist[s, v] < 0:
                        dist[s, v] = dist[s, u] + 1
                        nxt.append(v)
            frontier = nxt
    return dist


class Bus:
    """Delivers messages immediately; rejects anything outside the allowed radius."""

    def __init__(self, graph: Graph):
        self.dist = hop_distances(graph)
        self.counts: Counter = Counter()

    def send(self, msg: Message) -> Message:
        d = self.dist[msg.sender, msg.receiver]
        limit = 1 if msg.kind is Kind.MODEL_UPDATE else 2
        if not 1 <= d <= limit:
            raise LocalityError(f"{msg.kind.value} {msg.sender}->{msg.receiver} spans {d} hops")
        self.counts[msg.kind] += 1
        return msg
