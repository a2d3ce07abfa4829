"""Per-neighbour trust state machine (Trusted -> Suspected -> Ejected)."""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .similarity import TriggerCandidate


class TrustState(enum.IntEnum):
    TRUSTED = 0
    SUSPECTED = 1
    EJECTED = 2


@dataclass(frozen=True)
class Thresholds:
    k1: int = 2  # consecutive confirmed rejections to become Suspected
    k2: int = 1  # rejections inside the window that trigger ejection
    k3: int = 3  # window length, in rounds

    def __post_init__(self):
        if self.k1 < 1 or not 1 <= self.k2 <= self.k3:
            raise ValueError("need k1 >= 1 and 1 <= k2 <= k3")


@dataclass(frozen=True)
class TrustEntry:
    state: TrustState = TrustState.TRUSTED
    consecutive_rejections: int = 0
    window_rounds: int = 0
    window_rejections: int = 0
    cached_trigger: TriggerCandidate | None = None


def trust_update(entry: TrustEntry, confirmed_reject: bool, th: Thresholds) -> TrustEntry:
    """Advance one round given whether this round's update was a confirmed rejection.

    Ejected is absorbing. While Suspected, every round counts towards the
    ``k3``-round window and ejection happens as soon as ``k2`` confirmed
    rejections have been seen inside it.
    """
    if entry.state is TrustState.EJECTED:
        return entry
    if entry.state is TrustState.TRUSTED:
        if not confirmed_reject:
            return replace(entry, consecutive_rejections=0)
        run = entry.consecutive_rejections + 1
        if run >= th.k1:
            return replace(entry, state=TrustState.SUSPECTED, consecutive_rejections=0,
                           window_rounds=0, window_rejections=0)
        return replace(entry, consecutive_rejections=run)
    rounds = entry.window_rounds + 1
    rejects = entry.window_rejections + int(confirmed_reject)
    if rejects >= th.k2:
        return replace(entry, state=TrustState.EJECTED, window_rounds=rounds,
                       window_rejections=rejects)
    if rounds >= th.k3:
        return replace(entry, state=TrustState.TRUSTED, consecutive_rejections=0,
                       window_rounds=0, window_rejections=0)
    return replace(entry, window_rounds=rounds, window_rejections=rejects)


def run_string(decisions, th: Thresholds) -> list[TrustState]:
    """States after each round for a sequence of confirmed-reject flags."""
    entry, out = TrustEntry(), []
    for d in decisions:
        entry = trust_update(entry, bool(d), th)
        out.append(entry.state)
    return out


def ejection_rounds(rejections: np.ndarray, th: Thresholds) -> np.ndarray:
    """Vectorised twin of :func:`trust_update` over many independent strings.

    ``rejections`` is a ``(trials, T)`` boolean array. Returns the 1-based
    round at which each trial became Ejected, or 0 if it never did.
    """
    trials, horizon = rejections.shape
    state = np.zeros(trials, dtype=np.int8)
    run = np.zeros(trials, dtype=np.int64)
    wr = np.zeros(trials, dtype=np.int64)
    wj = np.zeros(trials, dtype=np.int64)
    ejected_at = np.zeros(trials, dtype=np.int64)
    for t in range(horizon):
        z = rejections[:, t]
        trusted = state == TrustState.TRUSTED
        susp = state == TrustState.SUSPECTED

        run = np.where(trusted & z, run + 1, np.where(trusted, 0, run))
        to_susp = trusted & (run >= th.k1)

        wr = np.where(susp, wr + 1, wr)
        wj = np.where(susp, wj + z, wj)
        to_eject = susp & (wj >= th.k2)
        back = susp & ~to_eject & (wr >= th.k3)

        state = np.where(to_susp, TrustState.SUSPECTED, state)
        state = np.where(to_eject, TrustState.EJECTED, state)
        state = np.where(back, TrustState.TRUSTED, state)
        reset = to_susp | back
        run = np.where(reset, 0, run)
        wr = np.where(reset, 0, wr)
        wj = np.where(reset, 0, wj)
        ejected_at = np.where(to_eject, t + 1, ejected_at)
    return ejected_at


class TrustLedger:
    """One node's view of its neighbours; the owning node is the only writer."""

    def __init__(self, neighbors, thresholds: Thresholds):
        self.thresholds = thresholds
        self.entries: dict[int, TrustEntry] = {j: TrustEntry() for j in neighbors}

    def state(self, j: int) -> TrustState:
        return self.entries[j].state

    def update(self, j: int, confirmed_reject: bool,
               trigger: TriggerCandidate | None = None) -> tuple[TrustState, TrustState]:
        old = self.entries[j]
        new = trust_update(old, confirmed_reject, self.thresholds)
        if confirmed_reject and trigger is not None and old.state is not TrustState.EJECTED:
            new = replace(new, cached_trigger=trigger)
        self.entries[j] = new
        return old.state, new.state

    def counts(self) -> dict[str, int]:
        out = {s.name.lower(): 0 for s in TrustState}
        for e in self.entries.values():
            out[e.state.name.lower()] += 1
        return out
