import numpy as np
import pytest

from argus_dl.argus.policy import attacker_verification_reply, collaborative_verify, random_trigger
from argus_dl.argus.similarity import TriggerCandidate, ssim_sim, topk_clip
from argus_dl.protocol import Kind, Message, VerifyReply

SHAPE = (1, 16, 16)
W = 5


def patch(r0, c0, size=3, value=1.0):
    v = np.zeros(SHAPE)
    v[:, r0:r0 + size, c0:c0 + size] = value
    return TriggerCandidate(v, v[0] != 0, 7, 1.0)


def reply(replier, asker, about, trig):
    return Message(Kind.TRIGGER_REPLY, replier, asker, VerifyReply(about, trig is not None, trig))


MINE = patch(13, 13)


def test_one_confirmation_rejects():
    reps = [reply(5, 0, 9, patch(13, 13))]
    assert ssim_sim(MINE, reps[0].payload.trigger, W) >= 0.42
    assert collaborative_verify(0, 9, MINE, reps, xi=0.42, kappa=1, window=W)


def test_all_not_suspicious_accepts():
    reps = [reply(j, 0, 9, None) for j in (4, 5, 6)]
    assert not collaborative_verify(0, 9, MINE, reps, xi=0.42, kappa=1, window=W)


def test_kappa_threshold():
    reps = [reply(4, 0, 9, patch(13, 13)), reply(5, 0, 9, patch(13, 13)), reply(6, 0, 9, None)]
    assert collaborative_verify(0, 9, MINE, reps, xi=0.42, kappa=2, window=W)
    assert not collaborative_verify(0, 9, MINE, reps, xi=0.42, kappa=3, window=W)


def test_dissimilar_reply_does_not_confirm():
    # sparse maps share a zero background, so even disjoint patches score well above 0
    far = patch(0, 0)
    assert ssim_sim(MINE, far, W) < 0.9 <= ssim_sim(MINE, patch(13, 13), W)
    assert not collaborative_verify(0, 9, MINE, [reply(5, 0, 9, far)], xi=0.9, kappa=1, window=W)


def test_replies_about_other_sender_or_for_other_asker_ignored():
    reps = [reply(5, 0, 8, patch(13, 13)), reply(5, 1, 9, patch(13, 13))]
    assert not collaborative_verify(0, 9, MINE, reps, xi=0.42, kappa=1, window=W)


def test_strict_target_mode():
    other = patch(13, 13)
    other = TriggerCandidate(other.values, other.mask, 3, 1.0)
    assert collaborative_verify(0, 9, MINE, [reply(5, 0, 9, other)], 0.42, 1, W)
    assert not collaborative_verify(0, 9, MINE, [reply(5, 0, 9, other)], 0.42, 1, W,
                                    strict_target=True)


def test_attacker_shields_and_frames():
    rng = np.random.default_rng(0)
    shield = attacker_verification_reply(1, 2, 0, {1, 2}, 13, SHAPE, rng)
    assert shield.kind is Kind.TRIGGER_REPLY and shield.payload.suspicious is False
    a = attacker_verification_reply(1, 3, 0, {1, 2}, 13, SHAPE, rng).payload
    b = attacker_verification_reply(1, 3, 0, {1, 2}, 13, SHAPE, rng).payload
    assert a.suspicious and b.suspicious
    assert np.count_nonzero(a.trigger.energy) == 13
    assert not np.array_equal(a.trigger.values, b.trigger.values)


def test_random_trigger_mask_discipline():
    rng = np.random.default_rng(1)
    for _ in range(20):
        t = random_trigger(SHAPE, 13, rng)
        assert t.mask.sum() == 13
        assert np.all(t.values[:, ~t.mask] == 0) and np.all(t.values[:, t.mask] != 0)
        assert np.abs(t.values).max() <= 1.0


def test_framing_alone_cannot_reject_when_kappa_exceeds_attackers():
    # two attackers frame an honest sender; the honest repliers see nothing
    rng = np.random.default_rng(2)
    for trial in range(200):
        mine = topk_clip(random_trigger(SHAPE, 13, rng), 13)
        reps = [attacker_verification_reply(a, 9, 0, {1, 2}, 13, SHAPE, rng) for a in (1, 2)]
        reps += [reply(h, 0, 9, None) for h in (4, 5, 6)]
        # even a threshold every framing reply clears cannot reach kappa = 3
        assert not collaborative_verify(0, 9, mine, reps, xi=-1.0, kappa=3, window=W)


@pytest.mark.parametrize("kappa", [1, 2])
def test_framing_counts_when_kappa_not_above_attackers(kappa):
    rng = np.random.default_rng(3)
    mine = random_trigger(SHAPE, 13, rng)
    reps = [attacker_verification_reply(a, 9, 0, {1, 2}, 13, SHAPE, rng) for a in (1, 2)]
    assert collaborative_verify(0, 9, mine, reps, xi=-1.0, kappa=kappa, window=W)
