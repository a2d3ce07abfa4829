import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from argus_dl.argus.similarity import (
    TriggerCandidate, box_mean, calibrate_xi, default_k, default_window, gaussian_blur,
    nearest_rank_quantile, ssim_maps, ssim_sim, topk_clip, topk_clip_map, trigger_similarity,
)


def cand(values, target=0):
    values = np.asarray(values, dtype=float)
    if values.ndim == 2:
        values = values[None]
    return TriggerCandidate(values, np.any(values != 0, axis=0), target)


def reference_ssim(a, b, w):
    """Direct per-pixel loop with explicit zero-padded windows."""
    h, wd = a.shape
    r = w // 2
    big = max(a.max(), b.max())
    if big == 0:
        return 1.0
    c1, c2 = (0.01 * big) ** 2, (0.03 * big) ** 2
    pa, pb = np.pad(a, r), np.pad(b, r)
    total = 0.0
    for i in range(h):
        for j in range(wd):
            wa = pa[i:i + w, j:j + w].ravel()
            wb = pb[i:i + w, j:j + w].ravel()
            ma, mb = wa.mean(), wb.mean()
            va, vb = ((wa - ma) ** 2).mean(), ((wb - mb) ** 2).mean()
            cv = ((wa - ma) * (wb - mb)).mean()
            total += (2 * ma * mb + c1) * (2 * cv + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    return total / (h * wd)


def test_topk_keeps_largest():
    out = topk_clip(cand([[3, 1], [0.5, 2]]), 2)
    assert out.mask.tolist() == [[True, False], [False, True]]
    assert out.values[0].tolist() == [[3, 0], [0, 2]]


def test_topk_ties_row_major():
    out = topk_clip_map(np.array([[1.0, 1.0], [1.0, 0.0]]), 2)
    assert out.tolist() == [[1, 1], [0, 0]]


def test_topk_large_k_is_identity():
    c = cand(np.arange(16.0).reshape(4, 4))
    assert np.array_equal(topk_clip(c, 100).values, c.values)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 30))
def test_topk_idempotent(seed, k):
    c = cand(np.random.default_rng(seed).uniform(-1, 1, (2, 8, 8)))
    once = topk_clip(c, k)
    twice = topk_clip(once, k)
    assert np.array_equal(once.values, twice.values)
    assert once.mask.sum() == min(k, 64)


def test_candidate_rejects_values_outside_mask():
    with pytest.raises(ValueError):
        TriggerCandidate(np.ones((1, 2, 2)), np.zeros((2, 2), bool), 0)


def test_box_mean_matches_loop():
    x = np.random.default_rng(0).random((7, 9))
    got = box_mean(x, 3)
    p = np.pad(x, 1)
    want = np.array([[p[i:i + 3, j:j + 3].mean() for j in range(9)] for i in range(7)])
    assert np.allclose(got, want, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([3, 5, 7]))
def test_ssim_matches_reference(seed, w):
    rng = np.random.default_rng(seed)
    a = topk_clip_map(rng.random((12, 12)), 10)
    b = topk_clip_map(rng.random((12, 12)), 10)
    assert abs(float(ssim_maps(a, b, w)) - reference_ssim(a, b, w)) <= 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_ssim_identity_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    a, b = cand(rng.uniform(-1, 1, (16, 16))), cand(rng.uniform(-1, 1, (16, 16)))
    assert trigger_similarity(a, a, 13, 5) == pytest.approx(1.0, abs=1e-12)
    s = trigger_similarity(a, b, 13, 5)
    assert s == pytest.approx(trigger_similarity(b, a, 13, 5), abs=1e-12)
    assert -1 - 1e-12 <= s <= 1 + 1e-12


def test_ssim_all_zero_is_one():
    z = TriggerCandidate.empty((1, 8, 8))
    assert ssim_sim(z, z, 3) == 1.0


def test_blur_preserves_interior_mass():
    z = np.zeros((31, 31))
    z[15, 15] = 1.0
    assert gaussian_blur(z, 2.0).sum() == pytest.approx(1.0, abs=1e-12)


def test_nearest_rank_quantile():
    v = np.arange(1, 101, dtype=float)
    assert nearest_rank_quantile(v, 0.99) == 99.0
    assert nearest_rank_quantile(v, 0.5) == 50.0


def test_defaults():
    assert default_k(16, 16) == 13 and default_k(32, 32) == 51
    assert [default_window(h) for h in (16, 28, 32)] == [5, 9, 11]


def test_calibration_validation():
    with pytest.raises(ValueError):
        calibrate_xi(16, 16, 13, 5, 2.0, samples=10)
    with pytest.raises(ValueError):
        calibrate_xi(16, 16, 13, 5, 2.0, quantile=1.0)


def test_calibration_is_seeded():
    a = calibrate_xi(16, 16, 13, 5, 2.0, samples=1000, seed=3)
    b = calibrate_xi(16, 16, 13, 5, 2.0, samples=1000, seed=3)
    assert a == b and a.mean_sim < a.xi
