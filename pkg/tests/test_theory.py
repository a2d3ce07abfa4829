import math

import numpy as np
import pytest

from argus_dl.argus.trust import Thresholds
from argus_dl.graph import gen_regular, gossip_from_graph, jacobi_eigh
from argus_dl.theory import (
    TwoRateModel, beta_estimate, binomial_stderr, contraction_check, contraction_ratio, ejection_bounds,
    ejection_probability_bounds, expected_gram, expected_weights, mc_ejection,
    mc_ejection_frequency, mc_spectrum, mixing_constants, pi, psi, sample_mixing,
    spectrum_closed_form,
)

TH = Thresholds(2, 1, 3)


def eigs(g):
    return jacobi_eigh(gossip_from_graph(g))[0]


def test_pi_endpoints_and_example():
    assert pi(0.0, TH) == 0.0
    assert pi(1.0, TH) == 1.0
    assert pi(0.8, TH) == pytest.approx(0.64 * (1 - 0.008), abs=1e-12)
    assert round(pi(0.8, TH), 6) == 0.634880


def test_pi_monotone_on_grid():
    for th in (TH, Thresholds(1, 1, 1), Thresholds(3, 2, 4), Thresholds(2, 3, 3)):
        vals = [pi(p, th) for p in np.linspace(0, 1, 201)]
        assert np.all(np.diff(vals) >= -1e-15)


def test_pi_rejects_bad_probability():
    with pytest.raises(ValueError):
        pi(1.5, TH)


def test_pi_matches_fsm_from_fresh_start():
    # given a fresh Trusted state, the chance that a suspicion opened by the first
    # k1 rounds ends in ejection within the next k3 rounds is exactly pi(p)
    from argus_dl.argus.trust import ejection_rounds
    p = 0.6
    rng = np.random.default_rng(3)
    z = rng.random((200_000, TH.k1 + TH.k3)) < p
    hit = (ejection_rounds(z, TH) > 0) & z[:, :TH.k1].all(axis=1)
    freq = hit.mean()
    se = math.sqrt(freq * (1 - freq) / len(hit))
    assert abs(freq - pi(p, TH)) <= 3 * se


def test_ejection_bounds_examples():
    b = ejection_bounds(TwoRateModel(0.011, 0.2), 50)
    assert b.mal_survive_ub == pytest.approx((1 - 0.2 * 0.634880) ** 8, rel=1e-9)
    assert b.mal_survive_ub == pytest.approx(0.33735, abs=2e-4)
    assert b.honest_eject_ub == pytest.approx(48 * pi(0.011, TH), rel=1e-12)
    assert b.honest_eject_ub == pytest.approx(1.896e-4, rel=1e-3)
    assert b.mal_eject_lb == pytest.approx(1 - b.mal_survive_ub, rel=1e-12)


def test_short_horizon_has_zero_honest_bound():
    assert ejection_bounds(TwoRateModel(0.5, 0.5), TH.k1 + TH.k2 - 1).honest_eject_ub == 0.0


def test_mc_trivial_rates():
    assert mc_ejection_frequency(0.0, 50, TH, 10_000, 0)[0] == 0.0
    assert mc_ejection_frequency(1.0, TH.k1 + TH.k2, TH, 10_000, 0)[0] == 1.0


def test_binomial_stderr_floor():
    assert binomial_stderr(0, 100) == pytest.approx(math.sqrt(0.01 * 0.99 / 100))
    assert binomial_stderr(100, 100) == pytest.approx(binomial_stderr(0, 100), rel=1e-12)
    assert binomial_stderr(50, 100) == pytest.approx(0.05)


@pytest.mark.parametrize("p", [0.01, 0.1, 0.3, 0.8])
@pytest.mark.parametrize("horizon", [20, 50, 100])
def test_bounds_bracket_monte_carlo(p, horizon):
    lo, hi = ejection_probability_bounds(p, horizon, TH)
    freq, se = mc_ejection_frequency(p, horizon, TH, 20_000, 11)
    assert lo - 3 * se <= freq <= hi + 3 * se


def test_mc_ejection_report():
    r = mc_ejection(TwoRateModel(0.05, 0.2), 50, 10_000, 1)
    b = ejection_bounds(TwoRateModel(0.05, 0.2), 50)
    assert r.malicious >= b.mal_eject_lb - 3 * r.malicious_stderr
    assert r.honest <= b.honest_eject_ub + 3 * r.honest_stderr
    with pytest.raises(ValueError):
        mc_ejection(TwoRateModel(0.05, 0.2), 50, 100, 1)


def test_mixing_constants_limits():
    for d in (1, 2, 3, 5):
        a, b, c = mixing_constants(d, 0.0)
        assert a == pytest.approx(1 / (d + 1))
        assert b == pytest.approx(1 / (d + 1) ** 2)
        assert c == pytest.approx(0.0 if d == 1 else 1 / (d + 1) ** 2)
        assert mixing_constants(d, 1.0) == (1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        mixing_constants(0, 0.1)


def test_zero_failure_spectrum_is_w_squared():
    g = gen_regular(16, 3, 4)
    e = eigs(g)
    rep = spectrum_closed_form(3, 0.0, e)
    assert rep.rho == pytest.approx(max(e[1] ** 2, e[-1] ** 2), abs=1e-14)
    w = gossip_from_graph(g)
    assert np.allclose(expected_gram(g, 0.0), w @ w, atol=1e-14)


def test_full_failure_spectrum_is_identity():
    rep = spectrum_closed_form(3, 1.0, eigs(gen_regular(8, 3, 0)))
    assert rep.rho == 1.0 and rep.psi_mu2 == 1.0


def test_psi_top_eigenvalue_is_one_and_convex():
    for d, p in [(2, 0.1), (3, 0.3), (4, 0.6)]:
        a, b, c = mixing_constants(d, p)
        assert abs(psi(1.0, d, a, b, c) - 1.0) < 1e-12
        grid = psi(np.linspace(-1, 1, 101), d, a, b, c)
        assert np.all(np.diff(grid, 2) >= -1e-12)


def test_expected_gram_matches_sample_mean():
    g = gen_regular(8, 3, 2)
    s = sample_mixing(g, 0.3, 40_000, np.random.default_rng(0))
    emp = np.einsum("sij,sik->jk", s, s) / len(s)
    assert np.abs(emp - expected_gram(g, 0.3)).max() < 5e-3


def test_mc_spectrum_agrees_with_closed_form():
    g = gen_regular(16, 3, 7)
    rep = spectrum_closed_form(3, 0.3, eigs(g))
    l1, l2, se = mc_spectrum(g, 0.3, 10_000, 5)
    assert abs(l2 - rep.rho) <= 3 * se
    assert abs(l1 - 1.0) < 1e-3


def test_mc_spectrum_deterministic_case():
    g = gen_regular(8, 2, 1)
    w = gossip_from_graph(g)
    l1, l2, se = mc_spectrum(g, 0.0, 10_000, 0)
    assert se == pytest.approx(0.0, abs=1e-12)
    assert l1 == pytest.approx(1.0, abs=1e-10)
    assert l2 == pytest.approx(jacobi_eigh(w @ w)[0][1], abs=1e-10)


def test_expected_weights():
    assert expected_weights(3, 0.0) == (0.25, 0.25)
    assert expected_weights(3, 1.0) == (1.0, 0.0)
    q, off = expected_weights(3, 0.5)
    assert q == pytest.approx(0.46875)
    assert q + 3 * off == pytest.approx(1.0)
    assert expected_weights(3, 0.999999)[0] == pytest.approx(1.0, abs=1e-5)


def test_expected_self_weight_monte_carlo():
    g = gen_regular(16, 3, 0)
    s = sample_mixing(g, 0.5, 100_000 // 16, np.random.default_rng(3))
    diag = np.einsum("sii->si", s).ravel()
    se = diag.std(ddof=1) / math.sqrt(len(diag))
    assert abs(diag.mean() - 0.46875) <= 3 * se


def test_beta():
    g = gen_regular(16, 3, 0)
    assert beta_estimate(g, 0.0, 10_000, 0)[0] == pytest.approx(0.0, abs=1e-20)
    assert beta_estimate(g, 1.0, 10_000, 0)[0] == 0.0
    b, se = beta_estimate(g, 0.3, 10_000, 0)
    assert b > 10 * se > 0


def test_contraction_ratio_zero_and_eigenvector():
    g = gen_regular(16, 3, 2)
    w = gossip_from_graph(g)
    assert contraction_ratio(w, np.zeros((16, 3))) == 0.0
    vals, vecs = jacobi_eigh(w)
    assert contraction_ratio(w, vecs[:, [1]]) == pytest.approx(vals[1] ** 2, rel=1e-10)


@pytest.mark.parametrize("p", [0.1, 0.3])
def test_contraction_bound_holds(p):
    rep = contraction_check(gen_regular(16, 3, 9), p, 10_000, 1)
    assert rep.holds and rep.mean_ratio <= rep.rho + 3 * rep.stderr


def test_regular_graph_required():
    from argus_dl.graph import Graph
    adj = np.zeros((4, 4), dtype=bool)
    adj[0, 1] = adj[1, 0] = adj[1, 2] = adj[2, 1] = adj[2, 3] = adj[3, 2] = True
    with pytest.raises(ValueError):
        mc_spectrum(Graph(adj), 0.1, 10_000, 0)
