"""Closed-form ejection and mixing analysis, with Monte-Carlo cross-checks."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .argus.trust import Thresholds, ejection_rounds
from .graph import Graph, gossip_from_graph, jacobi_eigh


@dataclass(frozen=True)
class TwoRateModel:
    p_fp: float               # probability an honest update is rejected in a round
    p_fn: float               # probability a malicious update is accepted in a round
    thresholds: Thresholds = Thresholds()
    d: int = 3

    def __post_init__(self):
        if not (0.0 <= self.p_fp <= 1.0 and 0.0 <= self.p_fn <= 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.d < 1:
            raise ValueError("degree must be at least 1")


def _check_p(p: float) -> None:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability {p} outside [0, 1]")


def _binom_pmf(n: int, q: float) -> np.ndarray:
    r = np.arange(n + 1)
    coef = np.array([math.comb(n, int(i)) for i in r], dtype=np.float64)
    return coef * q ** r * (1.0 - q) ** (n - r)


# --------------------------------------------------------------------------
# ejection probabilities


def pi(p: float, th: Thresholds = Thresholds()) -> float:
    """Probability that a k1-run of rejections is followed by >= k2 rejections in k3 rounds."""
    _check_p(p)
    tail = sum(math.comb(th.k3, r) * p ** r * (1.0 - p) ** (th.k3 - r)
               for r in range(th.k2, th.k3 + 1))
    return p ** th.k1 * tail


def ejection_probability_bounds(p: float, horizon: int, th: Thresholds = Thresholds()):
    """(lower, upper) bounds on ejection by round ``horizon`` under iid rejection rate ``p``.

    The lower bound uses disjoint blocks of length 1 + k1 + k3 that each start
    after an accepted round; the upper bound is a union bound over start rounds.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    pp = pi(p, th)
    blocks = horizon // (1 + th.k1 + th.k3)
    lower = 1.0 - (1.0 - (1.0 - p) * pp) ** blocks
    upper = max(horizon - th.k1 - th.k2 + 1, 0) * pp
    return lower, upper


@dataclass(frozen=True)
class EjectionBounds:
    mal_survive_ub: float
    honest_eject_ub: float
    mal_eject_lb: float


def ejection_bounds(model: TwoRateModel, horizon: int) -> EjectionBounds:
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    th = model.thresholds
    blocks = horizon // (th.k1 + th.k3 + 1)
    survive = (1.0 - model.p_fn * pi(1.0 - model.p_fn, th)) ** blocks
    honest = max(horizon - th.k1 - th.k2 + 1, 0) * pi(model.p_fp, th)
    lower, _ = ejection_probability_bounds(1.0 - model.p_fn, horizon, th)
    return EjectionBounds(survive, honest, lower)


def mc_ejection_frequency(p: float, horizon: int, th: Thresholds, trials: int,
                          seed: int) -> tuple[float, float]:
    """Fraction of iid Bernoulli(p) rejection strings that end Ejected, with its stderr."""
    _check_p(p)
    if trials < 1:
        raise ValueError("trials must be positive")
    rng = np.random.default_rng(seed)
    hits = 0
    chunk = 20_000
    for start in range(0, trials, chunk):
        size = min(chunk, trials - start)
        hits += int(np.count_nonzero(ejection_rounds(rng.random((size, horizon)) < p, th)))
    freq = hits / trials
    return freq, binomial_stderr(hits, trials)


def binomial_stderr(hits: int, trials: int) -> float:
    """Plug-in binomial stderr, with the count floored at one event on either side.

    Zero (or all) hits would otherwise report a stderr of exactly zero.
    """
    f = min(max(hits, 1), trials - 1 if trials > 1 else 1) / trials
    return math.sqrt(f * (1.0 - f) / trials)


@dataclass(frozen=True)
class MCEjection:
    malicious: float
    malicious_stderr: float
    honest: float
    honest_stderr: float


def mc_ejection(model: TwoRateModel, horizon: int, trials: int = 10_000, seed: int = 0) -> MCEjection:
    if trials < 10_000:
        raise ValueError("need at least 10^4 trials")
    ss = np.random.SeedSequence(seed).spawn(2)
    th = model.thresholds
    mal = mc_ejection_frequency(1.0 - model.p_fn, horizon, th, trials, int(ss[0].generate_state(1)[0]))
    hon = mc_ejection_frequency(model.p_fp, horizon, th, trials, int(ss[1].generate_state(1)[0]))
    return MCEjection(mal[0], mal[1], hon[0], hon[1])


# --------------------------------------------------------------------------
# random mixing matrix


@dataclass(frozen=True)
class SpectrumReport:
    a: float
    b: float
    c: float
    psi_mu2: float
    psi_mun: float
    rho: float
    mc_rho: float | None = None
    mc_stderr: float | None = None


def mixing_constants(d: int, p_fp: float) -> tuple[float, float, float]:
    """Exact a, b, c of the expected Gram matrix of the random mixing matrix."""
    if d < 1:
        raise ValueError("degree must be at least 1")
    _check_p(p_fp)
    keep = 1.0 - p_fp
    a = float(_binom_pmf(d, keep) @ (1.0 / (1.0 + np.arange(d + 1))))
    b = keep * float(_binom_pmf(d - 1, keep) @ (1.0 / (2.0 + np.arange(d)) ** 2))
    c = 0.0 if d == 1 else keep ** 2 * float(_binom_pmf(d - 2, keep)
                                             @ (1.0 / (3.0 + np.arange(d - 1)) ** 2))
    return a, b, c


def psi(mu, d: int, a: float, b: float, c: float):
    """Eigenvalue of E[S^T S] attached to eigenvalue ``mu`` of the gossip matrix."""
    nu = (d + 1) * np.asarray(mu, dtype=np.float64) - 1.0
    return (a - c * d) + 2.0 * b * nu + c * nu * nu


def spectrum_closed_form(d: int, p_fp: float, eigs_of_w) -> SpectrumReport:
    eigs = np.asarray(eigs_of_w, dtype=np.float64)
    if eigs.ndim != 1 or len(eigs) < 2:
        raise ValueError("need at least two gossip eigenvalues")
    if np.any(np.diff(eigs) > 1e-12):
        raise ValueError("eigenvalues must be sorted in descending order")
    a, b, c = mixing_constants(d, p_fp)
    p2 = float(psi(eigs[1], d, a, b, c))
    pn = float(psi(eigs[-1], d, a, b, c))
    return SpectrumReport(a, b, c, p2, pn, max(p2, pn))


def expected_gram(graph: Graph, p_fp: float) -> np.ndarray:
    """Closed-form E[S^T S] = (a - c d) I + 2 b A + c A^2 for a regular graph."""
    d = _regular_degree(graph)
    a, b, c = mixing_constants(d, p_fp)
    adj = graph.adjacency.astype(np.float64)
    return (a - c * d) * np.eye(graph.n) + 2.0 * b * adj + c * adj @ adj


def _regular_degree(graph: Graph) -> int:
    if not graph.is_regular():
        raise ValueError("graph must be regular")
    return int(graph.degrees()[0])


def sample_mixing(graph: Graph, p_fp: float, samples: int, rng: np.random.Generator) -> np.ndarray:
    """``samples`` draws of S: each in-edge kept w.p. 1 - p_fp, rows renormalized."""
    n = graph.n
    adj = graph.adjacency
    keep = (rng.random((samples, n, n)) >= p_fp) & adj
    s = keep.astype(np.float64) + np.eye(n)
    return s / s.sum(axis=2, keepdims=True)


def mc_spectrum(graph: Graph, p_fp: float, samples: int = 10_000, seed: int = 0,
                chunk: int = 2_000) -> tuple[float, float, float]:
    """Top two eigenvalues of the sample mean of S^T S, and the stderr of the second.

    The stderr is the delta-method value: the spread of ``v^T S^T S v`` over
    draws, with ``v`` the second eigenvector of the mean.
    """
    _regular_degree(graph)
    if samples < 10_000:
        raise ValueError("need at least 10^4 samples")
    rng = np.random.default_rng(seed)
    n = graph.n
    total = np.zeros((n, n))
    draws = []
    for start in range(0, samples, chunk):
        s = sample_mixing(graph, p_fp, min(chunk, samples - start), rng)
        total += np.einsum("sij,sik->jk", s, s)
        draws.append(s)
    mean = total / samples
    vals, vecs = jacobi_eigh(0.5 * (mean + mean.T))
    v = vecs[:, 1]
    quad = np.concatenate([np.sum((s @ v) ** 2, axis=1) for s in draws])
    stderr = float(quad.std(ddof=1) / math.sqrt(samples))
    return float(vals[0]), float(vals[1]), stderr


def expected_weights(d: int, p_fp: float) -> tuple[float, float]:
    """Expected self weight and expected weight on each neighbour."""
    if d < 1:
        raise ValueError("degree must be at least 1")
    _check_p(p_fp)
    if p_fp == 1.0:
        return 1.0, 0.0
    q = (1.0 - p_fp ** (d + 1)) / ((d + 1) * (1.0 - p_fp))
    return q, (1.0 - q) / d


def beta_estimate(graph: Graph, p_fp: float, samples: int = 10_000, seed: int = 0,
                  chunk: int = 2_000) -> tuple[float, float]:
    """Monte-Carlo (1/n) E||S^T 1 - 1||^2 and its stderr."""
    if samples < 10_000:
        raise ValueError("need at least 10^4 samples")
    rng = np.random.default_rng(seed)
    vals = []
    for start in range(0, samples, chunk):
        s = sample_mixing(graph, p_fp, min(chunk, samples - start), rng)
        dev = s.sum(axis=1) - 1.0
        vals.append(np.sum(dev * dev, axis=1) / graph.n)
    vals = np.concatenate(vals)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(samples))


@dataclass(frozen=True)
class ContractionReport:
    mean_ratio: float
    stderr: float
    rho: float
    holds: bool


def contraction_ratio(s: np.ndarray, x: np.ndarray) -> float:
    """||S X||_F^2 / ||X||_F^2, defined as 0 for X = 0."""
    den = float(np.sum(x * x))
    return 0.0 if den == 0.0 else float(np.sum((s @ x) ** 2)) / den


def contraction_check(graph: Graph, p_fp: float, trials: int = 10_000, seed: int = 0,
                      dim: int = 4) -> ContractionReport:
    """Mean-square consensus contraction of one mixing step on random centred X."""
    d = _regular_degree(graph)
    rng = np.random.default_rng(seed)
    s = sample_mixing(graph, p_fp, trials, rng)
    x = rng.standard_normal((trials, graph.n, dim))
    x -= x.mean(axis=1, keepdims=True)
    num = np.sum(np.einsum("sij,sjk->sik", s, x) ** 2, axis=(1, 2))
    ratios = num / np.sum(x * x, axis=(1, 2))
    mean = float(ratios.mean())
    stderr = float(ratios.std(ddof=1) / math.sqrt(trials))
    rho = spectrum_closed_form(d, p_fp, jacobi_eigh(gossip_from_graph(graph))[0]).rho
    return ContractionReport(mean, stderr, rho, mean <= rho + 3.0 * stderr)
