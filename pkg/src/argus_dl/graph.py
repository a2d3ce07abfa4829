"""Communication graphs, gossip matrices and a small symmetric eigensolver."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True, eq=False)
class Graph:
    adjacency: np.ndarray  # (n, n) bool, symmetric, zero diagonal

    def __post_init__(self):
        a = self.adjacency
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("adjacency must be square")
        if not np.array_equal(a, a.T):
            raise ValueError("adjacency must be symmetric")
        if np.any(np.diag(a)):
            raise ValueError("self-loops are not allowed")

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    def neighbors(self, i: int) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.adjacency[i])]

    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def is_regular(self) -> bool:
        deg = self.degrees()
        return bool(np.all(deg == deg[0]))

    def distance(self, i: int, j: int) -> int:
        """Hop distance from ``i`` to ``j`` (``-1`` if unreachable)."""
        seen = {i: 0}
        queue = deque([i])
        while queue:
            u = queue.popleft()
            if u == j:
                return seen[u]
            for v in self.neighbors(u):
                if v not in seen:
                    seen[v] = seen[u] + 1
                    queue.append(v)
        return -1

    def is_connected(self) -> bool:
        if self.n == 0:
            return True
        seen = np.zeros(self.n, dtype=bool)
        seen[0] = True
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for v in np.flatnonzero(self.adjacency[u] & ~seen):
                seen[v] = True
                queue.append(v)
        return bool(seen.all())

    def edges(self) -> list[tuple[int, int]]:
        iu = np.argwhere(np.triu(self.adjacency, 1))
        return [(int(u), int(v)) for u, v in iu]

    @classmethod
    def from_edges(cls, n: int, edges) -> "Graph":
        a = np.zeros((n, n), dtype=bool)
        for u, v in edges:
            if u == v:
                raise ValueError(f"self-loop at node {u}")
            a[u, v] = a[v, u] = True
        return cls(a)


def write_edge_list(g: Graph, path) -> None:
    Path(path).write_text("".join(f"{u} {v}\n" for u, v in g.edges()))


def read_edge_list(path, n: int | None = None) -> Graph:
    edges = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'u v'")
        edges.append((int(parts[0]), int(parts[1])))
    size = n if n is not None else 1 + max((max(e) for e in edges), default=-1)
    return Graph.from_edges(size, edges)


def gen_regular(n: int, d: int, seed: int, max_tries: int = 1000) -> Graph:
    """Connected simple d-regular graph from the pairing model with rejection."""
    if d < 1 or d >= n:
        raise ValueError("need 1 <= d < n")
    if (n * d) % 2:
        raise ValueError(f"infeasible: n*d = {n * d} is odd")
    rng = np.random.default_rng(seed)
    stubs = np.repeat(np.arange(n), d)
    for _ in range(max_tries):
        pairs = rng.permutation(stubs).reshape(-1, 2)
        if np.any(pairs[:, 0] == pairs[:, 1]):
            continue
        key = np.sort(pairs, axis=1)
        if len(np.unique(key, axis=0)) != len(key):
            continue
        g = Graph.from_edges(n, pairs)
        if g.is_connected():
            return g
    raise RuntimeError(f"no connected {d}-regular graph on {n} nodes after {max_tries} tries")


def gen_er(n: int, p_edge: float, seed: int, max_tries: int = 1000) -> Graph:
    """Connected Erdos-Renyi-Gilbert graph (disconnected draws are rejected)."""
    if not 0.0 < p_edge < 1.0:
        raise ValueError("need 0 < p_edge < 1")
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        upper = np.triu(rng.random((n, n)) < p_edge, 1)
        g = Graph(upper | upper.T)
        if g.is_connected():
            return g
    raise RuntimeError(f"no connected G({n}, {p_edge}) draw after {max_tries} tries")


def gen_complete(n: int) -> Graph:
    return Graph(~np.eye(n, dtype=bool))


def gossip_from_graph(g: Graph) -> np.ndarray:
    """Uniform weights over self and neighbours: row i gets 1 / (deg(i) + 1).

    For a d-regular graph this is ``(I + A) / (d + 1)``.
    """
    a = g.adjacency.astype(np.float64) + np.eye(g.n)
    return a / a.sum(axis=1, keepdims=True)


def jacobi_eigh(m: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100):
    """Cyclic Jacobi rotations; returns (eigenvalues descending, eigenvectors as columns)."""
    a = np.array(m, dtype=np.float64, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("matrix must be square")
    n = a.shape[0]
    if n > 256:
        raise ValueError("matrix too large for the Jacobi solver (n > 256)")
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-10):
        raise ValueError("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.abs(a - np.diag(np.diag(a))).max() if n > 1 else 0.0
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        off = np.abs(a - np.diag(np.diag(a))).max()
        if off >= tol:
            raise RuntimeError("Jacobi eigensolver did not converge in 100 sweeps")
    vals = np.diag(a)
    order = np.argsort(-vals, kind="stable")
    return vals[order], v[:, order]


def symmetric_eigs(m: np.ndarray) -> np.ndarray:
    """All eigenvalues of a symmetric matrix, sorted in descending order."""
    return jacobi_eigh(m)[0]
