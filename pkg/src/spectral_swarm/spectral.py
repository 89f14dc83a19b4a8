"""Exact spectral oracle for communication graphs.

Dense eigendecomposition is used throughout (N stays in the hundreds), so the
oracle never shares convergence tolerances with the distributed estimator.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components as _cc
from scipy.spatial.distance import pdist, squareform


class DisconnectedGraphError(ValueError):
    pass


@dataclass(frozen=True)
class CommGraph:
    adjacency: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=bool)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("adjacency must be square")
        if not np.array_equal(a, a.T):
            raise ValueError("adjacency must be symmetric")
        if a.diagonal().any():
            raise ValueError("self-loops are not allowed")
        object.__setattr__(self, "adjacency", a)

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    @property
    def edges(self) -> list[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.adjacency, 1))
        return list(zip(i.tolist(), j.tolist()))

    @classmethod
    def from_edges(cls, n: int, edges) -> "CommGraph":
        a = np.zeros((n, n), dtype=bool)
        for i, j in edges:
            a[i, j] = a[j, i] = True
        return cls(a)

    def with_edge(self, i: int, j: int) -> "CommGraph":
        a = self.adjacency.copy()
        a[i, j] = a[j, i] = True
        return CommGraph(a)

    def to_edge_list(self) -> str:
        return "".join(f"{i} {j}\n" for i, j in self.edges)

    def to_json(self) -> str:
        return json.dumps({"n": self.n, "edges": [list(e) for e in self.edges]})

    @classmethod
    def from_json(cls, text: str) -> "CommGraph":
        data = json.loads(text)
        return cls.from_edges(data["n"], data["edges"])


@dataclass(frozen=True)
class SpectrumResult:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def fiedler_value(self) -> float:
        return float(self.eigenvalues[1])

    @property
    def fiedler_vector(self) -> np.ndarray:
        return self.eigenvectors[:, 1]

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[-1])


@dataclass(frozen=True)
class CheegerBounds:
    h_upper: float
    delta_max: int
    exact: bool

    def holds(self, lambda2: float, tol: float = 1e-9) -> bool:
        """Check h >= lambda2/2 >= h^2/(2*Delta); the left side only when h is exact."""
        lower = self.h_upper ** 2 / (2 * self.delta_max)
        ok_lower = lambda2 / 2 >= lower - tol if self.exact else True
        ok_upper = self.h_upper >= lambda2 / 2 - tol
        return ok_upper and ok_lower


def build_graph(points, sigma: float) -> CommGraph:
    """Unit-disk graph: edge iff Euclidean distance <= sigma."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(p) < 2:
        return CommGraph(np.zeros((len(p), len(p)), dtype=bool))
    a = squareform(pdist(p)) <= sigma
    np.fill_diagonal(a, False)
    return CommGraph(a)


def laplacian(g: CommGraph) -> np.ndarray:
    a = g.adjacency.astype(float)
    return np.diag(a.sum(axis=1)) - a


def spectrum(g: CommGraph) -> SpectrumResult:
    if g.n < 2:
        raise ValueError("spectrum needs at least 2 vertices")
    w, v = np.linalg.eigh(laplacian(g))
    if not np.all(np.isfinite(w)):
        raise np.linalg.LinAlgError("non-finite eigenvalues")
    return SpectrumResult(w, v)


def zero_threshold(g: CommGraph) -> float:
    return 1e-8 * max(1, int(g.degrees.max(initial=0)))


def connected_components(g: CommGraph) -> tuple[int, np.ndarray]:
    count, labels = _cc(csr_matrix(g.adjacency), directed=False)
    return int(count), labels


def zero_multiplicity(g: CommGraph) -> int:
    return int(np.sum(spectrum(g).eigenvalues < zero_threshold(g)))


def _cut_sizes(adj: np.ndarray, members: np.ndarray) -> np.ndarray:
    """Boundary size for each row of the boolean membership matrix ``members``."""
    i, j = np.nonzero(np.triu(adj, 1))
    return (members[:, i] != members[:, j]).sum(axis=1)


def cheeger_bounds(g: CommGraph, exact_limit: int = 16) -> CheegerBounds:
    """Isoperimetric number h(G) = min |boundary(S)| / |S| over |S| <= n/2.

    Exact by subset enumeration for n <= ``exact_limit``; otherwise the best
    Fiedler sweep cut, which is an upper bound on h(G).
    """
    if connected_components(g)[0] != 1:
        raise DisconnectedGraphError("Cheeger bounds need a connected graph")
    n = g.n
    delta = int(g.degrees.max())
    if n <= exact_limit:
        codes = np.arange(1, 2 ** n, dtype=np.int64)
        members = ((codes[:, None] >> np.arange(n)) & 1).astype(bool)
        size = members.sum(axis=1)
        keep = size <= n / 2
        members, size = members[keep], size[keep]
        h = float((_cut_sizes(g.adjacency, members) / size).min())
        return CheegerBounds(h, delta, True)
    order = np.argsort(spectrum(g).fiedler_vector, kind="stable")
    prefixes = np.zeros((n - 1, n), dtype=bool)
    for k in range(1, n):
        prefixes[k - 1, order[:k]] = True
    size = prefixes.sum(axis=1)
    cuts = _cut_sizes(g.adjacency, prefixes)
    # the smaller side of each sweep cut is the denominator
    h = float((cuts / np.minimum(size, n - size)).min())
    return CheegerBounds(h, delta, False)


def fiedler_partition(g: CommGraph) -> tuple[set[int], set[int]]:
    """Split vertices by the sign of the Fiedler vector; zeros go to the positive side.

    The eigenvector sign is fixed so that its first non-negligible entry is negative.
    """
    v = spectrum(g).fiedler_vector.copy()
    big = np.flatnonzero(np.abs(v) > 1e-12)
    if len(big) and v[big[0]] > 0:
        v = -v
    v[np.abs(v) <= 1e-12] = 0.0
    neg = set(np.flatnonzero(v < 0).tolist())
    return neg, set(range(g.n)) - neg


def complete_graph(n: int) -> CommGraph:
    a = ~np.eye(n, dtype=bool)
    return CommGraph(a)


def path_graph(n: int) -> CommGraph:
    return CommGraph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


def cycle_graph(n: int) -> CommGraph:
    return CommGraph.from_edges(n, [(i, (i + 1) % n) for i in range(n)])
