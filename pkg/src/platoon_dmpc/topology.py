"""Communication topology of the platoon as a leader-pinned digraph.

Followers are indexed 1..N front to back and the leader is node 0. Row ``i``
of the adjacency matrix lists who node ``i`` listens to, i.e.
``adjacency[i-1, j-1] == 1`` means an edge j -> i.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Union

import numpy as np

PRESETS = ("PF", "PLF", "TPF", "TPLF")
NILPOTENCY_TOL = 1e-12


class TopologyError(ValueError):
    """Raised on structurally invalid topologies (e.g. an isolated follower)."""


@dataclass(frozen=True)
class Topology:
    adjacency: np.ndarray
    pinning: np.ndarray
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        a = np.array(self.adjacency, dtype=int)
        p = np.array(self.pinning, dtype=int).reshape(-1)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
            raise TopologyError("adjacency must be a non-empty square matrix")
        if p.shape[0] != a.shape[0]:
            raise TopologyError("pinning length must equal follower count")
        if not np.isin(a, (0, 1)).all() or not np.isin(p, (0, 1)).all():
            raise TopologyError("adjacency and pinning entries must be 0 or 1")
        if np.any(np.diag(a) != 0):
            raise TopologyError("self-loops are not allowed (a_ii must be 0)")
        a.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "adjacency", a)
        object.__setattr__(self, "pinning", p)

    @property
    def follower_count(self) -> int:
        return self.adjacency.shape[0]

    @classmethod
    def from_edges(cls, n: int, edges, pins, name: str = "custom") -> "Topology":
        """Build from ``(j, i)`` edges meaning "i receives from j" and pinned follower ids."""
        a = np.zeros((n, n), dtype=int)
        p = np.zeros(n, dtype=int)
        for j, i in edges:
            if not (1 <= i <= n and 1 <= j <= n):
                raise TopologyError(f"edge ({j}, {i}) references a node outside 1..{n}")
            a[i - 1, j - 1] = 1
        for i in pins:
            if not 1 <= i <= n:
                raise TopologyError(f"pinned node {i} outside 1..{n}")
            p[i - 1] = 1
        return cls(a, p, name)

    def edges(self) -> list[tuple[int, int]]:
        rows, cols = np.nonzero(self.adjacency)
        return [(int(j) + 1, int(i) + 1) for i, j in zip(rows, cols)]

    def pins(self) -> list[int]:
        return [int(i) + 1 for i in np.nonzero(self.pinning)[0]]


@dataclass(frozen=True)
class SpectralReport:
    eigenvalue_magnitudes: list
    spectral_radius: float
    nilpotency_degree: Union[int, str]


def from_preset(kind: str, n: int) -> Topology:
    kind = kind.upper()
    if kind not in PRESETS:
        raise ValueError(f"unknown topology preset {kind!r}; expected one of {PRESETS}")
    if n < 1:
        raise ValueError("a topology needs at least one follower")
    a = np.zeros((n, n), dtype=int)
    p = np.zeros(n, dtype=int)
    for i in range(1, n):
        a[i, i - 1] = 1
    if kind in ("TPF", "TPLF"):
        for i in range(2, n):
            a[i, i - 2] = 1
    if kind in ("PLF", "TPLF"):
        p[:] = 1
    else:
        p[0] = 1
        if kind == "TPF" and n >= 2:
            p[1] = 1
    return Topology(a, p, kind)


def degree_matrix(t: Topology) -> np.ndarray:
    return np.diag(t.adjacency.sum(axis=1)).astype(float)


def laplacian(t: Topology) -> np.ndarray:
    return degree_matrix(t) - t.adjacency


def pinning_matrix(t: Topology) -> np.ndarray:
    return np.diag(t.pinning).astype(float)


def _check_index(t: Topology, i: int):
    if not 1 <= i <= t.follower_count:
        raise IndexError(f"follower index {i} outside 1..{t.follower_count}")


def neighbor_set(t: Topology, i: int) -> set[int]:
    """Followers node ``i`` receives from."""
    _check_index(t, i)
    return {int(j) + 1 for j in np.nonzero(t.adjacency[i - 1])[0]}


def out_set(t: Topology, i: int) -> set[int]:
    """Followers that receive from node ``i``."""
    _check_index(t, i)
    return {int(j) + 1 for j in np.nonzero(t.adjacency[:, i - 1])[0]}


def leader_set(t: Topology, i: int) -> set[int]:
    _check_index(t, i)
    return {0} if t.pinning[i - 1] else set()


def info_set(t: Topology, i: int) -> set[int]:
    return neighbor_set(t, i) | leader_set(t, i)


def has_spanning_tree(t: Topology) -> bool:
    """True iff the leader reaches every follower along directed edges."""
    n = t.follower_count
    seen = set()
    queue = deque(i + 1 for i in range(n) if t.pinning[i])
    seen.update(queue)
    while queue:
        j = queue.popleft()
        for i in out_set(t, j):
            if i not in seen:
                seen.add(i)
                queue.append(i)
    return len(seen) == n


def is_unidirectional(t: Topology) -> bool:
    """Information flows only from lower to higher index (strictly lower-triangular)."""
    return not np.triu(t.adjacency).any()


def consensus_matrix(t: Topology) -> np.ndarray:
    """``(D + P)^-1 A``; rows are the averaging weights of the terminal constraint."""
    d = t.adjacency.sum(axis=1) + t.pinning
    if np.any(d == 0):
        bad = [int(i) + 1 for i in np.nonzero(d == 0)[0]]
        raise TopologyError(f"nodes {bad} have neither neighbors nor a leader link")
    return t.adjacency / d[:, None].astype(float)


def nilpotency_degree(t: Topology) -> Union[int, str]:
    """Smallest k with ``((D+P)^-1 A)^k = 0``, or ``"not nilpotent"``.

    The consensus matrix is a positive diagonal scaling of ``A``, so its powers
    share the zero pattern of the powers of ``A``; the test runs on the boolean
    pattern and is exact.
    """
    consensus_matrix(t)  # structural check
    a = t.adjacency.astype(bool)
    n = t.follower_count
    power = np.eye(n, dtype=bool)
    for k in range(1, n + 1):
        power = (power.astype(np.int64) @ a.astype(np.int64)) > 0
        if not power.any():
            return k
    return "not nilpotent"


def numeric_nilpotency_degree(m: np.ndarray, tol: float = NILPOTENCY_TOL) -> Union[int, str]:
    n = m.shape[0]
    power = np.eye(n)
    for k in range(1, n + 1):
        power = power @ m
        if np.max(np.abs(power)) < tol:
            return k
    return "not nilpotent"


def spectral_report(t: Topology) -> SpectralReport:
    m = consensus_matrix(t)
    mags = sorted((float(abs(z)) for z in np.linalg.eigvals(m)), reverse=True)
    # eigvals of a nilpotent matrix are only zero up to roundoff
    degree = nilpotency_degree(t)
    if isinstance(degree, int):
        mags = [0.0] * len(mags)
    return SpectralReport(mags, max(mags), degree)


def random_spanning_tree_topology(
    rng: np.random.Generator, n: int, unidirectional: bool = True, density: float = 0.3
) -> Topology:
    """Rejection-sample a random topology that contains a leader-rooted spanning tree."""
    while True:
        a = (rng.random((n, n)) < density).astype(int)
        np.fill_diagonal(a, 0)
        if unidirectional:
            a = np.tril(a, k=-1)
        p = (rng.random(n) < density).astype(int)
        t = Topology(a, p, "random")
        if has_spanning_tree(t):
            return t
