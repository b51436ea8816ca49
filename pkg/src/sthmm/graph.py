"""Spatial neighbourhood systems shared by every time point.

Sites are numbered ``1..N`` in every public interface (edge lists, ordered
pairs, CSV files).  Internally the adjacency is held in CSR form with 0-based
indices so it can be handed directly to the compiled sampling kernels.
"""

from __future__ import annotations

import io
from typing import Iterable, TextIO

import numpy as np


class GraphError(ValueError):
    """Raised for invalid graph dimensions, edge counts or edge-list files."""


class NeighborhoodSystem:
    """Undirected simple graph over ``n_sites`` sites.

    Parameters
    ----------
    n_sites : int
        Number of sites N.
    edges : iterable of (int, int)
        Unordered 1-based site pairs.  Self-loops and duplicates are rejected.

    Instances are immutable; ``indptr``/``indices`` hold the 0-based CSR
    adjacency with each neighbour list sorted.
    """

    __slots__ = ("n_sites", "edges", "indptr", "indices")

    def __init__(self, n_sites: int, edges: Iterable[tuple[int, int]] = ()):
        if n_sites < 1:
            raise GraphError(f"n_sites must be positive, got {n_sites}")
        canon = set()
        for i, j in edges:
            i, j = int(i), int(j)
            if i == j:
                raise GraphError(f"self-loop at site {i}")
            if not (1 <= i <= n_sites and 1 <= j <= n_sites):
                raise GraphError(f"edge ({i}, {j}) out of range 1..{n_sites}")
            e = (min(i, j), max(i, j))
            if e in canon:
                raise GraphError(f"duplicate edge {e}")
            canon.add(e)
        object.__setattr__(self, "n_sites", int(n_sites))
        object.__setattr__(self, "edges", frozenset(canon))

        nbrs: list[list[int]] = [[] for _ in range(n_sites)]
        for i, j in canon:
            nbrs[i - 1].append(j - 1)
            nbrs[j - 1].append(i - 1)
        indptr = np.zeros(n_sites + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([len(a) for a in nbrs])
        indices = np.fromiter(
            (j for a in nbrs for j in sorted(a)), dtype=np.int64, count=int(indptr[-1])
        )
        indptr.setflags(write=False)
        indices.setflags(write=False)
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def neighbors(self, i: int) -> list[int]:
        """Sorted 1-based neighbours of site ``i`` (1-based)."""
        a, b = self.indptr[i - 1], self.indptr[i]
        return [int(j) + 1 for j in self.indices[a:b]]

    def ordered_pairs(self) -> list[tuple[int, int]]:
        return ordered_pairs(self)

    def __eq__(self, other):
        if not isinstance(other, NeighborhoodSystem):
            return NotImplemented
        return self.n_sites == other.n_sites and self.edges == other.edges

    def __hash__(self):
        return hash((self.n_sites, self.edges))

    def __setattr__(self, name, value):
        raise AttributeError("NeighborhoodSystem is immutable")

    def __repr__(self):
        return f"NeighborhoodSystem(n_sites={self.n_sites}, n_edges={self.n_edges})"


def ordered_pairs(g: NeighborhoodSystem) -> list[tuple[int, int]]:
    """Each edge once as ``(i, j)`` with ``j > i``, sorted lexicographically.

    This is the only orientation that enters the spatial terms of the
    latent potential, which keeps ``gamma[u, v]`` and ``gamma[v, u]``
    separately identifiable.
    """
    return sorted(g.edges)


def build_grid(z: int) -> NeighborhoodSystem:
    """``z x z`` rook lattice, sites numbered row-major from 1."""
    if z < 1:
        raise GraphError(f"grid dimension must be >= 1, got {z}")
    edges = []
    for r in range(z):
        for c in range(z):
            s = r * z + c + 1
            if c + 1 < z:
                edges.append((s, s + 1))
            if r + 1 < z:
                edges.append((s, s + z))
    return NeighborhoodSystem(z * z, edges)


def build_erdos_renyi(n: int, m: int, seed=None) -> NeighborhoodSystem:
    """Uniform draw from all simple graphs with ``n`` nodes and ``m`` edges.

    ``seed`` may be an int, a ``numpy.random.SeedSequence`` or a
    ``numpy.random.Generator``.
    """
    if n < 1:
        raise GraphError(f"n must be positive, got {n}")
    max_edges = n * (n - 1) // 2
    if not 0 <= m <= max_edges:
        raise GraphError(f"edge count {m} outside 0..{max_edges} for n={n}")
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, k=1)
    pick = rng.choice(max_edges, size=m, replace=False)
    return NeighborhoodSystem(n, zip((iu[pick] + 1).tolist(), (ju[pick] + 1).tolist()))


def save_edge_list(g: NeighborhoodSystem, sink: TextIO) -> None:
    sink.write(f"N {g.n_sites}\n")
    for i, j in ordered_pairs(g):
        sink.write(f"{i} {j}\n")


def load_edge_list(source: TextIO | str) -> NeighborhoodSystem:
    """Parse the ``N <n>`` header plus ``i j`` lines format.

    Blank lines and ``#`` comments are ignored.  Errors name the offending
    line number.
    """
    if isinstance(source, str):
        source = io.StringIO(source)
    n = None
    seen: set[tuple[int, int]] = set()
    edges = []
    for lineno, raw in enumerate(source, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if n is None:
            if len(parts) != 2 or parts[0] != "N":
                raise GraphError(f"line {lineno}: expected header 'N <n>', got {line!r}")
            try:
                n = int(parts[1])
            except ValueError:
                raise GraphError(f"line {lineno}: bad site count {parts[1]!r}") from None
            if n < 1:
                raise GraphError(f"line {lineno}: site count must be positive")
            continue
        if len(parts) != 2:
            raise GraphError(f"line {lineno}: expected 'i j', got {line!r}")
        try:
            i, j = int(parts[0]), int(parts[1])
        except ValueError:
            raise GraphError(f"line {lineno}: non-integer site index in {line!r}") from None
        if i == j:
            raise GraphError(f"line {lineno}: self-loop at site {i}")
        if not (1 <= i <= n and 1 <= j <= n):
            raise GraphError(f"line {lineno}: site index out of range 1..{n}")
        e = (min(i, j), max(i, j))
        if e in seen:
            raise GraphError(f"line {lineno}: duplicate edge {e}")
        seen.add(e)
        edges.append(e)
    if n is None:
        raise GraphError("empty edge list: missing 'N <n>' header")
    return NeighborhoodSystem(n, edges)
