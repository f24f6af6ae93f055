"""Finite lattices, connected supports and graph distances.

Sites are stored in a fixed order and referred to by their integer index
everywhere else in the package. A support is a sorted tuple of site indices.
"""

from __future__ import annotations

import itertools
from collections import deque

import numpy as np

from .errors import DomainError

OPEN = "open"
PERIODIC = "periodic"


class Lattice:
    """Finite hypercubic lattice Z^d cut to a box, open or periodic.

    Use the constructors `cube`, `ising_ring` and `segment` rather than the
    raw initializer.
    """

    def __init__(self, d, L, sites, boundary, shape, kind):
        if boundary not in (OPEN, PERIODIC):
            raise DomainError(f"unknown boundary {boundary!r}")
        self.d = int(d)
        self.L = int(L)
        self.sites = [tuple(int(c) for c in s) for s in sites]
        self.boundary = boundary
        self.kind = kind
        self._shape = tuple(shape)
        self._lo = tuple(min(s[a] for s in self.sites) for a in range(self.d))
        self.index = {s: i for i, s in enumerate(self.sites)}
        self.neighbors = self._build_neighbors()
        self._dist = None

    @classmethod
    def cube(cls, d, L, boundary=OPEN):
        if d < 1 or L < 0:
            raise DomainError("need d >= 1 and L >= 0")
        axis = range(-L, L + 1)
        sites = sorted(itertools.product(axis, repeat=d))
        return cls(d, L, sites, boundary, (2 * L + 1,) * d, "cube")

    @classmethod
    def ising_ring(cls, L):
        """The periodic chain [-3L, 3L-1] with 6L sites."""
        if L < 1:
            raise DomainError("ising ring needs L >= 1")
        sites = [(x,) for x in range(-3 * L, 3 * L)]
        return cls(1, L, sites, PERIODIC, (6 * L,), "ising_ring")

    @classmethod
    def segment(cls, n):
        """Open chain with sites 0..n-1 (any length, odd or even)."""
        if n < 1:
            raise DomainError("segment needs n >= 1")
        return cls(1, n // 2, [(x,) for x in range(n)], OPEN, (n,), "segment")

    def __len__(self):
        return len(self.sites)

    @property
    def n_sites(self):
        return len(self.sites)

    def __eq__(self, other):
        return (isinstance(other, Lattice) and self.kind == other.kind
                and self.sites == other.sites and self.boundary == other.boundary)

    def __hash__(self):
        return hash((self.kind, len(self.sites), self.boundary))

    def __repr__(self):
        return f"Lattice({self.kind}, d={self.d}, L={self.L}, n={self.n_sites}, {self.boundary})"

    def describe(self):
        return {"kind": self.kind, "d": self.d, "L": self.L,
                "n": self.n_sites, "boundary": self.boundary}

    @classmethod
    def from_description(cls, desc):
        kind = desc["kind"]
        if kind == "cube":
            return cls.cube(desc["d"], desc["L"], desc["boundary"])
        if kind == "ising_ring":
            return cls.ising_ring(desc["L"])
        if kind == "segment":
            return cls.segment(desc["n"])
        raise DomainError(f"unknown lattice kind {kind!r}")

    def _build_neighbors(self):
        nbrs = []
        for s in self.sites:
            out = set()
            for a in range(self.d):
                for step in (-1, 1):
                    t = list(s)
                    t[a] += step
                    if self.boundary == PERIODIC:
                        t[a] = self._lo[a] + (t[a] - self._lo[a]) % self._shape[a]
                    t = tuple(t)
                    j = self.index.get(t)
                    if j is not None and j != self.index[s]:
                        out.add(j)
            nbrs.append(tuple(sorted(out)))
        return nbrs

    def site_index(self, site):
        if isinstance(site, (int, np.integer)):
            if not 0 <= site < self.n_sites:
                raise DomainError(f"site index {site} outside lattice")
            return int(site)
        key = tuple(int(c) for c in np.atleast_1d(site))
        if key not in self.index:
            raise DomainError(f"site {key} outside lattice")
        return self.index[key]

    def support(self, sites):
        """Sorted index tuple for a collection of sites (coordinates or indices)."""
        return tuple(sorted({self.site_index(s) for s in sites}))

    @property
    def distances(self):
        """All-pairs graph distance matrix (BFS, computed once)."""
        if self._dist is None:
            n = self.n_sites
            D = np.full((n, n), -1, dtype=int)
            for i in range(n):
                D[i, i] = 0
                queue = deque([i])
                while queue:
                    u = queue.popleft()
                    for v in self.neighbors[u]:
                        if D[i, v] < 0:
                            D[i, v] = D[i, u] + 1
                            queue.append(v)
            self._dist = D
        return self._dist

    def ball(self, center, radius):
        c = self.site_index(center)
        return tuple(int(j) for j in np.nonzero(self.distances[c] <= radius)[0])


def connected(sites, lattice):
    """True iff the sites form a connected set under nearest-neighbour adjacency."""
    idx = lattice.support(sites)
    if not idx:
        return False
    members = set(idx)
    seen = {idx[0]}
    stack = [idx[0]]
    while stack:
        u = stack.pop()
        for v in lattice.neighbors[u]:
            if v in members and v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == len(members)


def distance(S1, S2, lattice, lattice2=None):
    if lattice2 is not None and lattice2 != lattice:
        raise DomainError("supports live on different lattices")
    a = lattice.support(S1)
    b = lattice.support(S2)
    return int(lattice.distances[np.ix_(a, b)].min())


def enumerate_supports(lattice, max_size):
    """All connected supports with at most max_size sites, lexicographically sorted."""
    found = set()
    frontier = {(i,) for i in range(lattice.n_sites)}
    size = 1
    while frontier and size <= max_size:
        found |= frontier
        if size == max_size:
            break
        grown = set()
        for S in frontier:
            members = set(S)
            for u in S:
                for v in lattice.neighbors[u]:
                    if v not in members:
                        grown.add(tuple(sorted(members | {v})))
        frontier = grown
        size += 1
    return sorted(found)
