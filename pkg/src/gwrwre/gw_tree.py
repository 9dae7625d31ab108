"""Galton--Watson trees realized on demand.

Vertices are addressed by the tuple of child indices leading to them from the
root, so the root is ``()`` and the parent of ``v`` is ``v[:-1]``.  The extra
parent adjoined above the root is represented by ``ROOT_PARENT`` (``None``); it
has exactly one child, the root.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Tuple

import numpy as np

from . import rng as rng_mod

VertexId = Tuple[int, ...]
ROOT: VertexId = ()
ROOT_PARENT = None


class UnrealizedVertexError(KeyError):
    """Raised when a vertex is queried before any expansion produced it."""


def parent(v: Optional[VertexId]) -> Optional[VertexId]:
    if v is None:
        raise ValueError("the adjoined root parent has no parent")
    if len(v) == 0:
        return ROOT_PARENT
    return v[:-1]


def depth(v: Optional[VertexId]) -> int:
    """Distance from the root; the adjoined parent sits at depth -1."""
    return -1 if v is None else len(v)


def is_ancestor(u: VertexId, v: VertexId) -> bool:
    """True when ``u`` is a strict ancestor of ``v`` (prefix test)."""
    return len(u) < len(v) and v[: len(u)] == u


@dataclass(frozen=True)
class OffspringLaw:
    """Offspring distribution with finite support."""

    probabilities: Mapping[int, float]
    mean: float = field(init=False)

    def __post_init__(self):
        probs = {int(k): float(p) for k, p in self.probabilities.items() if p != 0.0}
        if not probs:
            raise ValueError("offspring law has no mass")
        if any(k < 0 for k in probs):
            raise ValueError("offspring counts must be nonnegative")
        if any(p < 0 for p in probs.values()):
            raise ValueError("offspring probabilities must be nonnegative")
        total = math.fsum(probs.values())
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"offspring probabilities sum to {total!r}, not 1")
        probs = dict(sorted(probs.items()))
        object.__setattr__(self, "probabilities", probs)
        object.__setattr__(self, "mean", math.fsum(k * p for k, p in probs.items()))
        counts = np.fromiter(probs.keys(), dtype=np.int64)
        cdf = np.cumsum(np.fromiter(probs.values(), dtype=float))
        cdf[-1] = 1.0
        object.__setattr__(self, "_counts", counts)
        object.__setattr__(self, "_cdf", cdf)

    @classmethod
    def from_pairs(cls, pairs: Iterable[Tuple[int, float]]) -> "OffspringLaw":
        probs: dict = {}
        for k, p in pairs:
            probs[int(k)] = probs.get(int(k), 0.0) + float(p)
        return cls(probs)

    @classmethod
    def deterministic(cls, k: int) -> "OffspringLaw":
        return cls({int(k): 1.0})

    @property
    def supercritical(self) -> bool:
        return self.mean > 1.0

    @property
    def is_deterministic(self) -> bool:
        return len(self.probabilities) == 1

    @property
    def variance(self) -> float:
        return math.fsum(k * k * p for k, p in self.probabilities.items()) - self.mean**2

    def pgf(self, s: float) -> float:
        return math.fsum(p * s**k for k, p in self.probabilities.items())

    def sample(self, rng: np.random.Generator) -> int:
        if self.is_deterministic:
            return int(self._counts[0])
        return int(self._counts[np.searchsorted(self._cdf, rng.random(), side="right")])


def extinction_probability(law: OffspringLaw, tol: float = 1e-12, max_iter: int = 10_000_000) -> float:
    """Smallest fixed point of the offspring generating function.

    Iterates ``q <- f(q)`` from 0 until successive iterates differ by less than
    ``tol``.  When the mean is at most 1 (and the law is not the point mass at
    one child) the smallest fixed point is exactly 1 and is returned directly,
    since the iteration only creeps towards it at rate ``1/n``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    p1 = law.probabilities.get(1, 0.0)
    if law.mean <= 1.0 and p1 < 1.0:
        return 1.0
    q = 0.0
    for _ in range(max_iter):
        nxt = law.pgf(q)
        if abs(nxt - q) < tol:
            return min(nxt, 1.0)
        q = nxt
    return q


class LazyTree:
    """A Galton--Watson tree whose vertices are realized when first expanded.

    The offspring count of a vertex is drawn from a stream keyed by its
    address (through a digest chained from the root), so the realized tree
    depends only on ``(law, seed)`` and never on the order in which vertices
    are expanded.  Internally vertices are integer node ids, which keeps deep
    walks cheap; the public methods also accept address tuples.  Reads are
    lock-free; realization takes a lock, so one tree can be shared between
    threads.
    """

    def __init__(self, law: OffspringLaw, seed: int = 0):
        self.law = law
        self.seed = int(seed)
        self._digest = [rng_mod.ROOT_DIGEST]
        self._parent = [-1]
        self._depth = [0]
        self._index = [0]
        self._kids: list = [None]
        self._expanded = 0
        self._lock = threading.Lock()

    # --- node-id interface -------------------------------------------------

    def node(self, v: VertexId) -> int:
        """Node id of address ``v``; every ancestor must already be expanded."""
        if v is None:
            raise ValueError("the adjoined root parent has no node id")
        i = 0
        for step in v:
            kids = self._kids[i]
            if kids is None or not 0 <= step < len(kids):
                raise UnrealizedVertexError(v)
            i = kids[step]
        return i

    def vertex(self, i: int) -> VertexId:
        """Address tuple of node ``i``."""
        path = []
        while i > 0:
            path.append(self._index[i])
            i = self._parent[i]
        return tuple(reversed(path))

    def parent_node(self, i: int) -> int:
        """Parent node id, ``-1`` for the root."""
        return self._parent[i]

    def node_depth(self, i: int) -> int:
        return self._depth[i]

    def node_digest(self, i: int) -> bytes:
        """Address digest of node ``i``, computed on first request."""
        chain = []
        j = i
        while self._digest[j] is None:
            chain.append(j)
            j = self._parent[j]
        d = self._digest[j]
        for j in reversed(chain):
            d = rng_mod.child_digest(d, self._index[j])
            self._digest[j] = d
        return d

    def child_nodes(self, i: int) -> list:
        """Children of node ``i``, drawing its offspring count if needed."""
        kids = self._kids[i]
        if kids is not None:
            return kids
        if self.law.is_deterministic:
            n = int(self.law._counts[0])
        else:
            n = self.law.sample(rng_mod.vertex_rng(self.seed, rng_mod.TREE, self.node_digest(i)))
        with self._lock:
            if self._kids[i] is not None:
                return self._kids[i]
            start = len(self._parent)
            for j in range(n):
                self._digest.append(None)
                self._parent.append(i)
                self._depth.append(self._depth[i] + 1)
                self._index.append(j)
                self._kids.append(None)
            kids = list(range(start, start + n))
            self._kids[i] = kids
            self._expanded += 1
        return kids

    # --- address interface -------------------------------------------------

    def __contains__(self, v: VertexId) -> bool:
        """True when ``v`` has been expanded (its offspring count is drawn)."""
        try:
            return self._kids[self.node(v)] is not None
        except UnrealizedVertexError:
            return False

    def __len__(self) -> int:
        return self._expanded

    def is_reachable(self, v: VertexId) -> bool:
        """True when ``v`` is the root or a child of an already expanded vertex."""
        if v is None:
            return True
        try:
            self.node(v)
        except UnrealizedVertexError:
            return False
        return True

    def offspring_count(self, v: VertexId) -> int:
        return len(self.child_nodes(self.node(v)))

    def expand(self, v: Optional[VertexId]) -> list:
        """Children of ``v``, realizing ``v`` if needed.  Idempotent."""
        if v is None:
            return [ROOT]
        return [v + (j,) for j in range(self.offspring_count(v))]

    def realized(self) -> dict:
        return {self.vertex(i): len(k) for i, k in enumerate(self._kids) if k is not None}

    def levels(self, depth_max: int):
        """Yield the list of vertices at each level 0..depth_max, expanding as needed."""
        for ids in self.level_nodes(depth_max):
            yield [self.vertex(i) for i in ids]

    def level_nodes(self, depth_max: int):
        """Node ids level by level, 0..depth_max."""
        level = [0]
        for _ in range(depth_max + 1):
            yield level
            nxt = []
            for i in level:
                nxt.extend(self.child_nodes(i))
            level = nxt
