"""Quenched random walk on a realized tree, with optional one-shot reinforcement.

From a vertex ``v`` with children ``v0..v(k-1)`` the walk moves to child ``vi``
with probability ``G(vi) / (1 + sum_j G(vj))`` and to the parent otherwise.
Without reinforcement ``G`` is the environment weight ``A``.  With
reinforcement parameters ``(L, p, threshold rule)`` a vertex whose weight is
at most its threshold ``b`` switches to weight ``L`` from its first visit on.

All moves consume exactly one uniform from the walk's stream: the uniform is
scaled by the total weight and compared against the running sums of the
child weights, with the parent last.  ``walk_step`` and the fast loop inside
``run_escape_trial`` share this rule, so they produce identical paths.
"""

from __future__ import annotations

import math
import threading
from bisect import bisect_right
from dataclasses import dataclass, field
from itertools import accumulate
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import rng as rng_mod
from .environment import MIN_WEIGHT, EnvKernel, EnvState, FiniteMatrixKernel
from .gw_tree import ROOT, LazyTree, OffspringLaw, UnrealizedVertexError, VertexId
from .parallel import map_replicas
from .ray_analysis import RayWeights

RETURNED = "ReturnedToRoot"
ALIVE = "AliveAtHorizon"
HIT_LEVEL = "HitLevel"
HIT_PARENT = "HitParentSentinel"
HORIZON = "HorizonExceeded"

_CHUNK = 1024


@dataclass(frozen=True)
class ReinforcedParams:
    """Replacement weight ``L``, threshold floor ``p`` and the threshold rule.

    ``threshold`` may be a number (constant thresholds), a callable mapping an
    environment state to its threshold, or ``None`` to read ``state.threshold``
    (falling back to ``p`` when the state carries none).
    """

    L: float
    p: float
    threshold: Union[None, float, Callable[[EnvState], float]] = None

    def __post_init__(self):
        if not (self.L > 0 and self.p > 0):
            raise ValueError("L and p must be positive")
        if isinstance(self.threshold, (int, float)) and self.threshold < self.p:
            raise ValueError(f"constant threshold {self.threshold} is below p = {self.p}")

    def threshold_of(self, state: EnvState) -> float:
        if callable(self.threshold):
            b = float(self.threshold(state))
        elif self.threshold is not None:
            b = float(self.threshold)
        elif state.threshold is not None:
            b = float(state.threshold)
        else:
            b = self.p
        if b < self.p:
            raise ValueError(f"threshold {b} of {state!r} is below p = {self.p}")
        return b

    @classmethod
    def once_reinforced(cls, delta: float) -> "ReinforcedParams":
        """Parameters that turn weights ``1/(1+delta)`` into once-reinforced walk."""
        if delta <= -1:
            raise ValueError("delta must exceed -1")
        p = max(1.0, 1.0 / (1.0 + delta))
        return cls(1.0, p, p)


class _LazyRng:
    """Vertex stream built only if something actually draws from it."""

    __slots__ = ("_seed", "_tag", "_tree", "_node", "_gen")

    def __init__(self, seed: int, tag: int, tree: LazyTree, node: int):
        self._seed, self._tag, self._tree, self._node = seed, tag, tree, node
        self._gen = None

    def __getattr__(self, name):
        if self._gen is None:
            digest = self._tree.node_digest(self._node)
            self._gen = rng_mod.vertex_rng(self._seed, self._tag, digest)
        return getattr(self._gen, name)


class WalkEnvironment:
    """Environment weights realized together with the tree.

    Expanding a vertex realizes its children and draws their environment
    states from the kernel, started at the parent's state, on a stream keyed
    by the vertex.  Siblings are conditionally independent given the parent.
    Vertices can be addressed by tuple or by the tree's integer node id
    (methods with a ``_node`` suffix).
    """

    def __init__(self, tree: LazyTree, kernel: EnvKernel, root_state: Optional[EnvState] = None,
                 seed: Optional[int] = None, reinforced: Optional[ReinforcedParams] = None):
        if kernel.log_weights:
            raise ValueError("the walk needs a kernel on the weight scale (see exp_transform)")
        if root_state is None:
            if isinstance(kernel, FiniteMatrixKernel):
                raise ValueError("finite kernels need an explicit root state")
            root_state = EnvState(1.0)
        self.tree = tree
        self.kernel = kernel
        self.seed = tree.seed if seed is None else int(seed)
        self.reinforced = reinforced
        self._states = {0: root_state}
        self._weights = {0: self._check(root_state.weight)}
        self._boost = {}
        self._kids = {}
        self._lock = threading.Lock()
        if reinforced is not None:
            self._boost[0] = root_state.weight <= reinforced.threshold_of(root_state)

    @staticmethod
    def _check(a: float) -> float:
        if not (a >= MIN_WEIGHT and math.isfinite(a)):
            raise ValueError(f"environment weight {a!r} is not a positive finite number >= 1e-300")
        return float(a)

    def _id(self, v: VertexId) -> int:
        i = self.tree.node(v)
        if i not in self._states:
            raise UnrealizedVertexError(v)
        return i

    # --- node-id interface -------------------------------------------------

    def children_node(self, i: int):
        """``(child ids, child weights)`` of node ``i``, realizing both on first use."""
        got = self._kids.get(i)
        if got is not None:
            return got
        kids = tuple(self.tree.child_nodes(i))
        rng = _LazyRng(self.seed, rng_mod.ENV, self.tree, i)
        states = self.kernel.children(self._states[i], len(kids), rng)
        weights = tuple(self._check(s.weight) for s in states)
        with self._lock:
            if i in self._kids:
                return self._kids[i]
            for c, st, a in zip(kids, states, weights):
                self._states[c] = st
                self._weights[c] = a
                if self.reinforced is not None:
                    self._boost[c] = a <= self.reinforced.threshold_of(st)
            self._kids[i] = (kids, weights)
        return kids, weights

    def weight_node(self, i: int) -> float:
        return self._weights[i]

    def reinforceable_node(self, i: int) -> bool:
        return self.reinforced is not None and self._boost[i]

    # --- address interface -------------------------------------------------

    def state(self, v: VertexId) -> EnvState:
        return self._states[self._id(v)]

    def weight(self, v: VertexId) -> float:
        return self._weights[self._id(v)]

    def threshold(self, v: VertexId) -> float:
        if self.reinforced is None:
            raise ValueError("no reinforcement configured")
        return self.reinforced.threshold_of(self.state(v))

    def reinforceable(self, v: VertexId) -> bool:
        """True when ``A_v <= b_v``, so a visit switches the weight to ``L``."""
        return self.reinforceable_node(self._id(v))

    def children(self, v: VertexId):
        """``(children, weights)`` of ``v`` as address tuples."""
        i = self.tree.node(v)
        if i not in self._states:
            raise UnrealizedVertexError(v)
        kids, weights = self.children_node(i)
        return tuple(v + (j,) for j in range(len(kids))), weights


@dataclass
class WalkState:
    """Position, clock, first-visit times and the reinforced-weight overlay."""

    position: Optional[VertexId] = ROOT
    time: int = 0
    first_visit: dict = field(default_factory=lambda: {ROOT: 0})
    effective: dict = field(default_factory=dict)

    @classmethod
    def start(cls, env: WalkEnvironment) -> "WalkState":
        st = cls()
        if env.reinforceable(ROOT):
            st.effective[ROOT] = env.reinforced.L
        return st

    def effective_weight(self, env: WalkEnvironment, v: VertexId) -> float:
        return self.effective.get(v, env.weight(v))


def _choose(u: float, cum: list, total: float) -> int:
    """Index of the chosen child, or ``len(cum)`` for the parent."""
    return bisect_right(cum, u * total)


def transition_probs(env: WalkEnvironment, state: WalkState):
    """``(targets, probs)`` out of the current position; the parent comes last."""
    v = state.position
    if v is None:
        return [ROOT], np.ones(1)
    kids, _ = env.children(v)
    w = np.array([state.effective_weight(env, c) for c in kids], dtype=float)
    total = 1.0 + w.sum()
    return list(kids) + [v[:-1] if v else None], np.concatenate((w, [1.0])) / total


def walk_step(env: WalkEnvironment, state: WalkState, rng, sentinel: str = "absorbing") -> WalkState:
    """Advance ``state`` by one step in place and return it.

    At the extra parent below the root the walk stays put (``"absorbing"``)
    or steps back to the root (``"reflecting"``); a uniform is consumed
    either way.
    """
    u = rng.random()
    v = state.position
    if v is None:
        if sentinel == "reflecting":
            state.position = ROOT
        elif sentinel != "absorbing":
            raise ValueError(f"unknown sentinel rule {sentinel!r}")
    else:
        kids, _ = env.children(v)
        cum = list(accumulate(state.effective_weight(env, c) for c in kids))
        total = 1.0 + cum[-1] if cum else 1.0
        i = _choose(u, cum, total)
        state.position = kids[i] if i < len(kids) else (v[:-1] if v else None)
    state.time += 1
    w = state.position
    if w is not None and w not in state.first_visit:
        state.first_visit[w] = state.time
        if env.reinforceable(w):
            state.effective[w] = env.reinforced.L
    return state


@dataclass(frozen=True)
class EscapeOutcome:
    kind: str
    depth: Optional[int]
    steps: int

    @property
    def returned(self) -> bool:
        return self.kind == RETURNED


def run_escape_trial(env: WalkEnvironment, horizon: int, rng) -> EscapeOutcome:
    """Run from the root until the extra parent is hit or ``horizon`` steps pass.

    Produces exactly the path of repeated ``walk_step`` calls on the same
    stream; only the bookkeeping is lighter (integer node ids, cached
    cumulative weights).
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    reinforced = env.reinforced is not None
    L = env.reinforced.L if reinforced else None
    parent = env.tree._parent
    visited = {0}
    boosted = set()
    cache = {}

    def moves(i):
        kids, weights = env.children_node(i)
        if boosted:
            weights = [L if c in boosted else a for c, a in zip(kids, weights)]
        cum = list(accumulate(weights))
        entry = (kids, cum, 1.0 + cum[-1] if cum else 1.0)
        cache[i] = entry
        return entry

    pos = 0
    t = 0
    buf = rng.random(_CHUNK)
    bi = 0
    while t < horizon:
        if bi == _CHUNK:
            buf = rng.random(_CHUNK)
            bi = 0
        u = buf[bi]
        bi += 1
        entry = cache.get(pos)
        if entry is None:
            entry = moves(pos)
        kids, cum, total = entry
        k = bisect_right(cum, u * total)
        t += 1
        if k < len(kids):
            pos = kids[k]
            if reinforced and pos not in visited:
                visited.add(pos)
                if env.reinforceable_node(pos):
                    boosted.add(pos)
                    cache.pop(parent[pos], None)
        else:
            pos = parent[pos]
            if pos < 0:
                return EscapeOutcome(RETURNED, None, t)
    return EscapeOutcome(ALIVE, env.tree.node_depth(pos), t)


def escape_trials(law: OffspringLaw, kernel: EnvKernel, horizon: int, replicas: int, seed: int,
                  root_state: Optional[EnvState] = None, reinforced: Optional[ReinforcedParams] = None,
                  workers: int = 1) -> list:
    """Independent escape trials, each on its own tree, environment and walk stream."""

    def one(r):
        s = rng_mod.replica_seed(seed, r)
        env = WalkEnvironment(LazyTree(law, s), kernel, root_state, seed=s, reinforced=reinforced)
        return run_escape_trial(env, horizon, rng_mod.replica_rng(seed, r, rng_mod.WALK))

    return map_replicas(one, replicas, workers)


# ---------------------------------------------------------------------------
# walk restricted to one ray


@dataclass(frozen=True)
class HittingRecord:
    outcome: str
    level: Optional[int]
    steps: int


def _ray_arrays(weights: RayWeights, reinforced: Optional[ReinforcedParams]):
    a = np.asarray(weights.a, dtype=float)
    if reinforced is None:
        return a, None, None
    if weights.thresholds is not None:
        b = np.asarray(weights.thresholds, dtype=float)
    elif isinstance(reinforced.threshold, (int, float)):
        b = np.full(a.size, float(reinforced.threshold))
    else:
        b = np.full(a.size, reinforced.p)
    if np.any(b < reinforced.p):
        raise ValueError("ray thresholds must be at least p")
    return a, a <= b, reinforced.L


def ray_walk(weights: RayWeights, start: int = 0, rng=None, horizon: Optional[int] = None,
             reinforced: Optional[ReinforcedParams] = None) -> HittingRecord:
    """Birth--death chain on ``s_-1..s_n`` from ``s_start`` until it hits an end.

    From ``s_r`` the chain moves up with probability ``w / (1 + w)``, where
    ``w`` is the weight of ``s_{r+1}`` (``L`` for a visited reinforceable
    vertex when ``reinforced`` is given).
    """
    n = weights.n
    if not 0 <= start < n:
        raise ValueError(f"start must lie in 0..{n - 1}")
    gen = rng_mod.as_generator(rng)
    a, boost, L = _ray_arrays(weights, reinforced)
    pos, hi, t = start, start, 0
    while horizon is None or t < horizon:
        w = a[pos]
        if boost is not None and pos + 1 <= hi and boost[pos]:
            w = L
        t += 1
        if gen.random() * (1.0 + w) < w:
            pos += 1
            hi = max(hi, pos)
            if pos == n:
                return HittingRecord(HIT_LEVEL, n, t)
        else:
            pos -= 1
            if pos < 0:
                return HittingRecord(HIT_PARENT, None, t)
    return HittingRecord(HORIZON, None, t)


@dataclass(frozen=True)
class RayBatch:
    """Outcome codes per run: 1 hit level ``n``, 0 hit the parent, -1 horizon."""

    codes: np.ndarray
    steps: np.ndarray

    @property
    def hit_fraction(self) -> float:
        return float(np.mean(self.codes == 1))


def ray_walk_batch(weights: RayWeights, runs: int, rng=None, start: int = 0,
                   horizon: Optional[int] = None, reinforced: Optional[ReinforcedParams] = None) -> RayBatch:
    """``runs`` independent ray walks advanced together with numpy."""
    n = weights.n
    if not 0 <= start < n:
        raise ValueError(f"start must lie in 0..{n - 1}")
    gen = rng_mod.as_generator(rng)
    a, boost, L = _ray_arrays(weights, reinforced)
    codes = np.full(runs, -1, dtype=np.int8)
    steps = np.zeros(runs, dtype=np.int64)
    idx = np.arange(runs)
    pos = np.full(runs, start, dtype=np.int64)
    hi = pos.copy()
    t = 0
    while idx.size and (horizon is None or t < horizon):
        t += 1
        w = a[pos]
        if boost is not None:
            w = np.where((pos + 1 <= hi) & boost[pos], L, w)
        up = gen.random(idx.size) * (1.0 + w) < w
        pos = np.where(up, pos + 1, pos - 1)
        np.maximum(hi, pos, out=hi)
        top, bottom = pos == n, pos < 0
        done = top | bottom
        if done.any():
            codes[idx[top]] = 1
            codes[idx[bottom]] = 0
            steps[idx[done]] = t
            keep = ~done
            idx, pos, hi = idx[keep], pos[keep], hi[keep]
    steps[idx] = t
    return RayBatch(codes, steps)
