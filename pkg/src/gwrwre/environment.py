"""Environment kernels along rays.

A kernel moves the pair ``(weight, aux)`` one generation down a line of
descent.  Three variants are supported:

* ``IIDKernel`` -- the next weight ignores the current state;
* ``FiniteMatrixKernel`` -- a finite state space with a row-stochastic matrix;
* ``SamplerKernel`` -- an opaque step function (continuous examples).

Kernels carry a ``log_weights`` flag.  ``log_transform`` switches the stored
coordinate from ``A`` to ``ln A``; truncation windows are always expressed on
the log scale, while ``eta`` and ``beta_measure`` take thresholds on the
``A`` scale.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Hashable, Optional, Sequence

import numpy as np
from scipy import stats

from . import rng as rng_mod

MIN_WEIGHT = 1e-300


class KernelError(RuntimeError):
    """A kernel could not produce a transition."""


class ZeroMassRowError(KernelError):
    """Conditioning a kernel row on a window that has no mass."""

    def __init__(self, state, window):
        super().__init__(f"state {state!r} puts no mass on the window {window}")
        self.state = state
        self.window = window


@dataclass(frozen=True)
class EnvState:
    """Chain state ``(A, M)``; ``threshold`` is the reinforcement threshold when present."""

    weight: float
    aux: Hashable = None
    threshold: Optional[float] = None


@dataclass(frozen=True)
class TruncationWindow:
    """Window ``(lower, upper]`` on the log-weight scale; ``lower`` may be ``-inf``."""

    lower: float
    upper: float
    closed_lower: bool = False

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"window lower {self.lower} must be below upper {self.upper}")

    def contains(self, u):
        u = np.asarray(u, dtype=float)
        lo_ok = u >= self.lower if self.closed_lower else u > self.lower
        return lo_ok & (u <= self.upper)

    def __str__(self):
        left = "[" if self.closed_lower else "("
        return f"{left}{self.lower:g}, {self.upper:g}]"


# ---------------------------------------------------------------------------
# weight laws (laws of A, always on the positive scale)


class DiscreteLaw:
    """Finite-support law of a positive weight."""

    def __init__(self, values, probs=None):
        values = np.asarray(values, dtype=float).ravel()
        if probs is None:
            probs = np.full(values.size, 1.0 / values.size)
        probs = np.asarray(probs, dtype=float).ravel()
        if values.size == 0 or values.size != probs.size:
            raise ValueError("values and probs must be nonempty and of equal length")
        if np.any(values < MIN_WEIGHT) or not np.all(np.isfinite(values)):
            raise ValueError("weights must be finite and at least 1e-300")
        if np.any(probs < 0) or abs(math.fsum(probs) - 1.0) > 1e-12:
            raise ValueError("probabilities must be nonnegative and sum to 1")
        keep = probs > 0
        order = np.argsort(values[keep], kind="stable")
        self.values = values[keep][order]
        self.probs = probs[keep][order]
        self._cdf = np.cumsum(self.probs)
        self._cdf[-1] = 1.0

    @classmethod
    def point_mass(cls, a: float) -> "DiscreteLaw":
        return cls([a], [1.0])

    @property
    def is_deterministic(self) -> bool:
        return self.values.size == 1

    def __repr__(self):
        pairs = ", ".join(f"{v:g}: {p:g}" for v, p in zip(self.values, self.probs))
        return f"DiscreteLaw({{{pairs}}})"

    def sample(self, rng, size=None):
        if self.is_deterministic:
            if size is None:
                return float(self.values[0])
            return np.full(size, self.values[0])
        u = rng.random(size)
        idx = np.searchsorted(self._cdf, u, side="right")
        if size is None:
            return float(self.values[int(idx)])
        return self.values[idx]

    def prob_in(self, lo: float, hi: float, closed_lower: bool = False) -> float:
        mask = (self.values >= lo if closed_lower else self.values > lo) & (self.values <= hi)
        return float(math.fsum(self.probs[mask]))

    def log_moment(self, lam: float) -> float:
        """``ln E[A**lam]`` via log-sum-exp."""
        logs = np.log(self.probs) + lam * np.log(self.values)
        m = logs.max()
        return float(m + math.log(math.fsum(np.exp(logs - m))))

    def conditioned(self, lo: float, hi: float, closed_lower: bool = False) -> "DiscreteLaw":
        mask = (self.values >= lo if closed_lower else self.values > lo) & (self.values <= hi)
        mass = math.fsum(self.probs[mask])
        if mass <= 0:
            raise ZeroMassRowError("iid", (lo, hi))
        return DiscreteLaw(self.values[mask], self.probs[mask] / mass)

    def mean(self) -> float:
        return float(math.fsum(self.values * self.probs))


class ContinuousLaw:
    """A positive weight law backed by a frozen ``scipy.stats`` distribution.

    ``lo``/``hi`` restrict the law to ``(lo, hi]``; sampling is by inverse CDF
    so truncated laws stay vectorized.
    """

    def __init__(self, dist, lo: float = 0.0, hi: float = math.inf, closed_lower: bool = False):
        self.dist = dist
        self.lo = float(lo)
        self.hi = float(hi)
        self.closed_lower = closed_lower
        self._flo = float(dist.cdf(self.lo))
        self._fhi = float(dist.cdf(self.hi))
        if self._fhi - self._flo <= 0:
            raise ZeroMassRowError("iid", (lo, hi))

    is_deterministic = False

    def __repr__(self):
        name = getattr(getattr(self.dist, "dist", None), "name", "dist")
        return f"ContinuousLaw({name}, ({self.lo:g}, {self.hi:g}])"

    @property
    def mass(self) -> float:
        return self._fhi - self._flo

    def sample(self, rng, size=None):
        u = rng.random(size)
        x = self.dist.ppf(self._flo + u * (self._fhi - self._flo))
        x = np.maximum(x, MIN_WEIGHT)
        return float(x) if size is None else x

    def prob_in(self, lo: float, hi: float, closed_lower: bool = False) -> float:
        lo_, hi_ = max(lo, self.lo), min(hi, self.hi)
        if hi_ <= lo_:
            return 0.0
        return float((self.dist.cdf(hi_) - self.dist.cdf(lo_)) / self.mass)

    def log_moment(self, lam: float) -> float:
        if lam == 0:
            return 0.0
        val = self.dist.expect(lambda a: a**lam, lb=self.lo, ub=self.hi, conditional=True)
        return float(math.log(val)) if val > 0 and np.isfinite(val) else math.inf

    def conditioned(self, lo: float, hi: float, closed_lower: bool = False) -> "ContinuousLaw":
        return ContinuousLaw(self.dist, max(lo, self.lo), min(hi, self.hi), closed_lower)

    def mean(self) -> float:
        return float(self.dist.expect(lambda a: a, lb=self.lo, ub=self.hi, conditional=True))


def _to_stored(x, log_weights: bool):
    return np.log(x) if log_weights else x


def _window_on_weight_scale(lo: float, hi: float, log_weights: bool):
    """Translate a window given on the stored coordinate into ``A``-scale bounds."""
    if not log_weights:
        return lo, hi
    return (0.0 if lo == -math.inf else math.exp(lo)), (math.inf if hi == math.inf else math.exp(hi))


# ---------------------------------------------------------------------------
# kernels


class EnvKernel:
    """Common interface.  Subclasses implement ``step`` and ``window_prob``."""

    log_weights: bool = False
    variant: str = "abstract"

    @property
    def deterministic(self) -> bool:
        return False

    def step(self, state: EnvState, rng) -> EnvState:
        raise NotImplementedError

    def children(self, state: EnvState, k: int, rng) -> list:
        """``k`` conditionally independent successors of ``state`` (siblings)."""
        return [self.step(state, rng) for _ in range(k)]

    def window_prob(self, state: EnvState, lo: float, hi: float, closed_lower: bool = False) -> float:
        """``P(lo < W_1 <= hi | state)`` on the stored coordinate."""
        raise NotImplementedError

    def sample_paths(self, start: EnvState, n: int, replicas: int, rng) -> np.ndarray:
        """``(replicas, n)`` array of stored weights ``W_1..W_n`` started at ``start``."""
        out = np.empty((replicas, n))
        for r in range(replicas):
            s = start
            for j in range(n):
                s = self.step(s, rng)
                out[r, j] = s.weight
        return out

    def weight_of(self, state: EnvState) -> float:
        """``A`` for a state, whatever the stored coordinate."""
        return math.exp(state.weight) if self.log_weights else state.weight


class IIDKernel(EnvKernel):
    variant = "iid"

    def __init__(self, law, log_weights: bool = False):
        self.law = law
        self.log_weights = log_weights
        if law.is_deterministic:
            a = law.sample(None)
            self._fixed = EnvState(math.log(a) if log_weights else a)

    def __repr__(self):
        return f"IIDKernel({self.law!r}, log_weights={self.log_weights})"

    @property
    def deterministic(self) -> bool:
        return self.law.is_deterministic

    def step(self, state, rng):
        a = self.law.sample(rng)
        return EnvState(math.log(a) if self.log_weights else a)

    def children(self, state, k, rng):
        if k == 0:
            return []
        if self.law.is_deterministic:
            return [self._fixed] * k
        a = self.law.sample(rng, size=k)
        w = np.log(a) if self.log_weights else a
        return [EnvState(float(x)) for x in w]

    def window_prob(self, state, lo, hi, closed_lower=False):
        lo_a, hi_a = _window_on_weight_scale(lo, hi, self.log_weights)
        return self.law.prob_in(lo_a, hi_a, closed_lower)

    def sample_paths(self, start, n, replicas, rng):
        a = self.law.sample(rng, size=(replicas, n))
        return np.log(a) if self.log_weights else np.asarray(a, dtype=float)


class FiniteMatrixKernel(EnvKernel):
    """Finite chain.  State ``i`` has weight ``weights[i]`` and label ``aux[i]``."""

    variant = "finite"

    def __init__(self, weights, matrix, aux=None, thresholds=None, log_weights: bool = False):
        self.weights = np.asarray(weights, dtype=float).ravel()
        self.matrix = np.asarray(matrix, dtype=float)
        k = self.weights.size
        if self.matrix.shape != (k, k):
            raise ValueError(f"matrix must be {k}x{k}, got {self.matrix.shape}")
        if np.any(self.matrix < 0):
            raise ValueError("transition matrix has negative entries")
        sums = self.matrix.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-12)
        if bad.size:
            raise ValueError(f"row {int(bad[0])} of the matrix sums to {sums[bad[0]]!r}")
        if not log_weights and (np.any(self.weights < MIN_WEIGHT) or not np.all(np.isfinite(self.weights))):
            raise ValueError("state weights must be finite and at least 1e-300")
        self.log_weights = log_weights
        self.aux = list(range(k)) if aux is None else list(aux)
        if len(self.aux) != k:
            raise ValueError("aux labels must match the number of states")
        self._index = {label: i for i, label in enumerate(self.aux)}
        if len(self._index) != k:
            raise ValueError("aux labels must be unique")
        self.thresholds = None if thresholds is None else np.asarray(thresholds, dtype=float).ravel()
        if self.thresholds is not None and self.thresholds.size != k:
            raise ValueError("thresholds must match the number of states")
        self._cdf = np.cumsum(self.matrix, axis=1)
        self._cdf[:, -1] = 1.0
        self._state_cache = [self._make_state(i) for i in range(k)]
        self._cdf_rows = self._cdf.tolist()

    def __repr__(self):
        return f"FiniteMatrixKernel({self.size} states, log_weights={self.log_weights})"

    @property
    def size(self) -> int:
        return self.weights.size

    @property
    def deterministic(self) -> bool:
        return bool(np.all(self.matrix.max(axis=1) == 1.0))

    @property
    def a_weights(self) -> np.ndarray:
        return np.exp(self.weights) if self.log_weights else self.weights

    def _make_state(self, i: int) -> EnvState:
        thr = None if self.thresholds is None else float(self.thresholds[i])
        return EnvState(float(self.weights[i]), self.aux[i], thr)

    def state(self, i: int) -> EnvState:
        return self._state_cache[i]

    def states(self) -> list:
        return [self.state(i) for i in range(self.size)]

    def index_of(self, state: EnvState) -> int:
        try:
            return self._index[state.aux]
        except KeyError:
            raise KernelError(f"state {state!r} is not a state of this kernel") from None

    def _next_index(self, i: int, rng) -> int:
        row = self._cdf[i]
        j = int(np.searchsorted(row, rng.random(), side="right"))
        return min(j, self.size - 1)

    def step(self, state, rng):
        return self.state(self._next_index(self.index_of(state), rng))

    def children(self, state, k, rng):
        if k == 0:
            return []
        i = self.index_of(state)
        row, states, last = self._cdf_rows[i], self._state_cache, len(self._state_cache) - 1
        return [states[min(bisect_right(row, u), last)] for u in rng.random(k).tolist()]

    def window_prob(self, state, lo, hi, closed_lower=False):
        mask = TruncationWindow(lo, hi, closed_lower).contains(self.weights)
        return float(math.fsum(self.matrix[self.index_of(state), mask]))

    def sample_index_paths(self, start: int, n: int, replicas: int, rng) -> np.ndarray:
        """``(replicas, n + 1)`` state indices; column 0 is the start."""
        idx = np.empty((replicas, n + 1), dtype=np.int64)
        idx[:, 0] = start
        cur = idx[:, 0]
        for j in range(1, n + 1):
            u = rng.random(replicas)
            nxt = (u[:, None] >= self._cdf[cur]).sum(axis=1)
            np.minimum(nxt, self.size - 1, out=nxt)
            idx[:, j] = nxt
            cur = nxt
        return idx

    def sample_paths(self, start, n, replicas, rng):
        idx = self.sample_index_paths(self.index_of(start), n, replicas, rng)
        return self.weights[idx[:, 1:]]

    def matrix_power(self, m: int) -> np.ndarray:
        return np.linalg.matrix_power(self.matrix, m)


class SamplerKernel(EnvKernel):
    """Black-box kernel defined by a step function ``step_fn(state, rng) -> EnvState``.

    Optional hooks: ``probe_fn(n, rng)`` lists starting states for worst-case
    searches (``eta``), ``window_fn(state, lo, hi)`` gives exact one-step
    window probabilities on the ``A`` scale.
    """

    variant = "sampler"

    def __init__(self, step_fn, name: str = "sampler", probe_fn=None, window_fn=None,
                 log_weights: bool = False):
        self.step_fn = step_fn
        self.name = name
        self.probe_fn = probe_fn
        self.window_fn = window_fn
        self.log_weights = log_weights

    def __repr__(self):
        return f"SamplerKernel({self.name!r}, log_weights={self.log_weights})"

    def step(self, state, rng):
        try:
            nxt = self.step_fn(state, rng)
        except Exception as exc:  # propagate as a kernel failure
            raise KernelError(f"sampler {self.name!r} failed from {state!r}: {exc}") from exc
        if not self.log_weights and not (nxt.weight >= MIN_WEIGHT and math.isfinite(nxt.weight)):
            raise KernelError(f"sampler {self.name!r} produced invalid weight {nxt.weight!r}")
        return nxt

    def probes(self, n: int, rng) -> list:
        if self.probe_fn is None:
            raise KernelError(f"sampler {self.name!r} has no probe states")
        return list(self.probe_fn(n, rng))

    def window_prob(self, state, lo, hi, closed_lower=False):
        if self.window_fn is None:
            raise KernelError(f"sampler {self.name!r} has no exact window probabilities")
        lo_a, hi_a = _window_on_weight_scale(lo, hi, self.log_weights)
        return float(self.window_fn(state, lo_a, hi_a))


# ---------------------------------------------------------------------------
# operations


def step(kernel: EnvKernel, state: EnvState, rng) -> EnvState:
    """One Markov transition of the environment chain."""
    return kernel.step(state, rng)


def log_transform(kernel: EnvKernel) -> EnvKernel:
    """Kernel of ``(ln A, M)``."""
    if kernel.log_weights:
        raise ValueError("kernel already stores log-weights")
    if isinstance(kernel, IIDKernel):
        return IIDKernel(kernel.law, log_weights=True)
    if isinstance(kernel, FiniteMatrixKernel):
        return FiniteMatrixKernel(np.log(kernel.weights), kernel.matrix, kernel.aux,
                                  kernel.thresholds, log_weights=True)
    if isinstance(kernel, SamplerKernel):
        inner = kernel

        def step_ln(state, rng):
            nxt = inner.step(replace(state, weight=math.exp(state.weight)), rng)
            return replace(nxt, weight=math.log(nxt.weight))

        def probes_ln(n, rng):
            return [replace(s, weight=math.log(s.weight)) for s in inner.probes(n, rng)]

        window_ln = None
        if inner.window_fn is not None:
            def window_ln(state, lo, hi):
                return inner.window_fn(replace(state, weight=math.exp(state.weight)), lo, hi)

        return SamplerKernel(step_ln, name=f"ln({inner.name})",
                             probe_fn=probes_ln if inner.probe_fn else None,
                             window_fn=window_ln, log_weights=True)
    raise TypeError(f"unsupported kernel {kernel!r}")


def exp_transform(kernel: EnvKernel) -> EnvKernel:
    """Inverse of :func:`log_transform`."""
    if not kernel.log_weights:
        raise ValueError("kernel already stores weights")
    if isinstance(kernel, IIDKernel):
        return IIDKernel(kernel.law, log_weights=False)
    if isinstance(kernel, FiniteMatrixKernel):
        return FiniteMatrixKernel(np.exp(kernel.weights), kernel.matrix, kernel.aux,
                                  kernel.thresholds, log_weights=False)
    raise TypeError("only IID and finite kernels can be mapped back")


def truncate(kernel: EnvKernel, window: TruncationWindow, max_tries: int = 100_000) -> EnvKernel:
    """Condition the kernel on the next log-weight lying in ``window``."""
    if not kernel.log_weights:
        raise ValueError("truncate expects a log-weight kernel; call log_transform first")
    if isinstance(kernel, IIDKernel):
        lo, hi = _window_on_weight_scale(window.lower, window.upper, True)
        return IIDKernel(kernel.law.conditioned(lo, hi, window.closed_lower), log_weights=True)
    if isinstance(kernel, FiniteMatrixKernel):
        keep = np.flatnonzero(window.contains(kernel.weights))
        if keep.size == 0:
            raise ZeroMassRowError("<all states>", str(window))
        sub = kernel.matrix[np.ix_(keep, keep)]
        mass = sub.sum(axis=1)
        for row, m in enumerate(mass):
            if m <= 0:
                raise ZeroMassRowError(kernel.state(int(keep[row])), str(window))
        thr = None if kernel.thresholds is None else kernel.thresholds[keep]
        return FiniteMatrixKernel(kernel.weights[keep], sub / mass[:, None],
                                  [kernel.aux[i] for i in keep], thr, log_weights=True)
    if isinstance(kernel, SamplerKernel):
        inner = kernel

        def step_trunc(state, rng):
            for _ in range(max_tries):
                nxt = inner.step(state, rng)
                if window.contains(nxt.weight):
                    return nxt
            raise ZeroMassRowError(state, str(window))

        return SamplerKernel(step_trunc, name=f"{inner.name}|{window}", probe_fn=None,
                             log_weights=True)
    raise TypeError(f"unsupported kernel {kernel!r}")


@dataclass(frozen=True)
class EtaEstimate:
    value: float
    exact: bool
    plug_in: float
    stderr: float = 0.0


def eta_estimate(kernel: EnvKernel, eps: float, r: float, n_probe: int = 64,
                 samples: int = 4000, rng=None) -> EtaEstimate:
    """Worst-case probability that one step leaves the window ``(eps, r]`` (``A`` scale)."""
    if not 0 <= eps < r:
        raise ValueError("need 0 <= eps < r")
    lo = (math.log(eps) if eps > 0 else -math.inf) if kernel.log_weights else eps
    hi = (math.log(r) if r < math.inf else math.inf) if kernel.log_weights else r
    if isinstance(kernel, IIDKernel):
        p = kernel.window_prob(EnvState(1.0), lo, hi)
        return EtaEstimate(1.0 - p, True, 1.0 - p)
    if isinstance(kernel, FiniteMatrixKernel):
        mask = TruncationWindow(lo, hi).contains(kernel.weights)
        p = float(kernel.matrix[:, mask].sum(axis=1).min())
        return EtaEstimate(max(0.0, 1.0 - p), True, max(0.0, 1.0 - p))
    gen = rng_mod.as_generator(rng if rng is not None else 0)
    probes = kernel.probes(n_probe, gen)
    if kernel.window_fn is not None:
        p = min(kernel.window_prob(s, lo, hi) for s in probes)
        return EtaEstimate(max(0.0, 1.0 - p), False, max(0.0, 1.0 - p))
    window = TruncationWindow(lo, hi)
    best_p, best_se = math.inf, 0.0
    for s in probes:
        hits = sum(bool(window.contains(kernel.step(s, gen).weight)) for _ in range(samples))
        p = hits / samples
        if p < best_p:
            best_p, best_se = p, math.sqrt(p * (1 - p) / samples)
    plug = 1.0 - best_p
    return EtaEstimate(max(0.0, plug - 3.0 * best_se), False, plug, best_se)


def eta(kernel: EnvKernel, eps: float, r: float, n_probe: int = 64, rng=None, **kw) -> float:
    return eta_estimate(kernel, eps, r, n_probe=n_probe, rng=rng, **kw).value


# ---------------------------------------------------------------------------
# minorization


@dataclass(frozen=True)
class MinorizationReport:
    ell: int
    n_mix: int
    kappa: float
    satisfied: bool
    verified: bool = True
    table: dict = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def asserted(cls, ell: int, n_mix: int, kappa: float) -> "MinorizationReport":
        """User-supplied certificate for kernels that cannot be checked exactly."""
        if not (0 < ell <= n_mix and kappa >= 1):
            raise ValueError("need 0 < ell <= N and kappa >= 1")
        return cls(ell, n_mix, kappa, True, verified=False)


def minorization_constant(powers: Sequence[np.ndarray], ell: int, n_mix: int) -> float:
    """Smallest kappa with ``K^ell(x, b) <= kappa/N sum_{m<=N} K^m(y, b)`` on all singletons.

    ``powers[m]`` must hold ``K^m`` for ``m = 1..N`` (``powers[0]`` unused).
    """
    lhs = powers[ell].max(axis=0)
    rhs = sum(powers[m] for m in range(1, n_mix + 1)).min(axis=0)
    pos = lhs > 0
    if np.any(rhs[pos] <= 0):
        return math.inf
    return float(n_mix * np.max(lhs[pos] / rhs[pos]))


def check_assumption1(kernel: EnvKernel, ell_max: int = 4, n_max: int = 8,
                      kappa_max: float = 1e3) -> MinorizationReport:
    """Search ``ell <= ell_max``, ``ell <= N <= n_max`` for a minorization certificate.

    Candidates are scanned in order of ``ell`` then ``N``; the first whose
    minimal kappa does not exceed ``kappa_max`` is reported.  On a finite state
    space every positive chain admits *some* finite kappa, so the cap is what
    separates genuinely uniform kernels from grid artefacts.
    """
    if isinstance(kernel, IIDKernel):
        return MinorizationReport(1, 1, 1.0, True)
    if not isinstance(kernel, FiniteMatrixKernel):
        raise TypeError("minorization can only be checked for finite kernels; use MinorizationReport.asserted")
    top = max(ell_max, n_max)
    powers = [np.eye(kernel.size)]
    for _ in range(top):
        powers.append(powers[-1] @ kernel.matrix)
    table = {}
    best = None
    for ell in range(1, ell_max + 1):
        for n_mix in range(ell, n_max + 1):
            kap = minorization_constant(powers, ell, n_mix)
            table[(ell, n_mix)] = kap
            if best is None and kap <= kappa_max:
                best = (ell, n_mix, kap)
    if best is None:
        return MinorizationReport(0, 0, math.inf, False, table=table)
    return MinorizationReport(best[0], best[1], max(1.0, best[2]), True, table=table)


# ---------------------------------------------------------------------------
# beta_eps


@dataclass
class StateDistribution:
    """Distribution over environment states (finite support or empirical)."""

    states: list
    probs: np.ndarray
    empirical: bool = False

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        self._cdf = np.cumsum(self.probs)
        self._cdf[-1] = 1.0

    def sample(self, rng) -> EnvState:
        return self.states[int(np.searchsorted(self._cdf, rng.random(), side="right"))]

    def as_dict(self) -> dict:
        return {s: float(p) for s, p in zip(self.states, self.probs)}


def epsilon_conditioned(kernel: EnvKernel, eps: float) -> EnvKernel:
    """``K`` conditioned on the next weight exceeding ``eps`` (``A`` scale)."""
    lo = math.log(eps) if kernel.log_weights else eps
    if isinstance(kernel, FiniteMatrixKernel):
        keep = np.flatnonzero(kernel.weights > lo)
        if keep.size == 0:
            raise ZeroMassRowError("<all states>", f"({eps}, inf)")
        sub = kernel.matrix[np.ix_(keep, keep)]
        mass = sub.sum(axis=1)
        for row, m in enumerate(mass):
            if m <= 0:
                raise ZeroMassRowError(kernel.state(int(keep[row])), f"({eps}, inf)")
        thr = None if kernel.thresholds is None else kernel.thresholds[keep]
        return FiniteMatrixKernel(kernel.weights[keep], sub / mass[:, None],
                                  [kernel.aux[i] for i in keep], thr, kernel.log_weights)
    if isinstance(kernel, IIDKernel):
        return IIDKernel(kernel.law.conditioned(eps, math.inf), kernel.log_weights)
    window = TruncationWindow(lo, math.inf)
    inner = kernel

    def step_cond(state, rng):
        for _ in range(100_000):
            nxt = inner.step(state, rng)
            if window.contains(nxt.weight):
                return nxt
        raise ZeroMassRowError(state, str(window))

    return SamplerKernel(step_cond, name=f"{kernel.name}|A>{eps:g}", log_weights=kernel.log_weights)


def beta_measure(kernel: EnvKernel, eps: float, x_star: EnvState, ell: int,
                 rng=None, n_samples: int = 2000) -> StateDistribution:
    """``ell``-step law of the ``eps``-conditioned kernel started at ``x_star``."""
    if ell < 1:
        raise ValueError("ell must be a positive integer")
    if kernel.weight_of(x_star) < 1.0:
        raise ValueError("x_star must have weight at least 1")
    kbar = epsilon_conditioned(kernel, eps)
    if isinstance(kbar, FiniteMatrixKernel):
        start = kbar.index_of(x_star)
        dist = np.linalg.matrix_power(kbar.matrix, ell)[start]
        support = np.flatnonzero(dist > 0)
        return StateDistribution([kbar.state(int(i)) for i in support], dist[support] / dist[support].sum())
    if isinstance(kbar, IIDKernel) and isinstance(kbar.law, DiscreteLaw):
        w = np.log(kbar.law.values) if kbar.log_weights else kbar.law.values
        return StateDistribution([EnvState(float(x)) for x in w], kbar.law.probs)
    gen = rng_mod.as_generator(rng if rng is not None else 0)
    draws = []
    for _ in range(n_samples):
        s = x_star
        for _ in range(ell):
            s = kbar.step(s, gen)
        draws.append(s)
    return StateDistribution(draws, np.full(len(draws), 1.0 / len(draws)), empirical=True)


# ---------------------------------------------------------------------------
# built-in example kernels


def point_mass_kernel(a: float) -> IIDKernel:
    return IIDKernel(DiscreteLaw.point_mass(a))


def _is_dyadic_state(state: EnvState) -> bool:
    return state.aux == "dyadic"


def dyadic_sampler(c: float = 4.0) -> SamplerKernel:
    """Dyadic states halve deterministically; other states jump to ``Uniform(0, c)``.

    Floating point numbers are all dyadic rationals, so membership in the dyadic
    set is carried by the auxiliary label instead of the value.
    """

    def step_fn(state, rng):
        if _is_dyadic_state(state):
            return EnvState(state.weight / 2.0, "dyadic")
        return EnvState(max(rng.uniform(0.0, c), MIN_WEIGHT), "generic")

    def probe_fn(n, rng):
        # every dyadic level down to 2**-60, plus n generic points
        dy = [EnvState(2.0 ** (-k), "dyadic") for k in range(61)]
        return dy + [EnvState(float(x), "generic") for x in rng.uniform(0.0, c, max(n, 1))]

    def window_fn(state, lo, hi):
        if _is_dyadic_state(state):
            return 1.0 if lo < state.weight / 2.0 <= hi else 0.0
        return max(0.0, min(hi, c) - max(lo, 0.0)) / c

    return SamplerKernel(step_fn, name=f"dyadic(C={c:g})", probe_fn=probe_fn, window_fn=window_fn)


def exp_mixture_survival(x: float, w, alpha: float):
    """``P(A_1 > w | A_0 = x)`` for the mixture ``(1-alpha) Exp(1) + alpha Exp(max(x,1))``."""
    xh = max(x, 1.0)
    w = np.asarray(w, dtype=float)
    return (1 - alpha) * np.exp(-w) + alpha * np.exp(-xh * w)


def exp_mixture_sampler(alpha: float) -> SamplerKernel:
    """Mixture kernel whose second component has rate ``max(x, 1)``."""
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")

    def step_fn(state, rng):
        rate = max(state.weight, 1.0) if rng.random() < alpha else 1.0
        return EnvState(max(rng.exponential(1.0 / rate), MIN_WEIGHT))

    def probe_fn(n, rng):
        return [EnvState(float(x)) for x in np.geomspace(1e-3, 1e9, n)]

    def window_fn(state, lo, hi):
        s_lo = 1.0 if lo <= 0 else float(exp_mixture_survival(state.weight, lo, alpha))
        s_hi = 0.0 if hi == math.inf else float(exp_mixture_survival(state.weight, hi, alpha))
        return s_lo - s_hi

    return SamplerKernel(step_fn, name=f"exp-mixture(alpha={alpha:g})", probe_fn=probe_fn, window_fn=window_fn)


def grid_edges(grid: np.ndarray) -> np.ndarray:
    """Cell boundaries at geometric midpoints; the outer cells reach 0 and infinity."""
    inner = np.sqrt(grid[:-1] * grid[1:])
    return np.concatenate(([0.0], inner, [math.inf]))


def discretize(survival: Callable[[float, np.ndarray], np.ndarray], grid, aux=None) -> FiniteMatrixKernel:
    """Finite kernel on ``grid`` from a survival function ``survival(x, w) = P(A_1 > w | x)``."""
    grid = np.asarray(grid, dtype=float)
    edges = grid_edges(grid)
    rows = []
    for x in grid:
        s = np.asarray(survival(float(x), edges), dtype=float)
        s[0], s[-1] = 1.0, 0.0
        row = np.clip(s[:-1] - s[1:], 0.0, None)
        rows.append(row / row.sum())
    return FiniteMatrixKernel(grid, np.array(rows), aux=aux)


def exp_mixture_grid(alpha: float, n: int = 256, lo: float = 1e-6, hi: float = 1e6) -> FiniteMatrixKernel:
    grid = np.geomspace(lo, hi, n)
    return discretize(lambda x, w: exp_mixture_survival(x, w, alpha), grid)


def dyadic_grid(c: float = 4.0, levels: int = 40, n_generic: int = 64) -> FiniteMatrixKernel:
    """Finite version of :func:`dyadic_sampler`.

    Dyadic states are ``2**-k`` for ``k < levels``; the lowest one is absorbing
    (the chain leaves the grid otherwise).  Generic states discretize
    ``Uniform(0, c)`` on a log grid.
    """
    dy = 2.0 ** -np.arange(levels)
    gen = np.geomspace(c * 1e-6, c, n_generic + 1)[:-1] * (1 + 1e-9)
    edges = grid_edges(gen)
    edges[-1] = c
    gen_row = np.diff(np.minimum(edges, c)) / c
    gen_row /= gen_row.sum()
    k = levels + n_generic
    m = np.zeros((k, k))
    for i in range(levels):
        m[i, min(i + 1, levels - 1)] = 1.0
    m[levels:, levels:] = gen_row
    aux = [("dyadic", i) for i in range(levels)] + [("generic", i) for i in range(n_generic)]
    return FiniteMatrixKernel(np.concatenate((dy, gen)), m, aux=aux)
