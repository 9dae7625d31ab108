"""Hitting probabilities of the walk restricted to a single ray.

On a ray ``rho = s_0 < s_1 < ... < s_n`` the restricted walk is a birth--death
chain that steps from ``s_r`` up to ``s_{r+1}`` with probability
``a_{r+1} / (1 + a_{r+1})``.  The chance of reaching ``s_n`` before the extra
parent below the root is

    P(T_n < T_-1) = 1 / sum_{r=0}^{n} prod_{j<=r} 1/a_j,

evaluated here in log space.  Annealed versions average this over the
environment chain, with optional exponential tilting for the rare-event
regime, and the reinforced comparison quantities ``q^D``, ``q^A`` and
``Phi`` are built from the same sums.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

from . import rng as rng_mod
from .environment import (
    DiscreteLaw,
    EnvKernel,
    EnvState,
    FiniteMatrixKernel,
    IIDKernel,
    StateDistribution,
)
from .ldp import inf_cgf_01, is_irreducible, make_cgf, tilt_finite, tilt_iid


@dataclass(frozen=True)
class RayWeights:
    """Weights ``a_1..a_n`` along a ray, optionally with reinforced weights ``d``."""

    a: tuple
    d: Optional[tuple] = None
    thresholds: Optional[tuple] = None

    def __post_init__(self):
        a = tuple(self.a)
        if any(not (x > 0 and math.isfinite(x)) for x in a):
            raise ValueError("ray weights must be positive and finite")
        object.__setattr__(self, "a", a)
        for name in ("d", "thresholds"):
            val = getattr(self, name)
            if val is not None:
                val = tuple(val)
                if len(val) != len(a):
                    raise ValueError(f"{name} must have the same length as a")
                if any(not x > 0 for x in val):
                    raise ValueError(f"{name} entries must be positive")
                object.__setattr__(self, name, val)

    @classmethod
    def reinforced(cls, a: Sequence[float], thresholds: Sequence[float], L: float) -> "RayWeights":
        """``d_i = L`` where ``a_i < b_i`` and ``a_i`` otherwise."""
        d = tuple(L if x < b else x for x, b in zip(a, thresholds))
        return cls(tuple(a), d, tuple(thresholds))

    @property
    def n(self) -> int:
        return len(self.a)


def _as_array(weights) -> np.ndarray:
    if isinstance(weights, RayWeights):
        weights = weights.a
    return np.asarray(weights, dtype=float)


def compensated_cumsum(x: np.ndarray) -> np.ndarray:
    """Running sums along the last axis with Neumaier compensation."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    s = np.zeros(x.shape[:-1])
    c = np.zeros(x.shape[:-1])
    for j in range(x.shape[-1]):
        v = x[..., j]
        t = s + v
        big = np.abs(s) >= np.abs(v)
        c += np.where(big, (s - t) + v, (v - t) + s)
        s = t
        out[..., j] = s + c
    return out


def log_hit_prob(log_a: np.ndarray) -> np.ndarray:
    """``ln P(T_n < T_-1)`` for each row of log-weights (shape ``(..., n)``)."""
    log_a = np.asarray(log_a, dtype=float)
    if log_a.shape[-1] == 0:
        return np.zeros(log_a.shape[:-1])
    c = compensated_cumsum(log_a)
    zero = np.zeros(log_a.shape[:-1] + (1,))
    return -logsumexp(np.concatenate((zero, -c), axis=-1), axis=-1)


def hit_prob_exact(weights: Union[RayWeights, Sequence[float]]) -> float:
    """Quenched probability of reaching the end of the ray before the root's parent."""
    a = _as_array(weights)
    if a.size == 0:
        return 1.0
    if np.any(a <= 0):
        raise ValueError("ray weights must be positive")
    return float(math.exp(log_hit_prob(np.log(a))))


def hit_prob_batch(log_a: np.ndarray) -> np.ndarray:
    return np.exp(log_hit_prob(log_a))


# ---------------------------------------------------------------------------
# annealed hitting probabilities


def _log_paths(kernel: EnvKernel, start, n: int, replicas: int, gen, law_or_kernel=None):
    """``(replicas, n)`` log-weights sampled from ``kernel`` (or a tilted stand-in)."""
    k = law_or_kernel if law_or_kernel is not None else kernel
    if isinstance(start, StateDistribution):
        if isinstance(k, FiniteMatrixKernel):
            cdf = np.cumsum(start.probs)
            cdf[-1] = 1.0
            picks = np.searchsorted(cdf, gen.random(replicas), side="right")
            idx0 = np.array([k.index_of(start.states[i]) for i in picks])
            idx = k.sample_index_paths(idx0, n, replicas, gen)
            w = k.weights[idx[:, 1:]]
            return (w if k.log_weights else np.log(w)), idx
        starts = [start.sample(gen) for _ in range(replicas)]
        rows = [k.sample_paths(s, n, 1, gen)[0] for s in starts]
        w = np.array(rows).reshape(replicas, n)
        return (w if k.log_weights else np.log(w)), None
    if isinstance(k, FiniteMatrixKernel):
        idx = k.sample_index_paths(k.index_of(start), n, replicas, gen)
        w = k.weights[idx[:, 1:]]
        return (w if k.log_weights else np.log(w)), idx
    w = k.sample_paths(start, n, replicas, gen)
    return (w if k.log_weights else np.log(w)), None


def _tilt_lambda(kernel: EnvKernel) -> float:
    _, lam = inf_cgf_01(make_cgf(kernel))
    return lam


def annealed_hit_samples(kernel: EnvKernel, start, n: int, replicas: int, rng=None,
                         method: str = "auto") -> np.ndarray:
    """Unbiased per-replica samples whose mean is ``P(T_n < T_-1 | start)``.

    ``method="plain"`` samples environments from the kernel.  ``"tilted"``
    samples from the exponentially tilted kernel at the minimizer of the CGF
    on ``[0, 1]`` and multiplies by the likelihood ratio; this is what makes
    probabilities of order ``exp(-n)`` reachable with ``10**4`` replicas.
    ``"auto"`` tilts whenever the kernel admits an exact tilt.
    """
    if replicas < 1:
        raise ValueError("replicas must be at least 1")
    gen = rng_mod.as_generator(rng)
    if method == "auto":
        exact = (isinstance(kernel, FiniteMatrixKernel) and is_irreducible(kernel.matrix)) or (
            isinstance(kernel, IIDKernel) and isinstance(kernel.law, DiscreteLaw))
        method = "tilted" if exact else "plain"
    if method == "plain":
        log_a, _ = _log_paths(kernel, start, n, replicas, gen)
        return hit_prob_batch(log_a)
    if method != "tilted":
        raise ValueError(f"unknown method {method!r}")

    lam = _tilt_lambda(kernel)
    if lam == 0.0:
        log_a, _ = _log_paths(kernel, start, n, replicas, gen)
        return hit_prob_batch(log_a)
    if isinstance(kernel, IIDKernel):
        tilted, big_lambda = tilt_iid(kernel.law, lam)
        log_a, _ = _log_paths(kernel, start, n, replicas, gen, IIDKernel(tilted, kernel.log_weights))
        log_lr = n * big_lambda - lam * log_a.sum(axis=1)
    elif isinstance(kernel, FiniteMatrixKernel):
        tilted, big_lambda, log_h = tilt_finite(kernel, lam)
        log_a, idx = _log_paths(kernel, start, n, replicas, gen, tilted)
        log_lr = n * big_lambda - lam * log_a.sum(axis=1) + log_h[idx[:, 0]] - log_h[idx[:, -1]]
    else:
        raise TypeError("tilted sampling needs an i.i.d. discrete or finite kernel")
    return np.exp(log_hit_prob(log_a) + log_lr)


def annealed_hit_prob(kernel: EnvKernel, start, n: int, replicas: int, rng=None,
                      method: str = "auto"):
    """``(estimate, stderr)`` of the annealed hitting probability of level ``n``."""
    x = annealed_hit_samples(kernel, start, n, replicas, rng, method)
    if np.all(x == x[0]):
        # a deterministic environment gives the exact value, with no error
        return float(x[0]), 0.0
    se = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
    return float(x.mean()), se


# ---------------------------------------------------------------------------
# rates


@dataclass(frozen=True)
class RateEstimate:
    """``(1/n) ln`` of hitting probabilities, averaged over start states.

    ``value`` averages ``ln P(T_n < T_-1 | start = y)`` over the start law;
    ``annealed_rate`` is ``(1/n) ln`` of the start-averaged probability.  By
    Jensen ``value <= annealed_rate``.  ``trend`` is the slope of ``value``
    against ``ln n`` over the last decade of ``n`` when a sequence was run.
    """

    n: int
    value: float
    stderr: float
    annealed_rate: float = math.nan
    annealed_stderr: float = math.nan
    trend: Optional[float] = None

    @property
    def jensen_ok(self) -> bool:
        slack = 3.0 * (self.stderr + self.annealed_stderr)
        return self.value <= self.annealed_rate + slack + 1e-12


def _start_atoms(start, outer: int):
    if isinstance(start, EnvState):
        return [start], np.ones(1)
    if not isinstance(start, StateDistribution):
        raise TypeError("start must be an EnvState or a StateDistribution")
    if not start.empirical:
        return list(start.states), np.asarray(start.probs)
    # empirical laws: a fixed subsample of atoms, equally weighted
    m = min(outer, len(start.states))
    picks = np.linspace(0, len(start.states) - 1, m).round().astype(int)
    return [start.states[i] for i in picks], np.full(m, 1.0 / m)


def rate_estimate(kernel: EnvKernel, start, n: int, replicas: int, rng=None,
                  method: str = "auto", outer: int = 32) -> RateEstimate:
    """Estimate the hitting rate at level ``n``.

    ``start`` is either one state or a distribution over start states (for
    example ``beta_measure``).  Each atom ``y`` gets its own annealed estimate
    ``P_y`` from ``replicas`` environments; for i.i.d. kernels the start is
    irrelevant and one estimate is used.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    gen = rng_mod.as_generator(rng)
    if isinstance(kernel, IIDKernel):
        atoms, probs = [EnvState(1.0)], np.ones(1)
    else:
        atoms, probs = _start_atoms(start, outer)
    ests, ses = [], []
    for y in atoms:
        p, se = annealed_hit_prob(kernel, y, n, replicas, gen, method)
        ests.append(p)
        ses.append(se)
    ests, ses = np.array(ests), np.array(ses)
    with np.errstate(divide="ignore"):
        logs = np.log(ests)
    value = float(np.dot(probs, logs) / n)
    rel = np.divide(ses, ests, out=np.full_like(ses, math.inf), where=ests > 0)
    stderr = float(math.sqrt(np.dot(probs**2, rel**2)) / n)
    total = float(np.dot(probs, ests))
    total_se = float(math.sqrt(np.dot(probs**2, ses**2)))
    annealed = math.log(total) / n if total > 0 else -math.inf
    annealed_se = total_se / total / n if total > 0 else math.inf
    return RateEstimate(n, value, stderr, annealed, annealed_se)


def rate_trend(kernel: EnvKernel, start, ns: Sequence[int], replicas: int, rng=None,
               method: str = "auto") -> list:
    """Rate estimates along ``ns``; the last one carries the trend slope.

    The slope is the least-squares slope of ``value`` against ``ln n`` over
    the ``n`` in ``[n_max / 10, n_max]``.
    """
    gen = rng_mod.as_generator(rng)
    ns = sorted(int(n) for n in ns)
    out = [rate_estimate(kernel, start, n, replicas, gen, method) for n in ns]
    top = ns[-1]
    sel = [(math.log(e.n), e.value) for e in out if e.n * 10 >= top and math.isfinite(e.value)]
    if len(sel) >= 2:
        x, y = np.array(sel).T
        slope = float(np.polyfit(x, y, 1)[0])
        last = out[-1]
        out[-1] = RateEstimate(last.n, last.value, last.stderr, last.annealed_rate,
                               last.annealed_stderr, slope)
    return out


# ---------------------------------------------------------------------------
# reinforced comparison quantities


@dataclass(frozen=True)
class ReinforcedRay:
    """``Q^D_0..Q^D_n`` and ``q^D_i``, ``q^A_i``, ``Phi_i`` for ``i = 1..n``.

    ``one_minus_qD[i-1]`` holds ``1 - q^D_i`` computed without cancellation.
    ``hit_prob`` is the product of the ``q^A``: the probability that the
    reinforced walk started at the root reaches level ``n`` first.
    """

    QD: tuple
    qD: tuple
    qA: tuple
    Phi: tuple
    one_minus_qD: tuple

    @property
    def hit_prob(self):
        return self.Phi[-1] * self.QD[-1] if self.Phi else 1.0


def _exact_quantities(a, d):
    n = len(a)
    s, prod = Fraction(1), Fraction(1)
    QD, qD, omq = [Fraction(1)], [], []
    for j in range(n):
        prod /= d[j]
        s += prod
        QD.append(1 / s)
        qD.append(QD[-1] / QD[-2])
        omq.append(prod / s)
    qA, Phi, phi = [], [], Fraction(1)
    for i in range(n):
        prev = omq[i - 1] if i else Fraction(1)
        qA.append(a[i] / (a[i] + prev))
        phi *= qA[-1] / qD[i]
        Phi.append(phi)
    return ReinforcedRay(tuple(QD), tuple(qD), tuple(qA), tuple(Phi), tuple(omq))


def reinforced_ray_quantities(weights: RayWeights, exact: bool = False) -> ReinforcedRay:
    """Comparison quantities between the reinforced walk and the ``D`` walk.

    ``q^D_i = Q^D_i / Q^D_{i-1}`` and ``q^A_i = a_i / (1 + a_i - q^D_{i-1})``
    with ``q^D_0 = 0``; ``Phi_n`` is the product of ``q^A_i / q^D_i``.  With
    ``exact=True`` everything is done in rational arithmetic (inputs are
    converted with ``Fraction``).
    """
    if weights.d is None:
        raise ValueError("reinforced quantities need the d sequence")
    if exact:
        a = [Fraction(x) for x in weights.a]
        d = [Fraction(x) for x in weights.d]
        return _exact_quantities(a, d)
    a = np.asarray(weights.a, dtype=float)
    log_d = np.log(np.asarray(weights.d, dtype=float))
    n = a.size
    c = compensated_cumsum(log_d[None, :])[0]
    terms = np.concatenate(([0.0], -c))
    log_s = np.logaddexp.accumulate(terms)
    log_q = -log_s
    QD = np.exp(log_q)
    qD = np.exp(log_q[1:] - log_q[:-1])
    omq = np.exp(terms[1:] - log_s[1:])
    prev = np.concatenate(([1.0], omq[:-1]))
    qA = a / (a + prev)
    Phi = np.exp(np.cumsum(np.log(qA) - (log_q[1:] - log_q[:-1]))) if n else np.empty(0)
    return ReinforcedRay(*(tuple(x.tolist()) for x in (QD, qD, qA, Phi, omq)))
