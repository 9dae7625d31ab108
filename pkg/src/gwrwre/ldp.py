"""Large-deviation numerics for log-weight sums along a ray.

The scaled cumulant generating function of ``S_n = W_1 + ... + W_n`` is

* exact for i.i.d. kernels (``ln E[A**lam]`` straight from the weight law),
* the log Perron root of the tilted matrix ``K(x, y) exp(lam w(y))`` for
  finite kernels,
* a population (cloning) Monte Carlo estimate otherwise.

On top of that sit the Legendre transform, the path rate functional of
piecewise-linear paths and a numerical solver for the variational problem
``sup_f {min_t f(t) - int Lambda*(f')}`` whose value is ``inf_[0,1] phi``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.special import logsumexp

from . import rng as rng_mod
from ._optimize import golden_max, golden_min
from .environment import (
    DiscreteLaw,
    EnvKernel,
    EnvState,
    FiniteMatrixKernel,
    IIDKernel,
)


class ReducibleKernelError(ValueError):
    """The tilted matrix is reducible, so its Perron root is not start-independent."""


# ---------------------------------------------------------------------------
# Perron roots


def is_irreducible(matrix: np.ndarray) -> bool:
    n, _ = connected_components(np.asarray(matrix) > 0, directed=True, connection="strong")
    return n == 1


def perron_pair(matrix: np.ndarray, tol: float = 1e-13, max_iter: int = 200_000):
    """Perron root and right eigenvector of a nonnegative irreducible matrix.

    Power iteration on ``M + cI`` (``c > 0`` makes periodic matrices primitive)
    stopped by the Collatz--Wielandt bracket ``min (Bx)/x <= rho <= max (Bx)/x``.
    """
    m = np.asarray(matrix, dtype=float)
    if m.shape[0] == 1:
        return float(m[0, 0]), np.ones(1)
    if not is_irreducible(m):
        raise ReducibleKernelError("matrix is reducible")
    shift = 0.5 * float(m.sum(axis=1).mean())
    b = m + shift * np.eye(m.shape[0])
    x = np.ones(m.shape[0])
    for _ in range(max_iter):
        y = b @ x
        ratio = y / x
        lo, hi = ratio.min(), ratio.max()
        x = y / y.max()
        if hi - lo <= tol * lo:
            rho = 0.5 * (lo + hi) - shift
            return float(rho), x
    raise ReducibleKernelError("power iteration did not converge")


def spectral_radius(matrix: np.ndarray) -> float:
    """Spectral radius of a nonnegative matrix, irreducible or not.

    The radius is the largest Perron root over the strongly connected
    components; a component without internal edges contributes 0.
    """
    m = np.asarray(matrix, dtype=float)
    n_comp, labels = connected_components(m > 0, directed=True, connection="strong")
    if n_comp == 1:
        return perron_pair(m)[0]
    best = 0.0
    for c in range(n_comp):
        idx = np.flatnonzero(labels == c)
        sub = m[np.ix_(idx, idx)]
        if np.any(sub > 0):
            best = max(best, perron_pair(sub)[0])
    return best


def perron_cgf(matrix: np.ndarray, values: np.ndarray, lam: float) -> float:
    """``ln rho(matrix * exp(lam * values)[None, :])``, computed without overflow.

    For reducible matrices this is the fastest growth rate over start states.
    """
    if lam == 0 and np.allclose(np.asarray(matrix).sum(axis=1), 1.0):
        return 0.0
    e = lam * np.asarray(values, dtype=float)
    top = e.max()
    rho = spectral_radius(np.asarray(matrix) * np.exp(e - top)[None, :])
    return float(math.log(rho) + top) if rho > 0 else -math.inf


def _log_values(kernel: EnvKernel) -> np.ndarray:
    return kernel.weights if kernel.log_weights else np.log(kernel.weights)


# ---------------------------------------------------------------------------
# CGF objects


@dataclass
class Cgf:
    """``lam -> Lambda(lam)`` with its domain and how it is computed."""

    evaluator: Callable[[float], float]
    domain: tuple = (-math.inf, math.inf)
    method: str = "closed-form"
    cache: dict = field(default_factory=dict, repr=False)

    def __call__(self, lam: float) -> float:
        lam = float(lam)
        if not self.domain[0] <= lam <= self.domain[1]:
            return math.inf
        val = self.cache.get(lam)
        if val is None:
            val = float(self.evaluator(lam))
            self.cache[lam] = val
        return val


def cgf_empirical(kernel: EnvKernel, lam: float, start: EnvState, n: int = 10_000,
                  replicas: int = 1000, rng=None, method: str = "cloning") -> float:
    """Monte Carlo estimate of ``(1/n) ln E[exp(lam S_n) | start]``.

    ``method="plain"`` averages ``exp(lam S_n)`` over independent paths; for
    large ``n`` that average is dominated by paths never sampled.
    ``method="cloning"`` runs a population of ``replicas`` walkers, multiplies
    the per-step population means of ``exp(lam W)`` and resamples by weight;
    the product is an unbiased estimate of the same expectation with far lower
    variance.
    """
    gen = rng_mod.as_generator(rng)
    if lam == 0:
        return 0.0
    if method == "plain":
        paths = kernel.sample_paths(start, n, replicas, gen)
        log_s = paths if kernel.log_weights else np.log(paths)
        return float((logsumexp(lam * log_s.sum(axis=1)) - math.log(replicas)) / n)
    if method != "cloning":
        raise ValueError(f"unknown method {method!r}")

    if isinstance(kernel, FiniteMatrixKernel):
        values = _log_values(kernel)
        cdf = np.cumsum(kernel.matrix, axis=1)
        cdf[:, -1] = 1.0
        cur = np.full(replicas, kernel.index_of(start))
        log_z = 0.0
        base = np.arange(replicas)
        for _ in range(n):
            u = gen.random(replicas)
            cur = np.minimum((u[:, None] >= cdf[cur]).sum(axis=1), kernel.size - 1)
            w = lam * values[cur]
            top = w.max()
            p = np.exp(w - top)
            tot = p.sum()
            log_z += top + math.log(tot / replicas)
            pos = (gen.random() + base) / replicas
            c = np.cumsum(p / tot)
            c[-1] = 1.0
            cur = cur[np.searchsorted(c, pos, side="right")]
        return log_z / n

    if isinstance(kernel, IIDKernel):
        # no state to clone: the population mean per step is all there is
        log_z = 0.0
        for _ in range(n):
            a = kernel.law.sample(gen, size=replicas)
            w = lam * np.log(a)
            log_z += float(logsumexp(w) - math.log(replicas))
        return log_z / n

    pop = [start] * replicas
    log_z = 0.0
    base = np.arange(replicas)
    for _ in range(n):
        pop = [kernel.step(s, gen) for s in pop]
        ws = np.array([s.weight for s in pop])
        w = lam * (ws if kernel.log_weights else np.log(ws))
        top = w.max()
        p = np.exp(w - top)
        tot = p.sum()
        log_z += top + math.log(tot / replicas)
        c = np.cumsum(p / tot)
        c[-1] = 1.0
        idx = np.searchsorted(c, (gen.random() + base) / replicas, side="right")
        pop = [pop[i] for i in idx]
    return log_z / n


def cgf(kernel: EnvKernel, lam: float, *, start: Optional[EnvState] = None, n: int = 10_000,
        replicas: int = 1000, rng=None) -> float:
    """``Lambda(lam)`` for the log-weight process of ``kernel``."""
    if lam == 0:
        return 0.0
    if isinstance(kernel, IIDKernel):
        return kernel.law.log_moment(lam)
    if isinstance(kernel, FiniteMatrixKernel):
        return perron_cgf(kernel.matrix, _log_values(kernel), lam)
    if start is None:
        raise ValueError("sampler kernels need a start state for the empirical CGF")
    return cgf_empirical(kernel, lam, start, n=n, replicas=replicas, rng=rng)


def make_cgf(kernel: EnvKernel, **kw) -> Cgf:
    if isinstance(kernel, IIDKernel):
        method = "closed-form-iid"
    elif isinstance(kernel, FiniteMatrixKernel):
        method = "perron-finite"
    else:
        method = "empirical"
    return Cgf(lambda lam: cgf(kernel, lam, **kw), method=method)


def closed_form_cgf(fn: Callable[[float], float], domain=(-math.inf, math.inf)) -> Cgf:
    return Cgf(fn, domain=domain, method="closed-form")


def iid_cgf(law) -> Cgf:
    return Cgf(law.log_moment, method="closed-form-iid")


# ---------------------------------------------------------------------------
# exponential tilting (used for importance sampling of rare hitting events)


def tilt_iid(law: DiscreteLaw, lam: float):
    """Tilted law ``p_i a_i**lam / E[A**lam]`` and ``Lambda(lam)``."""
    logs = np.log(law.probs) + lam * np.log(law.values)
    lz = float(logsumexp(logs))
    return DiscreteLaw(law.values, np.exp(logs - lz)), lz


def tilt_finite(kernel: FiniteMatrixKernel, lam: float):
    """Doob-transformed kernel of the ``lam``-tilted chain.

    Returns ``(tilted kernel, Lambda(lam), log h)`` where ``h`` is the right
    Perron vector; the likelihood ratio of a path ``x_0..x_n`` is
    ``exp(n Lambda - lam sum w + ln h(x_0) - ln h(x_n))``.
    """
    values = _log_values(kernel)
    e = lam * values
    top = e.max()
    t = kernel.matrix * np.exp(e - top)[None, :]
    rho, h = perron_pair(t)
    q = t * h[None, :] / (rho * h[:, None])
    q /= q.sum(axis=1, keepdims=True)
    tilted = FiniteMatrixKernel(kernel.weights, q, kernel.aux, kernel.thresholds, kernel.log_weights)
    return tilted, math.log(rho) + top, np.log(h)


# ---------------------------------------------------------------------------
# Legendre transform


def _grid_eval(cgf_fn, grid):
    out = np.empty(len(grid))
    for i, lam in enumerate(grid):
        try:
            v = cgf_fn(lam)
        except (OverflowError, FloatingPointError):
            v = math.inf
        out[i] = v if v == v else math.inf
    return out


def legendre_sup(cgf_fn, x: float, lambda_grid=None, domain=(-math.inf, math.inf),
                 tol: float = 1e-10, max_expand: int = 40):
    """``(Lambda*(x), maximizing lam)``; the value is ``inf`` when unbounded above."""
    grid = np.linspace(-4.0, 4.0, 81) if lambda_grid is None else np.sort(np.asarray(lambda_grid, dtype=float))
    grid = grid[(grid >= domain[0]) & (grid <= domain[1])]
    if grid.size < 3:
        grid = np.linspace(max(domain[0], -4.0), min(domain[1], 4.0), 81)

    def obj(lam):
        v = cgf_fn(lam)
        return -math.inf if v == math.inf else lam * x - v

    for _ in range(max_expand + 1):
        vals = np.array([obj(l) for l in grid])
        i = int(np.argmax(vals))
        scale = 1e-13 * max(1.0, abs(vals[i]))
        width = grid[-1] - grid[0]
        if i == grid.size - 1 and vals[i] > vals[i - 1] + scale and grid[-1] < domain[1]:
            # widen with a fixed point count; concavity keeps the bracket valid
            new_hi = min(domain[1], grid[-1] + width)
            grid = np.linspace(grid[0], new_hi, grid.size)
            continue
        if i == 0 and vals[0] > vals[1] + scale and grid[0] > domain[0]:
            new_lo = max(domain[0], grid[0] - width)
            grid = np.linspace(new_lo, grid[-1], grid.size)
            continue
        break
    else:
        return math.inf, float(grid[i])
    if (i == grid.size - 1 and vals[i] > vals[i - 1] + scale) or (i == 0 and vals[0] > vals[1] + scale):
        # maximizer pinned at a finite domain edge: the supremum is attained there
        return float(vals[i]), float(grid[i])
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, grid.size - 1)]
    lam, val = golden_max(obj, lo, hi, tol=tol)
    if vals[i] > val:
        lam, val = float(grid[i]), float(vals[i])
    return float(val), float(lam)


def legendre(cgf: Cgf, x: float, lambda_grid=None) -> float:
    """``Lambda*(x) = sup_lam {lam x - Lambda(lam)}``; ``inf`` flags an unbounded supremum."""
    return legendre_sup(cgf, x, lambda_grid, domain=cgf.domain)[0]


@dataclass
class LegendreTransform:
    base: Cgf
    lambda_grid: Optional[Sequence[float]] = None

    def __call__(self, x: float) -> float:
        return legendre(self.base, x, self.lambda_grid)


# ---------------------------------------------------------------------------
# paths and rate functionals


@dataclass(frozen=True)
class PiecewiseLinearPath:
    knots: tuple
    values: tuple

    def __post_init__(self):
        t = np.asarray(self.knots, dtype=float)
        f = np.asarray(self.values, dtype=float)
        if t.size < 2 or t.size != f.size:
            raise ValueError("need at least two knots and one value per knot")
        if t[0] != 0.0 or t[-1] != 1.0 or np.any(np.diff(t) <= 0):
            raise ValueError("knots must increase strictly from 0 to 1")
        if f[0] != 0.0:
            raise ValueError("paths start at f(0) = 0")
        if not np.all(np.isfinite(f)):
            raise ValueError("path values must be finite")
        object.__setattr__(self, "knots", tuple(float(v) for v in t))
        object.__setattr__(self, "values", tuple(float(v) for v in f))

    @classmethod
    def linear(cls, slope: float) -> "PiecewiseLinearPath":
        return cls((0.0, 1.0), (0.0, slope))

    @classmethod
    def from_slopes(cls, slopes, knots=None) -> "PiecewiseLinearPath":
        slopes = np.asarray(slopes, dtype=float)
        t = np.linspace(0.0, 1.0, slopes.size + 1) if knots is None else np.asarray(knots, dtype=float)
        f = np.concatenate(([0.0], np.cumsum(slopes * np.diff(t))))
        return cls(tuple(t), tuple(f))

    @property
    def slopes(self) -> np.ndarray:
        return np.diff(self.values) / np.diff(self.knots)

    def minimum(self) -> float:
        return min(self.values)

    def __call__(self, t):
        return np.interp(t, self.knots, self.values)


def rate_functional(path: PiecewiseLinearPath, legendre_fn) -> float:
    """``int_0^1 Lambda*(f'(u)) du`` for a piecewise-linear path."""
    total = []
    for dt, s in zip(np.diff(path.knots), path.slopes):
        v = legendre_fn(float(s))
        if v == math.inf:
            return math.inf
        total.append(dt * v)
    return math.fsum(total)


def inf_cgf_01(cgf_fn, tol: float = 1e-10):
    """``(min over [0, 1] of the convex Lambda, argmin)`` by golden section."""
    lam, val = golden_min(cgf_fn, 0.0, 1.0, tol=tol)
    return float(val), float(lam)


# ---------------------------------------------------------------------------
# variational formula


@dataclass
class VariationalResult:
    value: float          # achieved min f - I(f), exact Legendre transform
    infimum: float        # inf over [0, 1] of phi
    argmin: float
    path: PiecewiseLinearPath
    gap: float            # infimum - value
    restarts: int
    restart_values: tuple = ()

    @property
    def within(self) -> bool:
        return -1e-9 <= self.gap <= 1e-3


class _HullConjugate:
    """Legendre transform of ``phi`` restricted to a fine lambda grid.

    The maximizing grid point for slope ``x`` is found by bisection on the
    chord slopes of the sampled convex function.
    """

    def __init__(self, grid: np.ndarray, phi_vals: np.ndarray):
        self.grid = grid
        self.phi = phi_vals
        chords = np.diff(phi_vals) / np.diff(grid)
        self.chords = np.maximum.accumulate(chords)

    def __call__(self, x: float) -> float:
        i = int(np.searchsorted(self.chords, x))
        return self.grid[i] * x - self.phi[i]


def variational_solve(phi: Callable[[float], float], k_pieces: int = 64, restarts: int = 8,
                      interval=(-4.0, 4.0), rng=0, max_sweeps: int = 400,
                      random_sweeps: int = 30, grid_size: int = 4001) -> VariationalResult:
    """Maximize ``min_t f(t) - int_0^1 phi*(f')`` over ``k_pieces``-piece paths.

    ``phi*`` is the Legendre transform of ``phi`` over ``interval`` (which must
    contain ``[0, 1]``).  The optimizer is coordinate ascent that alternates
    slope coordinates (shifting a whole tail of the path) with knot
    coordinates.  Restart 0 starts from the best straight line and is polished
    for up to ``max_sweeps`` sweeps; the others start from random paths and get
    ``random_sweeps`` sweeps each, enough to show that no bent path overtakes
    the line.  The winning path is then re-scored with the exact transform.
    """
    lo, hi = interval
    if not (lo <= 0.0 and hi >= 1.0):
        raise ValueError("the lambda interval must contain [0, 1]")
    if abs(phi(0.0)) > 1e-10:
        raise ValueError("phi(0) must be 0")
    gen = rng_mod.as_generator(rng)
    grid = np.unique(np.concatenate((np.linspace(lo, hi, grid_size), [0.0, 1.0])))
    phi_vals = np.array([phi(l) for l in grid], dtype=float)
    conj = _HullConjugate(grid, phi_vals)
    s_lo, s_hi = conj.chords[0] - 1.0, conj.chords[-1] + 1.0
    # chord slopes bracketing the pieces on which the active lambda is 0 or 1
    flat = []
    for target in (0.0, 1.0):
        i = int(np.searchsorted(grid, target))
        flat += [conj.chords[max(i - 1, 0)], conj.chords[min(i, conj.chords.size - 1)]]
    k = k_pieces

    def objective(v):
        s = np.diff(v) * k
        return min(v) - sum(conj(x) for x in s) / k

    def polish(v, sweeps):
        v = v.copy()
        best = objective(v)
        for _ in range(sweeps):
            start = best
            # slope coordinates: g is concave and piecewise linear, so its
            # maximum sits at the kink or where the active lambda crosses 0 or 1
            for j in range(k):
                a = min(v[: j + 1])
                tail = v[j + 1:]
                b = min(tail)
                s_j = (v[j + 1] - v[j]) * k
                cands = list(flat) + [s_j + k * (a - b)]
                best_s, best_g = s_j, -math.inf
                for s in cands:
                    s = min(max(s, s_lo), s_hi)
                    gv = min(a, b + (s - s_j) / k) - conj(s) / k
                    if gv > best_g:
                        best_s, best_g = s, gv
                v[j + 1:] = tail + (best_s - s_j) / k
            # knot coordinates
            for j in range(1, k + 1):
                others = min(min(v[:j]), min(v[j + 1:]) if j < k else math.inf)
                left = v[j - 1]
                right = v[j + 1] if j < k else None

                def g(x, others=others, left=left, right=right):
                    val = min(others, x) - conj((x - left) * k) / k
                    if right is not None:
                        val -= conj((right - x) * k) / k
                    return val

                v[j], _ = golden_max(g, left + s_lo / k, left + s_hi / k, tol=1e-13)
            best = objective(v)
            if best - start < 1e-14:
                break
        return v, best

    # best straight line
    c, _ = golden_max(lambda c: min(0.0, c) - conj(c), s_lo, s_hi, tol=1e-12)
    starts = [np.linspace(0.0, c, k + 1)]
    for _ in range(restarts - 1):
        slopes = gen.uniform(conj.chords[0], conj.chords[-1], size=k)
        starts.append(np.concatenate(([0.0], np.cumsum(slopes) / k)))

    best_v, best_val = None, -math.inf
    values = []
    for i, v0 in enumerate(starts):
        v, val = polish(v0, max_sweeps if i == 0 else min(max_sweeps, random_sweeps))
        values.append(val)
        if val > best_val:
            best_v, best_val = v, val

    path = PiecewiseLinearPath(tuple(np.linspace(0.0, 1.0, k + 1)), tuple([0.0] + list(best_v[1:])))

    def exact_conj(x):
        i = int(np.argmax(grid * x - phi_vals))
        a, b = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
        _, val = golden_max(lambda l: l * x - phi(l), a, b, tol=1e-12)
        return max(val, float(grid[i] * x - phi_vals[i]))

    value = path.minimum() - rate_functional(path, exact_conj)
    infimum, argmin = inf_cgf_01(phi)
    return VariationalResult(value, infimum, argmin, path, infimum - value, len(starts), tuple(values))
