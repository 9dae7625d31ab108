"""Numerical evaluation of the transience and recurrence criteria.

Every classifier returns a ``RegimeReport`` holding the criterion that
decided, the verdict and the signed margin of the decisive inequality.  A
margin within ``tol`` of zero always gives ``Indeterminate``: the criteria
say nothing on their boundaries.

Criterion tags:

* ``iid`` -- i.i.d. weights, ``inf_[0,1] ln E[A^lam] + ln b`` against 0;
* ``markov-transience`` / ``markov-recurrence`` -- Markov weights, truncated
  Perron CGF plus ``ln(1 - eta)`` for transience, untruncated CGF for
  recurrence;
* ``reinforced`` / ``reinforced-full-mass`` -- reinforced walk with
  ``L, p >= 1``, decided by ``ln(1 - eta) + ln b`` (the second tag when
  ``eta = 0``, which is always transient);
* ``reinforced-below-threshold`` -- reinforced walk with ``L < p``, decided by
  the CGF of ``ln D`` under the kernel restricted to ``A >= L``;
* ``constant-threshold`` -- the constant-threshold case, which can also
  certify positive recurrence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import rng as rng_mod
from .environment import (
    DiscreteLaw,
    EnvKernel,
    EnvState,
    FiniteMatrixKernel,
    IIDKernel,
    MinorizationReport,
    StateDistribution,
    TruncationWindow,
    ZeroMassRowError,
    beta_measure,
    check_assumption1,
    eta_estimate,
    log_transform,
    truncate,
)
from .gw_tree import LazyTree, OffspringLaw
from .ldp import ReducibleKernelError, iid_cgf, inf_cgf_01, make_cgf, perron_cgf, perron_pair
from .parallel import map_replicas
from .ray_analysis import annealed_hit_prob
from .walk import ReinforcedParams, WalkEnvironment

TRANSIENT = "Transient"
RECURRENT = "Recurrent"
POSITIVE_RECURRENT = "PositiveRecurrent"
INDETERMINATE = "Indeterminate"

DEFAULT_TOL = 1e-6


class ScopeError(ValueError):
    """The parameters fall outside every criterion's hypotheses."""


@dataclass
class RegimeReport:
    criterion: str
    verdict: str
    margin: float
    inputs: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = {"criterion": self.criterion, "verdict": self.verdict, "margin": self.margin}
        for k, v in self.inputs.items():
            if isinstance(v, (int, float, str)) or v is None:
                out[k] = v
        return out

    def text(self) -> str:
        lines = [f"criterion: {self.criterion}", f"verdict:   {self.verdict}",
                 f"margin:    {self.margin:.6g}"]
        lines += [f"  {k} = {v}" for k, v in self.inputs.items()]
        return "\n".join(lines)


def _verdict(margin: float, tol: float, positive: str, negative: Optional[str]) -> str:
    if margin > tol:
        return positive
    if negative is not None and margin < -tol:
        return negative
    return INDETERMINATE


# ---------------------------------------------------------------------------
# i.i.d. and Markov weights


def classify_iid(law, b: float, tol: float = DEFAULT_TOL) -> RegimeReport:
    """Transient when ``inf_[0,1] E[A^lam] > 1/b``, recurrent when below."""
    if b <= 1:
        raise ValueError("the branching number must exceed 1")
    if isinstance(law, IIDKernel):
        law = law.law
    val, lam = inf_cgf_01(iid_cgf(law))
    margin = val + math.log(b)
    return RegimeReport("iid", _verdict(margin, tol, TRANSIENT, RECURRENT), margin,
                        {"b": b, "inf_moment": math.exp(val), "inf_cgf": val, "argmin": lam})


def _log_range(kernel: EnvKernel):
    """``(min, max)`` of ``ln A`` over the support, when it is finite and known."""
    if isinstance(kernel, FiniteMatrixKernel):
        w = kernel.weights if kernel.log_weights else np.log(kernel.weights)
        return float(w.min()), float(w.max())
    if isinstance(kernel, IIDKernel) and isinstance(kernel.law, DiscreteLaw):
        w = np.log(kernel.law.values)
        return float(w.min()), float(w.max())
    return None


def default_windows(kernel: EnvKernel, levels: Sequence[float] = (1, 2, 4, 8, 16, 32)) -> list:
    """Nested symmetric windows ``(-k, k]``, plus one covering the support if known."""
    wins = [TruncationWindow(-float(k), float(k)) for k in levels]
    rng_ = _log_range(kernel)
    if rng_ is not None:
        lo, hi = rng_
        if not (lo > -levels[-1] and hi <= levels[-1]):
            wins.append(TruncationWindow(min(lo, -levels[-1]) - 1.0, max(hi, levels[-1])))
    return wins


def _minorization(kernel: EnvKernel, minorization: Optional[MinorizationReport]) -> MinorizationReport:
    if minorization is not None:
        return minorization
    if isinstance(kernel, (IIDKernel, FiniteMatrixKernel)):
        return check_assumption1(kernel)
    raise ValueError("sampler kernels need an asserted MinorizationReport")


def classify_markov(kernel: EnvKernel, b: float, windows: Optional[Sequence[TruncationWindow]] = None,
                    eta_grid: Optional[Sequence[tuple]] = None, tol: float = DEFAULT_TOL,
                    minorization: Optional[MinorizationReport] = None, start: Optional[EnvState] = None,
                    cgf_kw: Optional[dict] = None) -> RegimeReport:
    """Markov-environment criteria.

    Transience: ``inf_[0,1] Lambda_Q + ln b + ln(1 - eta) > 0`` where ``Q`` is
    the kernel truncated to the widest window and ``eta`` the window escape
    probability at the widest ``(eps, r)`` pair.  Recurrence:
    ``inf_[0,1] Lambda + ln b < 0`` for the untruncated log kernel.  The
    truncated infima for all windows are reported so the trend is visible.
    """
    if b <= 1:
        raise ValueError("the branching number must exceed 1")
    cgf_kw = dict(cgf_kw or {})
    if start is not None:
        cgf_kw.setdefault("start", start)
    report = _minorization(kernel, minorization)
    if not report.satisfied:
        raise ValueError("the minorization condition is not satisfied for this kernel")
    k_ln = kernel if kernel.log_weights else log_transform(kernel)
    user_windows = windows is not None
    windows = list(windows) if user_windows else default_windows(kernel)
    trend = []
    for w in windows:
        try:
            q = truncate(k_ln, w)
        except ZeroMassRowError:
            if user_windows:
                raise
            continue
        val, _ = inf_cgf_01(make_cgf(q, **_cgf_args(q, cgf_kw)))
        trend.append((str(w), val))
    if not trend:
        raise ZeroMassRowError("<kernel>", "every window")
    if eta_grid is None:
        eta_grid = [(math.exp(w.lower), math.exp(w.upper)) for w in windows]
    eps, r = min(eta_grid, key=lambda er: (er[0], -er[1]))
    eta = eta_estimate(kernel, eps, r).value
    inf_q = trend[-1][1]
    margin_t = inf_q + math.log(b) + (math.log1p(-eta) if eta < 1 else -math.inf)
    inf_k, lam = inf_cgf_01(make_cgf(k_ln, **_cgf_args(k_ln, cgf_kw)))
    margin_r = inf_k + math.log(b)
    inputs = {"b": b, "eta": eta, "eta_eps": eps, "eta_r": r, "window": trend[-1][0],
              "inf_cgf_truncated": inf_q, "inf_cgf": inf_k, "argmin": lam,
              "transience_margin": margin_t, "recurrence_margin": margin_r,
              "window_trend": trend, "ell": report.ell, "n_mix": report.n_mix, "kappa": report.kappa}
    if margin_t > tol:
        return RegimeReport("markov-transience", TRANSIENT, margin_t, inputs)
    if margin_r < -tol:
        return RegimeReport("markov-recurrence", RECURRENT, margin_r, inputs)
    if math.isfinite(margin_t):
        return RegimeReport("markov-transience", INDETERMINATE, margin_t, inputs)
    return RegimeReport("markov-recurrence", INDETERMINATE, margin_r, inputs)


def _cgf_args(kernel, cgf_kw):
    if isinstance(kernel, (IIDKernel, FiniteMatrixKernel)):
        return {}
    return cgf_kw


# ---------------------------------------------------------------------------
# green branching test


@dataclass
class GreenTestResult:
    """First level ``n*`` at which ``b^n P(T_-1 > T_n)`` (discounted) certifiably exceeds 1."""

    n_star: Optional[int]
    product: float
    stderr: float
    discount: float = 1.0
    scan: list = field(default_factory=list)


def green_discount(kernel: EnvKernel, survival: float, eps: float,
                   minorization: MinorizationReport) -> float:
    """``delta_eps (eps/(1+eps))^N (1 - q)`` with ``delta_eps = kappa^-1 (1 - eta_eps)^(N+ell)``."""
    eta = eta_estimate(kernel, eps, math.inf).value
    delta = (1.0 - eta) ** (minorization.n_mix + minorization.ell) / minorization.kappa
    return delta * (eps / (1.0 + eps)) ** minorization.n_mix * survival


def green_branching_test(kernel: EnvKernel, b: float, survival: float = 1.0, n_max: int = 30,
                         replicas: int = 10_000, rng=None, start=None, eps: float = 1e-3,
                         minorization: Optional[MinorizationReport] = None,
                         x_star: Optional[EnvState] = None) -> GreenTestResult:
    """Scan ``n = 1..n_max`` for a certified supercritical green tree.

    For i.i.d. weights the product is ``b^n P(T_-1 > T_n)``.  Otherwise it is
    discounted by the acceptance constant, the ``eps`` factor and the survival
    probability, and the hitting probability is averaged over start states
    drawn from ``beta_eps`` (built from ``x_star``) unless ``start`` is given.
    """
    gen = rng_mod.as_generator(rng)
    if isinstance(kernel, IIDKernel):
        discount = 1.0
        start = EnvState(1.0) if start is None else start
    else:
        report = _minorization(kernel, minorization)
        if not report.satisfied:
            raise ValueError("the minorization condition is not satisfied for this kernel")
        discount = green_discount(kernel, survival, eps, report)
        if start is None:
            if x_star is None:
                raise ValueError("non-i.i.d. kernels need x_star (or an explicit start)")
            start = beta_measure(kernel, eps, x_star, report.ell, rng=gen)
    scan = []
    best = (None, 0.0, 0.0)
    for n in range(1, n_max + 1):
        p, se = annealed_hit_prob(kernel, start, n, replicas, gen)
        scale = b**n * discount
        prod, s = scale * p, scale * se
        scan.append((n, prod, s))
        if prod - 3.0 * s > 1.0:
            return GreenTestResult(n, prod, s, discount, scan)
        if best[0] is None or prod > best[1]:
            best = (n, prod, s)
    return GreenTestResult(None, best[1], best[2], discount, scan)


# ---------------------------------------------------------------------------
# conductances


@dataclass
class ConductanceReport:
    """Level sums ``S_n`` of ancestral weight products and their ratios."""

    level_sums: list
    ratios: list
    partial_sum: float
    mean_ratio: float
    level_range: tuple
    diverging: bool
    tail_bound: float

    def row(self) -> dict:
        return {"partial_sum": self.partial_sum, "mean_ratio": self.mean_ratio,
                "diverging": self.diverging, "tail_bound": self.tail_bound}


def level_sums(env: WalkEnvironment, depth_max: int) -> np.ndarray:
    """``S_n = sum over |v| = n of prod of A along the ancestry of v`` (root weight excluded)."""
    sums = np.zeros(depth_max + 1)
    level = [(0, 1.0)]
    for n in range(depth_max + 1):
        sums[n] = math.fsum(c for _, c in level)
        if n == depth_max:
            break
        nxt = []
        for i, c in level:
            kids, weights = env.children_node(i)
            nxt.extend((k, c * a) for k, a in zip(kids, weights))
        level = nxt
    return sums


def _report_from_sums(sums: np.ndarray, level_range) -> ConductanceReport:
    depth_max = sums.size - 1
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = sums[1:] / sums[:-1]
    lo, hi = level_range if level_range is not None else (max(0, depth_max // 2), depth_max)
    sel = ratios[lo:hi]
    sel = sel[np.isfinite(sel)]
    mean_ratio = float(sel.mean()) if sel.size else math.nan
    partial = float(math.fsum(sums))
    diverging = bool(mean_ratio >= 1.0) if math.isfinite(mean_ratio) else False
    if math.isfinite(mean_ratio) and mean_ratio < 1.0:
        tail = float(sums[-1] * mean_ratio / (1.0 - mean_ratio))
    else:
        tail = math.inf if sums[-1] > 0 else 0.0
    return ConductanceReport(sums.tolist(), ratios.tolist(), partial, mean_ratio,
                             (lo, hi), diverging, tail)


def conductance_diagnostic(env: WalkEnvironment, depth_max: int, level_range=None) -> ConductanceReport:
    """Level sums along one realized tree, their ratios over ``level_range`` and the partial sum."""
    return _report_from_sums(level_sums(env, depth_max), level_range)


def conductance_ensemble(law: OffspringLaw, kernel: EnvKernel, depth_max: int, replicas: int,
                         seed: int, level_range=None, root_state: Optional[EnvState] = None,
                         workers: int = 1) -> ConductanceReport:
    """Level sums pooled over independent trees (ratios of pooled sums)."""

    def one(r):
        s = rng_mod.replica_seed(seed, r)
        env = WalkEnvironment(LazyTree(law, s), kernel, root_state, seed=s)
        return level_sums(env, depth_max)

    pooled = np.sum(map_replicas(one, replicas, workers), axis=0)
    return _report_from_sums(pooled, level_range)


# ---------------------------------------------------------------------------
# reinforced walk


def _finite_view(kernel: EnvKernel) -> FiniteMatrixKernel:
    """Finite kernel on the ``A`` scale; i.i.d. discrete laws become identical rows."""
    if isinstance(kernel, FiniteMatrixKernel):
        if kernel.log_weights:
            return FiniteMatrixKernel(np.exp(kernel.weights), kernel.matrix, kernel.aux, kernel.thresholds)
        return kernel
    if isinstance(kernel, IIDKernel) and isinstance(kernel.law, DiscreteLaw):
        law = kernel.law
        return FiniteMatrixKernel(law.values, np.tile(law.probs, (law.values.size, 1)))
    raise TypeError("reinforced criteria need a finite kernel or an i.i.d. discrete law")


def d_values(kernel: FiniteMatrixKernel, params: ReinforcedParams) -> np.ndarray:
    """``D = L`` where ``A < b`` and ``A`` otherwise, per state."""
    a = kernel.weights
    thr = np.array([params.threshold_of(s) for s in kernel.states()])
    return np.where(a < thr, params.L, a)


def restricted_d_kernel(kernel: EnvKernel, params: ReinforcedParams, upper: float = math.inf):
    """States with ``ln A`` in ``[ln L, upper]``, renormalized, with their ``D`` values."""
    fin = _finite_view(kernel)
    win = TruncationWindow(math.log(params.L), upper, closed_lower=True)
    q = truncate(log_transform(fin), win)
    back = FiniteMatrixKernel(np.exp(q.weights), q.matrix, q.aux, q.thresholds)
    return back, d_values(back, params)


def d_cgf(kernel: FiniteMatrixKernel, d: np.ndarray):
    """``lam -> Lambda`` of ``sum ln D`` under ``kernel``."""
    log_d = np.log(d)
    return lambda lam: perron_cgf(kernel.matrix, log_d, lam)


def classify_reinforced(kernel_star: EnvKernel, b: float, params: ReinforcedParams,
                        eta_grid: Optional[Sequence[tuple]] = None,
                        windows: Optional[Sequence[float]] = None,
                        tol: float = DEFAULT_TOL) -> RegimeReport:
    """Criteria for the reinforced walk.

    ``L, p >= 1``: transient when ``ln(1 - eta) + ln b > 0`` (always when
    ``eta = 0``).  ``L < p``: transient when
    ``inf_[0,1] Lambda_D + ln b + ln(1 - eta_L) > 0``, where ``Lambda_D`` is
    the CGF of ``ln D`` for the kernel restricted to ``ln A`` in
    ``[ln L, R]`` at the largest ``R`` in ``windows``, and ``eta_L`` is the
    probability that one step falls to ``A <= L``.  Other parameters raise
    ``ScopeError``.
    """
    if b <= 1:
        raise ValueError("the branching number must exceed 1")
    L, p = params.L, params.p
    first = None
    if L >= 1 and p >= 1:
        grid = eta_grid if eta_grid is not None else [(10.0**-k, 10.0**k) for k in range(1, 7)]
        eps, r = min(grid, key=lambda er: (er[0], -er[1]))
        eta = eta_estimate(kernel_star, eps, r).value
        margin = (math.log1p(-eta) if eta < 1 else -math.inf) + math.log(b)
        tag = "reinforced-full-mass" if eta == 0 else "reinforced"
        first = RegimeReport(tag, _verdict(margin, tol, TRANSIENT, None), margin,
                             {"b": b, "L": L, "p": p, "eta": eta, "eta_eps": eps, "eta_r": r})
        # when L < p as well, the second criterion gets a chance to decide
        if first.verdict != INDETERMINATE or not L < p:
            return first
    if L < p:
        eta_l = eta_estimate(kernel_star, L, math.inf).value
        uppers = sorted(windows) if windows is not None else [math.inf]
        trend = []
        for upper in uppers:
            q, d = restricted_d_kernel(kernel_star, params, upper)
            val, lam = inf_cgf_01(d_cgf(q, d))
            trend.append((upper, val))
        inf_d = trend[-1][1]
        margin = inf_d + math.log(b) + (math.log1p(-eta_l) if eta_l < 1 else -math.inf)
        return RegimeReport("reinforced-below-threshold", _verdict(margin, tol, TRANSIENT, None), margin,
                            {"b": b, "L": L, "p": p, "eta_L": eta_l, "inf_cgf_d": inf_d,
                             "upper": uppers[-1], "window_trend": trend})
    raise ScopeError(f"no criterion covers L = {L}, p = {p} (need L, p >= 1 or L < p)")


def return_time_bound(kernel: FiniteMatrixKernel, d: np.ndarray, b: float, eps_tilde: float,
                      lam: float, n_terms: int = 200):
    """Bound on the expected return time: ``1 + sum_n b^n (1+eps)^n max_y (T^n 1)(y)``.

    ``T(x, y) = K(x, y) D(y)^lam``.  Returns ``(partial sum over n <= n_terms,
    geometric tail bound, total)``; the tail uses ``T^n 1 <= rho^n max h / min h``
    with ``h`` the Perron vector, and is infinite when ``b (1+eps) rho >= 1``.
    """
    t = kernel.matrix * (d**lam)[None, :]
    growth = math.log(b) + math.log1p(eps_tilde)
    v = np.ones(kernel.size)
    log_scale = 0.0
    terms = []
    for n in range(1, n_terms + 1):
        v = t @ v
        top = v.max()
        log_scale += math.log(top)
        v /= top
        terms.append(math.exp(n * growth + log_scale))
    partial = 1.0 + math.fsum(terms)
    try:
        rho, h = perron_pair(t)
    except ReducibleKernelError:
        # no positive eigenvector to control the tail with
        return partial, math.inf, math.inf
    r = math.exp(growth) * rho
    if r >= 1:
        return partial, math.inf, math.inf
    c = float(h.max() / h.min())
    tail = c * r ** (n_terms + 1) / (1.0 - r)
    return partial, tail, partial + tail


def classify_constant_threshold(kernel: EnvKernel, b: float, L: float, p: float,
                                tol: float = DEFAULT_TOL, n_terms: int = 200) -> RegimeReport:
    """Thresholds ``b_v = p`` and ``1/L = 1/p + eps`` with all weights above ``L``.

    Transient when ``inf_[0,1] Lambda_D + ln b > 0``; positive recurrent when
    ``inf_[0,1] Lambda_D + ln b + ln(1 + eps) < 0``.  The positive-recurrence
    verdict comes with the expected-return-time bound.
    """
    if not L < p:
        raise ScopeError("the constant-threshold criterion needs L < p")
    params = ReinforcedParams(L, p, p)
    fin = _finite_view(kernel)
    if np.any(fin.weights <= L):
        raise ValueError("the constant-threshold criterion needs every weight above L")
    eps_t = 1.0 / L - 1.0 / p
    d = d_values(fin, params)
    val, lam = inf_cgf_01(d_cgf(fin, d))
    margin_t = val + math.log(b)
    margin_pr = margin_t + math.log1p(eps_t)
    inputs = {"b": b, "L": L, "p": p, "eps_tilde": eps_t, "inf_cgf_d": val, "argmin": lam,
              "transience_margin": margin_t, "positive_recurrence_margin": margin_pr}
    if margin_t > tol:
        return RegimeReport("constant-threshold", TRANSIENT, margin_t, inputs)
    if margin_pr < -tol:
        partial, tail, total = return_time_bound(fin, d, b, eps_t, lam, n_terms)
        inputs.update(return_time_partial=partial, return_time_tail=tail, return_time_bound=total)
        return RegimeReport("constant-threshold", POSITIVE_RECURRENT, margin_pr, inputs)
    margin = margin_t if abs(margin_t) <= abs(margin_pr) else margin_pr
    return RegimeReport("constant-threshold", INDETERMINATE, margin, inputs)
