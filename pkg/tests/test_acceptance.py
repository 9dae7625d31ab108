"""Acceptance suite: ten seeded end-to-end checks at their stated tolerances.

Each criterion is a function of the worker count returning an ``Outcome``
whose tables are written as CSV files.  Criteria 1-9 run once with a single
worker; criterion 10 re-runs all of them with several workers and compares
the files byte for byte.  One PASS/FAIL line per criterion is printed in the
terminal summary (and immediately, when output capture is off).

Run standalone with ``python tests/test_acceptance.py``.
"""

import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from gwrwre import rng as rng_mod
from gwrwre.criteria import conductance_ensemble
from gwrwre.csvio import write_csv
from gwrwre.environment import (DiscreteLaw, EnvState, FiniteMatrixKernel, IIDKernel, check_assumption1,
                                eta_estimate, exp_mixture_grid, point_mass_kernel)
from gwrwre.gw_tree import OffspringLaw
from gwrwre.ldp import cgf_empirical, inf_cgf_01, iid_cgf, perron_cgf, variational_solve
from gwrwre.parallel import map_replicas
from gwrwre.ray_analysis import RayWeights, hit_prob_exact, rate_estimate, reinforced_ray_quantities
from gwrwre.walk import RETURNED, ReinforcedParams, escape_trials, ray_walk_batch
from oracles import minorization_holds, ray_absorption

SEED = 2024
PARALLEL_WORKERS = 3


@dataclass
class Outcome:
    passed: bool
    detail: str
    tables: dict = field(default_factory=dict)   # name -> (columns, rows)
    seconds: float = 0.0


def _timed_check(limit, seconds):
    return seconds < limit, f"{seconds:.2f}s < {limit:g}s"


# ---------------------------------------------------------------------------
# criteria


def hitting_formula_oracle(workers):
    """Closed-form hitting probability against a high-precision absorption solve."""
    gen = rng_mod.keyed_rng(SEED, 1)
    rays = [np.exp(gen.uniform(math.log(1e-3), math.log(1e3), int(gen.integers(1, 101))))
            for _ in range(100)]
    t0 = time.perf_counter()
    exact = [hit_prob_exact(a) for a in rays]
    elapsed = time.perf_counter() - t0
    ref = map_replicas(lambda i: ray_absorption(rays[i]), len(rays), workers)
    diffs = [abs(x - y) for x, y in zip(exact, ref)]
    ok_time, time_note = _timed_check(1.0, elapsed)
    worst = max(diffs)
    rows = [(i, len(a), p, q, d) for i, (a, p, q, d) in enumerate(zip(rays, exact, ref, diffs))]
    return Outcome(worst <= 1e-12 and ok_time, f"max |diff| = {worst:.2e} (<= 1e-12), {time_note}",
                   {"rays": ([("ray", "int"), ("n", "int"), ("exact", "float"), ("oracle", "float"),
                              ("abs_diff", "float")], rows)}, elapsed)


def quenched_simulation(workers):
    """Empirical hitting frequency of the ray walk against the exact probability."""
    gen = rng_mod.keyed_rng(SEED, 2)
    rays = [RayWeights(tuple(np.exp(gen.uniform(math.log(0.5), math.log(2.0), 10)))) for _ in range(10)]
    runs = 100_000

    def one(i):
        return ray_walk_batch(rays[i], runs, rng=rng_mod.replica_rng(SEED, i)).hit_fraction

    t0 = time.perf_counter()
    freqs = map_replicas(one, len(rays), workers)
    elapsed = time.perf_counter() - t0
    rows, worst = [], 0.0
    for i, (ray, f) in enumerate(zip(rays, freqs)):
        p = hit_prob_exact(ray)
        se = math.sqrt(p * (1 - p) / runs)
        z = abs(f - p) / se
        worst = max(worst, z)
        rows.append((i, p, f, se, z))
    ok_time, time_note = _timed_check(60.0, elapsed)
    return Outcome(worst <= 3.0 and ok_time, f"max |z| = {worst:.2f} (<= 3), {time_note}",
                   {"rays": ([("ray", "int"), ("exact", "float"), ("frequency", "float"),
                              ("stderr", "float"), ("abs_z", "float")], rows)}, elapsed)


def _trial_rows(outcomes):
    return [(r, o.kind, o.depth, o.steps) for r, o in enumerate(outcomes)]


TRIAL_COLUMNS = [("replica", "int"), ("outcome", "str"), ("depth", "int"), ("steps", "int")]


def iid_phase_transition(workers):
    """Escape trials either side of the threshold a = 1/2 on the binary tree."""
    binary = OffspringLaw({2: 1.0})
    t0 = time.perf_counter()
    hi = escape_trials(binary, point_mass_kernel(0.7), 10_000, 1000, SEED, workers=workers)
    lo = escape_trials(binary, point_mass_kernel(0.3), 10_000, 1000, SEED + 1, workers=workers)
    elapsed = time.perf_counter() - t0
    alive = float(np.mean([not o.returned for o in hi]))
    returned = float(np.mean([o.kind == RETURNED for o in lo]))
    ok_time, time_note = _timed_check(300.0, elapsed)
    return Outcome(alive >= 0.05 and returned >= 0.99 and ok_time,
                   f"a=0.7 alive {alive:.3f} (>= 0.05), a=0.3 returned {returned:.3f} (>= 0.99), {time_note}",
                   {"a0.7": (TRIAL_COLUMNS, _trial_rows(hi)), "a0.3": (TRIAL_COLUMNS, _trial_rows(lo))},
                   elapsed)


def rate_identity(workers):
    """Hitting rate at n = 40 against the minimum of the log-moment function on [0, 1]."""
    laws = [("iid {0.1, 0.8}", DiscreteLaw([0.1, 0.8])), ("point mass 0.4", DiscreteLaw([0.4]))]

    def one(i):
        est = rate_estimate(IIDKernel(laws[i][1]), EnvState(1.0), 40, 10_000, rng=rng_mod.replica_rng(SEED, i))
        return est.value, est.stderr

    t0 = time.perf_counter()
    ests = map_replicas(one, len(laws), workers)
    elapsed = time.perf_counter() - t0
    rows, worst = [], 0.0
    for (name, law), (value, se) in zip(laws, ests):
        target, argmin = inf_cgf_01(iid_cgf(law))
        worst = max(worst, abs(value - target))
        rows.append((name, value, se, target, argmin))
    ok_time, time_note = _timed_check(120.0, elapsed)
    return Outcome(worst <= 0.05 and ok_time, f"max |rate - inf| = {worst:.4f} (<= 0.05), {time_note}",
                   {"rates": ([("law", "str"), ("rate", "float"), ("stderr", "float"),
                               ("inf_cgf", "float"), ("argmin", "float")], rows)}, elapsed)


def perron_vs_empirical(workers):
    """Perron log-eigenvalue against a cloning estimate for random two-state chains."""
    gen = rng_mod.keyed_rng(SEED, 5)
    kernels = []
    for _ in range(5):
        p, q = gen.uniform(0.1, 0.9, 2)
        kernels.append(FiniteMatrixKernel(np.exp(gen.uniform(-1.0, 1.0, 2)), np.array([[1 - p, p], [q, 1 - q]])))
    lams = (0.25, 0.5, 1.0)
    tasks = [(k, lam) for k in range(len(kernels)) for lam in lams]

    def one(i):
        k, lam = tasks[i]
        kern = kernels[k]
        return cgf_empirical(kern, lam, kern.state(0), n=10_000, replicas=1000,
                             rng=rng_mod.replica_rng(SEED, i))

    t0 = time.perf_counter()
    emp = map_replicas(one, len(tasks), workers)
    elapsed = time.perf_counter() - t0
    rows, worst = [], 0.0
    for (k, lam), e in zip(tasks, emp):
        kern = kernels[k]
        exact = perron_cgf(kern.matrix, np.log(kern.weights), lam)
        worst = max(worst, abs(exact - e))
        rows.append((k, lam, exact, e))
    ok_time, time_note = _timed_check(120.0, elapsed)
    return Outcome(worst <= 0.02 and ok_time, f"max |perron - empirical| = {worst:.4f} (<= 0.02), {time_note}",
                   {"cgf": ([("kernel", "int"), ("lambda", "float"), ("perron", "float"),
                             ("empirical", "float")], rows)}, elapsed)


def variational_formula(workers):
    """Optimized path functional against the known minimum of phi on [0, 1]."""
    cases = [("lambda ln 2", lambda x: x * math.log(2.0), 0.0),
             ("lambda ln 0.4", lambda x: x * math.log(0.4), math.log(0.4)),
             ("lambda^2 - lambda", lambda x: x * x - x, -0.25)]
    t0 = time.perf_counter()
    results = [variational_solve(phi) for _, phi, _ in cases]
    elapsed = time.perf_counter() - t0
    rows, ok = [], True
    for (name, _, inf), res in zip(cases, results):
        gap = inf - res.value
        ok &= -1e-9 <= gap <= 1e-3
        rows.append((name, inf, res.value, gap))
    ok_time, time_note = _timed_check(30.0, elapsed)
    gaps = ", ".join(f"{r[3]:.1e}" for r in rows)
    return Outcome(ok and ok_time, f"gaps {gaps} (in [-1e-9, 1e-3]), {time_note}",
                   {"variational": ([("phi", "str"), ("infimum", "float"), ("value", "float"),
                                     ("gap", "float")], rows)}, elapsed)


def once_reinforced_transience(workers):
    """Once-reinforced walk on the ternary tree escapes; exact bound 1 - q^D_i <= 1/i."""
    t0 = time.perf_counter()
    trials = escape_trials(OffspringLaw({3: 1.0}), point_mass_kernel(0.5), 10_000, 1000, SEED,
                           reinforced=ReinforcedParams.once_reinforced(1.0), workers=workers)
    alive = float(np.mean([not o.returned for o in trials]))
    n = 1000
    ray = reinforced_ray_quantities(RayWeights((1,) * n, (1,) * n), exact=True)
    bound_ok = all(x <= Fraction(1, i) for i, x in enumerate(ray.one_minus_qD, start=1))
    elapsed = time.perf_counter() - t0
    bound_rows = [(i, str(x)) for i, x in enumerate(ray.one_minus_qD, start=1)]
    return Outcome(alive >= 0.05 and bound_ok,
                   f"alive {alive:.3f} (>= 0.05), exact bound for i <= {n}: {bound_ok}",
                   {"trials": (TRIAL_COLUMNS, _trial_rows(trials)),
                    "bound": ([("i", "int"), ("one_minus_qD", "str")], bound_rows)}, elapsed)


def conductance(workers):
    """Level-sum ratios: closed form on the binary tree, mean offspring times a on a GW tree."""
    t0 = time.perf_counter()
    binary = conductance_ensemble(OffspringLaw({2: 1.0}), point_mass_kernel(0.3), 15, 1, SEED)
    gw = conductance_ensemble(OffspringLaw({0: 0.25, 2: 0.75}), point_mass_kernel(0.3), 15, 100, SEED,
                              level_range=(10, 15), workers=workers)
    elapsed = time.perf_counter() - t0
    bin_err = max(abs(r - 0.6) for r in binary.ratios)
    gw_err = abs(gw.mean_ratio - 0.45)
    rows = [("binary", lvl, s, r) for lvl, (s, r) in enumerate(zip(binary.level_sums, binary.ratios + [math.nan]))]
    rows += [("gw", lvl, s, r) for lvl, (s, r) in enumerate(zip(gw.level_sums, gw.ratios + [math.nan]))]
    return Outcome(bin_err <= 1e-12 and gw_err <= 0.05,
                   f"binary max |ratio - 0.6| = {bin_err:.1e} (<= 1e-12), "
                   f"GW mean ratio {gw.mean_ratio:.4f} (0.45 +- 0.05)",
                   {"levels": ([("tree", "str"), ("level", "int"), ("level_sum", "float"),
                                ("ratio", "float")], rows)}, elapsed)


def minorization_suite(workers):
    """Minorization certificates and escape probabilities, each certificate rechecked by matrix powers."""
    t0 = time.perf_counter()
    gen = rng_mod.keyed_rng(SEED, 9)
    cases = [("point mass 2", np.ones((1, 1)), check_assumption1(point_mass_kernel(2.0))),
             ("iid {0.5, 2}", np.full((2, 2), 0.5), check_assumption1(IIDKernel(DiscreteLaw([0.5, 2.0]))))]
    grid = exp_mixture_grid(0.5)
    cases.append(("exp-mixture grid", grid.matrix, check_assumption1(grid)))
    for j in range(4):
        m = gen.uniform(size=(4, 4)) * (gen.uniform(size=(4, 4)) > 0.4)
        m[np.arange(4), (np.arange(4) + 1) % 4] += 0.1     # keep it irreducible
        m /= m.sum(axis=1, keepdims=True)
        cases.append((f"random chain {j}", m, check_assumption1(FiniteMatrixKernel(np.ones(4), m))))
    eta = eta_estimate(grid, 1e-3, 1e3)
    elapsed = time.perf_counter() - t0
    rows, brute_ok = [], True
    for name, matrix, rep in cases:
        holds = minorization_holds(matrix, rep) if rep.satisfied else True
        brute_ok &= holds
        rows.append((name, rep.ell, rep.n_mix, rep.kappa, int(rep.satisfied), int(holds)))
    iid_ok = all((rep.ell, rep.n_mix, rep.kappa, rep.satisfied) == (1, 1, 1.0, True) for _, _, rep in cases[:2])
    mix = cases[2][2]
    mix_ok = mix.satisfied and mix.ell == 2
    eta_ok = abs(eta.value - 0.5) <= 0.05
    rows.append(("eta exp-mixture grid (1e-3, 1e3]", 0, 0, eta.value, int(eta.exact), int(eta_ok)))
    return Outcome(iid_ok and mix_ok and eta_ok and brute_ok,
                   f"iid (1,1,1): {iid_ok}, mixture ell={mix.ell} N={mix.n_mix} kappa={mix.kappa:.3g}, "
                   f"eta {eta.value:.4f} (0.5 +- 0.05), brute force: {brute_ok}",
                   {"certificates": ([("kernel", "str"), ("ell", "int"), ("n_mix", "int"), ("kappa", "float"),
                                      ("satisfied", "int"), ("brute_force", "int")], rows)}, elapsed)


CRITERIA = {
    1: ("hitting formula oracle", hitting_formula_oracle),
    2: ("quenched simulation vs exact", quenched_simulation),
    3: ("iid phase transition", iid_phase_transition),
    4: ("rate identity", rate_identity),
    5: ("perron cgf", perron_vs_empirical),
    6: ("variational formula", variational_formula),
    7: ("once-reinforced transience", once_reinforced_transience),
    8: ("conductance diagnostic", conductance),
    9: ("minorization and eta", minorization_suite),
}


def write_outcome(k, outcome, directory):
    """Write every table of criterion ``k`` below ``directory``; returns the paths."""
    return [write_csv(Path(directory) / f"criterion{k}_{name}.csv", cols, rows, {"criterion": k, "seed": SEED})
            for name, (cols, rows) in outcome.tables.items()]


def run_criterion(k, workers, directory):
    outcome = CRITERIA[k][1](workers)
    write_outcome(k, outcome, directory)
    return outcome


def summary_line(k, passed, detail):
    name = CRITERIA[k][0] if k in CRITERIA else "determinism across worker counts"
    return f"{'PASS' if passed else 'FAIL'} criterion {k:2d} {name}: {detail}"


# ---------------------------------------------------------------------------
# pytest entry points


_FIRST = {}


@pytest.fixture(scope="module")
def single_worker_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance_w1")


def _first_run(k, directory):
    if k not in _FIRST:
        _FIRST[k] = run_criterion(k, 1, directory)
    return _FIRST[k]


def _report(log, capsys, k, passed, detail):
    line = summary_line(k, passed, detail)
    log[k] = line
    with capsys.disabled():
        print("\n" + line)


@pytest.mark.parametrize("k", sorted(CRITERIA))
def test_criterion(k, single_worker_dir, acceptance_log, capsys):
    outcome = _first_run(k, single_worker_dir)
    _report(acceptance_log, capsys, k, outcome.passed, outcome.detail)
    assert outcome.passed, outcome.detail


def test_criterion_10_determinism(single_worker_dir, tmp_path, acceptance_log, capsys):
    mismatched = []
    for k in sorted(CRITERIA):
        _first_run(k, single_worker_dir)
        run_criterion(k, PARALLEL_WORKERS, tmp_path)
    names = sorted(p.name for p in Path(single_worker_dir).glob("*.csv"))
    assert names == sorted(p.name for p in tmp_path.glob("*.csv"))
    for name in names:
        if (Path(single_worker_dir) / name).read_bytes() != (tmp_path / name).read_bytes():
            mismatched.append(name)
    passed = not mismatched
    detail = (f"{len(names)} files identical with 1 and {PARALLEL_WORKERS} workers" if passed
              else f"differing files: {', '.join(mismatched)}")
    _report(acceptance_log, capsys, 10, passed, detail)
    assert passed, detail


if __name__ == "__main__":
    import tempfile

    with tempfile.TemporaryDirectory() as d1, tempfile.TemporaryDirectory() as d2:
        for k in sorted(CRITERIA):
            out = run_criterion(k, 1, d1)
            print(summary_line(k, out.passed, out.detail), flush=True)
        for k in sorted(CRITERIA):
            run_criterion(k, PARALLEL_WORKERS, d2)
        names = sorted(p.name for p in Path(d1).glob("*.csv"))
        same = all((Path(d1) / n).read_bytes() == (Path(d2) / n).read_bytes() for n in names)
        print(summary_line(10, same, f"{len(names)} files compared"))
