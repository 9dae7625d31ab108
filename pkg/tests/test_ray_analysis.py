import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from gwrwre.environment import DiscreteLaw, EnvState, FiniteMatrixKernel, IIDKernel, StateDistribution, dyadic_sampler, point_mass_kernel
from gwrwre.ldp import iid_cgf, inf_cgf_01
from gwrwre.ray_analysis import (
    RayWeights,
    annealed_hit_prob,
    annealed_hit_samples,
    compensated_cumsum,
    hit_prob_batch,
    hit_prob_exact,
    log_hit_prob,
    rate_estimate,
    rate_trend,
    reinforced_ray_quantities,
)

from oracles import enumerate_chain, enumerate_iid, ray_absorption, reinforced_ray_absorption


# --- quenched formula -------------------------------------------------------

@pytest.mark.parametrize("a, p", [
    ((1, 1, 1, 1), 1 / 5),
    ((2, 2), 4 / 7),
    ((0.5, 2.0), 1 / 4),
    ((1,), 1 / 2),
    ((), 1.0),
])
def test_hit_prob_examples(a, p):
    assert hit_prob_exact(a) == pytest.approx(p, abs=1e-15)
    assert hit_prob_exact(RayWeights(a)) == pytest.approx(p, abs=1e-15)


log_weights = st.floats(math.log(1e-3), math.log(1e3))


@given(st.lists(log_weights, min_size=1, max_size=100))
def test_hit_prob_matches_linear_system(logs):
    a = np.exp(logs)
    assert abs(hit_prob_exact(a) - ray_absorption(a)) <= 1e-12


@given(st.lists(log_weights, min_size=1, max_size=40), st.data())
def test_hit_prob_monotone_in_each_weight(logs, data):
    a = np.exp(logs)
    j = data.draw(st.integers(0, a.size - 1))
    factor = data.draw(st.floats(1.0, 10.0))
    b = a.copy()
    b[j] *= factor
    assert hit_prob_exact(b) >= hit_prob_exact(a) * (1 - 1e-13)


def test_hit_prob_tiny_values_stay_finite():
    p = log_hit_prob(np.full(2000, math.log(1e-3)))
    assert np.isfinite(p) and p < -13000


def test_batch_matches_scalar():
    rng = np.random.default_rng(0)
    logs = rng.uniform(-3, 3, (20, 15))
    batch = hit_prob_batch(logs)
    for row, p in zip(logs, batch):
        assert p == pytest.approx(hit_prob_exact(np.exp(row)), rel=1e-13)


def test_compensated_cumsum_beats_naive():
    x = np.array([1e16, 1.0, -1e16, 1.0] * 5)
    exact = np.cumsum([Fraction(v) for v in x])
    got = compensated_cumsum(x)
    assert [float(e) for e in exact] == list(got)


def test_ray_weights_validation():
    with pytest.raises(ValueError):
        RayWeights((1.0, -2.0))
    with pytest.raises(ValueError):
        RayWeights((1.0,), d=(1.0, 2.0))
    with pytest.raises(ValueError):
        hit_prob_exact([1.0, 0.0])


def test_reinforced_weights_rule():
    w = RayWeights.reinforced([0.5, 1.0, 2.0], [1.0, 1.0, 1.0], L=3.0)
    assert w.d == (3.0, 1.0, 2.0)


# --- annealed ---------------------------------------------------------------

def test_annealed_point_mass_is_exact():
    p, se = annealed_hit_prob(point_mass_kernel(1.0), EnvState(1.0), 4, 100, rng=0)
    assert p == pytest.approx(0.2, abs=1e-15) and se == 0.0


@pytest.mark.parametrize("method", ["plain", "tilted"])
def test_annealed_iid_matches_enumeration(method):
    k = IIDKernel(DiscreteLaw([0.5, 2.0]))
    exact = enumerate_iid([0.5, 2.0], [0.5, 0.5], 2)
    p, se = annealed_hit_prob(k, EnvState(1.0), 2, 20_000, rng=3, method=method)
    assert abs(p - exact) <= 3 * se + 1e-12


def test_tilted_estimator_unbiased_in_rare_regime():
    values, probs = [0.1, 0.8], [0.5, 0.5]
    exact = enumerate_iid(values, probs, 10)
    p, se = annealed_hit_prob(IIDKernel(DiscreteLaw(values, probs)), EnvState(1.0), 10, 20_000, rng=4,
                              method="tilted")
    assert abs(p - exact) <= 3 * se
    assert se < 0.05 * exact


def test_tilted_finite_chain_unbiased():
    w = [0.3, 0.7, 1.5]
    m = np.array([[0.2, 0.5, 0.3], [0.4, 0.2, 0.4], [0.6, 0.3, 0.1]])
    k = FiniteMatrixKernel(w, m)
    exact = enumerate_chain(w, m, 1, 7)
    for method in ("plain", "tilted"):
        p, se = annealed_hit_prob(k, k.state(1), 7, 40_000, rng=5, method=method)
        assert abs(p - exact) <= 3 * se, method


def test_start_distribution_mixes_exact_values():
    w = [0.5, 2.0]
    m = np.array([[0.3, 0.7], [0.6, 0.4]])
    k = FiniteMatrixKernel(w, m)
    start = StateDistribution([k.state(0), k.state(1)], [0.25, 0.75])
    exact = 0.25 * enumerate_chain(w, m, 0, 5) + 0.75 * enumerate_chain(w, m, 1, 5)
    p, se = annealed_hit_prob(k, start, 5, 40_000, rng=6)
    assert abs(p - exact) <= 3 * se


def test_dyadic_path_is_deterministic():
    k = dyadic_sampler()
    p, se = annealed_hit_prob(k, EnvState(0.5, "dyadic"), 3, 50, rng=1)
    assert p == pytest.approx(hit_prob_exact([0.25, 0.125, 0.0625]), rel=1e-14)
    assert se == 0.0


def test_unknown_method_rejected():
    with pytest.raises(ValueError):
        annealed_hit_samples(point_mass_kernel(0.5), EnvState(1.0), 3, 10, method="magic")


# --- rates --------------------------------------------------------------------

@pytest.mark.parametrize("n", [1, 5, 20])
def test_rate_point_mass_one(n):
    est = rate_estimate(point_mass_kernel(1.0), EnvState(1.0), n, 50, rng=0)
    assert est.value == pytest.approx(math.log(1 / (n + 1)) / n, abs=1e-14)


def test_rate_point_mass_small():
    est = rate_estimate(point_mass_kernel(0.4), EnvState(1.0), 40, 100, rng=0)
    assert abs(est.value - math.log(0.4)) < 0.05


def test_rate_two_point_law_matches_cgf_infimum():
    law = DiscreteLaw([0.1, 0.8])
    target, _ = inf_cgf_01(iid_cgf(law))
    est = rate_estimate(IIDKernel(law), EnvState(1.0), 40, 10_000, rng=11)
    assert abs(est.value - target) < 0.05
    assert est.value <= 0 and est.jensen_ok


def test_rate_trend_slope_reported():
    out = rate_trend(point_mass_kernel(1.0), EnvState(1.0), [5, 10, 20, 40], 10, rng=0)
    assert out[-1].trend is not None and out[-1].trend > 0
    assert [e.n for e in out] == [5, 10, 20, 40]


def test_rate_requires_positive_level():
    with pytest.raises(ValueError):
        rate_estimate(point_mass_kernel(1.0), EnvState(1.0), 0, 10)


@given(st.integers(0, 1000), st.integers(1, 12))
def test_rate_values_nonpositive(seed, n):
    rng = np.random.default_rng(seed)
    k = FiniteMatrixKernel(rng.uniform(0.2, 3.0, 3), rng.dirichlet(np.ones(3), 3))
    est = rate_estimate(k, k.state(0), n, 200, rng=seed)
    assert est.value <= 0 and est.annealed_rate <= 0
    assert est.jensen_ok


# --- reinforced comparison quantities --------------------------------------------

def test_phi_is_one_without_modification():
    a = [2.0, 3.0, 1.5]
    r = reinforced_ray_quantities(RayWeights.reinforced(a, [1.0, 1.0, 1.0], L=1.0))
    assert all(x == pytest.approx(1.0, abs=1e-15) for x in r.Phi)


def test_unit_d_gambler_ruin_exact():
    n = 1000
    r = reinforced_ray_quantities(RayWeights([1.0] * n, d=[1.0] * n), exact=True)
    for i, v in enumerate(r.one_minus_qD, start=1):
        assert v == Fraction(1, i + 1)
        assert v <= Fraction(1, i)


def test_phi_matches_absorption_ratio():
    a, b, L = [0.5] * 3, [1.0] * 3, 1.0
    w = RayWeights.reinforced(a, b, L)
    r = reinforced_ray_quantities(w, exact=True)
    ratio = reinforced_ray_absorption(a, w.d) / ray_absorption(w.d)
    assert float(r.Phi[-1]) == pytest.approx(ratio, rel=1e-12)
    assert float(r.hit_prob) == pytest.approx(reinforced_ray_absorption(a, w.d), rel=1e-12)


@given(st.lists(st.tuples(st.floats(0.05, 20.0), st.floats(0.05, 20.0)), min_size=1, max_size=12))
def test_reinforced_hit_prob_matches_state_space_solve(pairs):
    a, d = zip(*pairs)
    r = reinforced_ray_quantities(RayWeights(a, d))
    assert r.hit_prob == pytest.approx(reinforced_ray_absorption(a, d), rel=1e-10)


@given(st.lists(st.tuples(st.floats(0.05, 20.0), st.floats(0.05, 20.0)), min_size=1, max_size=30))
def test_product_telescopes(pairs):
    a, d = zip(*pairs)
    r = reinforced_ray_quantities(RayWeights(a, d))
    assert math.prod(r.qA) == pytest.approx(r.Phi[-1] * r.QD[-1], rel=1e-12)
    exact = reinforced_ray_quantities(RayWeights(a, d), exact=True)
    assert math.prod(exact.qA) == exact.Phi[-1] * exact.QD[-1]
    assert r.QD[-1] == pytest.approx(hit_prob_exact(d), rel=1e-12)


@given(st.floats(0.01, 2.0), st.lists(st.tuples(st.floats(1.0, 50.0), st.floats(1.0, 50.0)),
                                     min_size=1, max_size=40))
def test_phi_lower_bound(eps, pairs):
    a = [eps + x for x, _ in pairs]
    d = [y for _, y in pairs]
    r = reinforced_ray_quantities(RayWeights(a, d))
    for i in range(1, len(a) + 1):
        term = r.qA[i - 1] / r.qD[i - 1]
        assert term >= 1 / (1 + 1 / (i * eps)) * (1 - 1e-12)
    bound = math.prod(1 / (1 + 1 / (i * eps)) for i in range(1, len(a) + 1))
    assert r.Phi[-1] >= bound * (1 - 1e-10)


def test_float_and_exact_agree():
    rng = np.random.default_rng(2)
    a = rng.uniform(0.1, 5, 25)
    d = rng.uniform(0.1, 5, 25)
    f = reinforced_ray_quantities(RayWeights(a, d))
    e = reinforced_ray_quantities(RayWeights(a, d), exact=True)
    for name in ("QD", "qD", "qA", "Phi", "one_minus_qD"):
        np.testing.assert_allclose(getattr(f, name), [float(x) for x in getattr(e, name)], rtol=1e-12)


def test_reinforced_needs_d():
    with pytest.raises(ValueError):
        reinforced_ray_quantities(RayWeights((1.0,)))
