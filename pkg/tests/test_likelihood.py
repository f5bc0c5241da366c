import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from dollo.likelihood import (DataError, LikelihoodEngine, ObservationModel, TraitMatrix,
                              expected_births_integral, lambda_conditional, log_likelihood,
                              log_likelihood_marginal_lambda, pattern_factors, pattern_log_factor,
                              survival_recursion, two_leaf_log_likelihood, two_leaf_mle,
                              two_leaf_posterior_logpdf)
from dollo.simulate import simulate_presence
from dollo.tree import DatedTree

from .conftest import random_tree, trees

MU = 1e-3


def all_patterns(names, min_size):
    for r in range(min_size, len(names) + 1):
        yield from itertools.combinations(names, r)


@pytest.fixture
def small_data():
    return TraitMatrix.from_sets(list("ABC"), [{"A", "B"}, {"A", "B", "C"}, {"C"}, {"A"}, {"B", "C"}])


def test_births_integral_by_hand(three_taxa):
    # delta: A, B -> e^-0.5, AB edge -> e^-0.7, C -> e^-1.2
    dA, dAB, dC = math.exp(-0.5), math.exp(-0.7), math.exp(-1.2)
    u0_ab = (1 - dA) ** 2
    u0_root = ((1 - dAB) + dAB * u0_ab) * (1 - dC)
    hand = 2 * (1 - dA) + (1 - dC) + (1 - u0_ab) * (1 - dAB) + (1 - u0_root)
    assert expected_births_integral(three_taxa, MU, "NOABSENT") == pytest.approx(hand, rel=1e-14)
    assert hand == pytest.approx(2.50570787230614, rel=1e-13)


def test_survival_on_a_cherry():
    t = DatedTree.from_newick("(A:300,B:300);")
    tab = survival_recursion(t, MU)
    d = math.exp(-0.3)
    assert tab.u0[t.root] == pytest.approx((1 - d) ** 2)
    assert tab.u1[t.root] == pytest.approx(2 * d * (1 - d))
    assert list(tab.u0[:2]) == [0, 0] and list(tab.u1[:2]) == [1, 1]


@pytest.mark.parametrize("obs", [ObservationModel.NOABSENT, ObservationModel.NOUNIQUE])
def test_pattern_factors_partition_the_births_integral(three_taxa, obs):
    total = sum(math.exp(pattern_log_factor(three_taxa, MU, m))
                for m in all_patterns(three_taxa.names, int(obs) + 1))
    assert total == pytest.approx(expected_births_integral(three_taxa, MU, obs), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(trees(max_leaves=6, leaf_jitter=200.0), st.floats(1e-4, 3e-3))
def test_partition_identity_property(t, mu):
    for obs in ObservationModel:
        total = sum(math.exp(pattern_log_factor(t, mu, m)) for m in all_patterns(t.names, int(obs) + 1))
        assert total == pytest.approx(expected_births_integral(t, mu, obs), rel=1e-10)


def test_frozen_values(three_taxa, small_data):
    assert log_likelihood(three_taxa, MU, 3 * MU, small_data, "NOABSENT") == \
        pytest.approx(-14.85826518813608, rel=1e-12)
    assert log_likelihood_marginal_lambda(three_taxa, MU, small_data, "NOABSENT") == \
        pytest.approx(-14.249005576072786, rel=1e-12)
    thin = small_data.thin("NOUNIQUE")
    assert thin.n_traits == 3
    assert log_likelihood_marginal_lambda(three_taxa, MU, thin, "NOUNIQUE") == \
        pytest.approx(-6.0254454469779315, rel=1e-12)


def test_pattern_probabilities_match_simulation(three_taxa):
    """Expected count of each pattern per data set, against forward simulation."""
    rng = np.random.default_rng(7)
    lam = 3 * MU
    reps = 20000
    counts = {}
    for _ in range(reps):
        for row in simulate_presence(three_taxa, lam, MU, rng):
            key = frozenset(np.array(three_taxa.names)[row])
            counts[key] = counts.get(key, 0) + 1
    for m in all_patterns(three_taxa.names, 1):
        expect = (lam / MU) * math.exp(pattern_log_factor(three_taxa, MU, m))
        got = counts.get(frozenset(m), 0) / reps
        assert abs(got - expect) < 4 * math.sqrt(expect / reps), m


@settings(max_examples=40, deadline=None)
@given(trees(max_leaves=9, leaf_jitter=100.0), st.integers(0, 10_000))
def test_vectorized_matches_scalar(t, seed):
    rng = np.random.default_rng(seed)
    pres = simulate_presence(t, 40 * MU, MU, rng)
    if not len(pres):
        return
    F = pattern_factors(t, MU, pres)
    for row, f in zip(pres[:25], F[:25]):
        m = [t.names[k] for k in np.flatnonzero(row)]
        assert math.log(f) == pytest.approx(pattern_log_factor(t, MU, m), rel=1e-12, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(trees(min_leaves=3, max_leaves=9), st.integers(0, 10_000), st.data())
def test_incremental_update_matches_full(t, seed, data):
    rng = np.random.default_rng(seed)
    pres = simulate_presence(t, 60 * MU, MU, rng)
    dm = TraitMatrix(t.names, pres).thin("NOUNIQUE")
    if dm.n_traits == 0:
        return
    eng = LikelihoodEngine(dm, "NOUNIQUE")
    s0 = eng.evaluate(t, MU)
    new = t.copy()
    i = data.draw(st.integers(t.n_leaves, t.rstar - 1))
    lo = max(t.ages[c] for c in t.children[i])
    hi = t.ages[t.parent[i]] if i != t.root else lo + 5000
    new.ages[i] = lo + data.draw(st.floats(0.01, 0.99)) * (hi - lo)
    s1 = eng.update_ages(s0, new, [i])
    full = eng.evaluate(new, MU)
    assert s1.log_marginal == pytest.approx(full.log_marginal, abs=1e-9)
    assert s1.log_marginal == pytest.approx(log_likelihood_marginal_lambda(new, MU, dm, "NOUNIQUE"),
                                            abs=1e-9)


def test_same_topology_shortcut(ten_taxa):
    rng = np.random.default_rng(3)
    dm = TraitMatrix(ten_taxa.names, simulate_presence(ten_taxa, 100 * 2e-4, 2e-4, rng)).thin(1)
    eng = LikelihoodEngine(dm, 1)
    s0 = eng.evaluate(ten_taxa, 2e-4)
    scaled = ten_taxa.copy()
    scaled.ages[10:-1] *= 1.3
    a = eng.evaluate(scaled, 2e-4 / 1.3, same_topology=s0)
    b = eng.evaluate(scaled, 2e-4 / 1.3)
    assert a.log_marginal == pytest.approx(b.log_marginal, abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(trees(min_leaves=2, max_leaves=8), st.floats(0.3, 3.0), st.integers(0, 1000))
def test_marginal_depends_on_mu_times_ages_only(t, rho, seed):
    """Isochronous leaves: scaling ages by rho and mu by 1/rho leaves the likelihood unchanged."""
    pres = simulate_presence(t, 50 * MU, MU, np.random.default_rng(seed))
    dm = TraitMatrix(t.names, pres)
    if dm.n_traits == 0:
        return
    s = t.copy()
    s.ages[t.n_leaves:-1] *= rho
    a = log_likelihood_marginal_lambda(t, MU, dm, "NOABSENT")
    b = log_likelihood_marginal_lambda(s, MU / rho, dm, "NOABSENT")
    assert a == pytest.approx(b, rel=1e-10, abs=1e-10)


def test_marginal_matches_quadrature(three_taxa, small_data):
    def integrand(u):  # lambda = exp(u), d lambda / lambda = du
        return math.exp(log_likelihood(three_taxa, MU, math.exp(u), small_data, 0) + 14.0)

    peak = math.log(small_data.n_traits * MU / expected_births_integral(three_taxa, MU, 0))
    val, _ = integrate.quad(integrand, peak - 12, peak + 8, epsabs=0, epsrel=1e-12, limit=200)
    assert math.log(val) - 14.0 == pytest.approx(
        log_likelihood_marginal_lambda(three_taxa, MU, small_data, 0), rel=1e-10)


def test_lambda_conditional_is_the_gamma_kernel(three_taxa, small_data):
    I = expected_births_integral(three_taxa, MU, 0)
    shape, rate = lambda_conditional(small_data.n_traits, I, MU)
    lams = np.array([1e-3, 2e-3, 5e-3])
    ll = np.array([log_likelihood(three_taxa, MU, x, small_data, 0) for x in lams]) - np.log(lams)
    kernel = (shape - 1) * np.log(lams) - rate * lams
    diffs = ll - kernel
    assert np.ptp(diffs) < 1e-10


def test_order_of_taxa_irrelevant(three_taxa, small_data):
    perm = [2, 0, 1]
    other = TraitMatrix([small_data.taxa[k] for k in perm], small_data.presence[:, perm])
    assert log_likelihood_marginal_lambda(three_taxa, MU, other, 0) == \
        pytest.approx(log_likelihood_marginal_lambda(three_taxa, MU, small_data, 0), rel=1e-14)


def test_two_leaf_closed_form_agrees_with_general_code():
    t = DatedTree.from_newick("(A:400,B:400);")
    data = TraitMatrix.from_sets(["A", "B"], [{"A", "B"}] * 4 + [{"A"}] * 3 + [{"B"}])
    lam = 5 * MU
    general = log_likelihood(t, MU, lam, data, "NOABSENT")
    closed = two_leaf_log_likelihood(800.0, lam, MU, 3, 1, 4)
    assert general == pytest.approx(closed, rel=1e-12)


def test_two_leaf_mle_example():
    assert two_leaf_mle(3, 1, 4, 1.0) == pytest.approx(math.log(1.5), rel=1e-14)
    assert round(two_leaf_mle(3, 1, 4, 1.0), 4) == 0.4055
    assert two_leaf_mle(5, 5, 0, 1.0) == math.inf
    assert two_leaf_mle(0, 0, 9, 1.0) == 0.0


def test_two_leaf_posterior_is_proper_and_ridge_shaped():
    grid = np.linspace(1, 4000, 4000)
    logp = np.array([two_leaf_posterior_logpdf(g, MU, 40, 35, 120) for g in grid])
    assert np.isfinite(logp).all()
    mode = grid[np.argmax(logp)]
    assert 0.5 * two_leaf_mle(40, 35, 120, MU) < mode < 1.5 * two_leaf_mle(40, 35, 120, MU)
    # depends on mu and the length only through their product
    assert two_leaf_posterior_logpdf(300, MU, 4, 5, 6) - two_leaf_posterior_logpdf(600, MU, 4, 5, 6) == \
        pytest.approx(two_leaf_posterior_logpdf(150, 2 * MU, 4, 5, 6)
                      - two_leaf_posterior_logpdf(300, 2 * MU, 4, 5, 6), rel=1e-12)


def test_data_validation(three_taxa):
    empty_trait = TraitMatrix(list("ABC"), np.array([[1, 1, 0], [0, 0, 0]], bool))
    with pytest.raises(DataError, match="no taxon"):
        log_likelihood_marginal_lambda(three_taxa, MU, empty_trait, "NOABSENT")
    single = TraitMatrix.from_sets(list("ABC"), [{"A"}, {"A", "B"}])
    with pytest.raises(DataError, match="singleton"):
        log_likelihood_marginal_lambda(three_taxa, MU, single, "NOUNIQUE")
    with pytest.raises(ValueError):
        log_likelihood(three_taxa, -1.0, 1.0, single, "NOABSENT")
    with pytest.raises(DataError):
        TraitMatrix(["A", "A"], np.ones((1, 2), bool))
    wrong = TraitMatrix.from_sets(list("ABD"), [{"A", "B"}])
    with pytest.raises(DataError):
        log_likelihood_marginal_lambda(three_taxa, MU, wrong, "NOABSENT")


def test_empty_data_likelihood_is_the_zero_count_probability(three_taxa):
    empty = TraitMatrix(list("ABC"), np.zeros((0, 3), bool))
    I = expected_births_integral(three_taxa, MU, 0)
    assert log_likelihood(three_taxa, MU, 2 * MU, empty, 0) == pytest.approx(-2 * I)


def test_nounique_integral_vanishes_for_fast_death(ten_taxa):
    assert expected_births_integral(ten_taxa, 1.0, "NOUNIQUE") < 1e-100
    assert expected_births_integral(ten_taxa, 1.0, "NOABSENT") > 1.0


def test_poisson_count_of_distinct_traits():
    t = random_tree(np.random.default_rng(11), 6)
    rng = np.random.default_rng(12)
    lam = 8 * MU
    n = np.array([len(simulate_presence(t, lam, MU, rng)) for _ in range(4000)])
    mean = (lam / MU) * expected_births_integral(t, MU, "NOABSENT")
    se = math.sqrt(mean / len(n))
    assert abs(n.mean() - mean) < 3 * se
    assert abs(n.var(ddof=1) / mean - 1) < 0.1
