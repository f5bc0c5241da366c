import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dollo.likelihood import TraitMatrix
from dollo.mcmc import (DEFAULT_WEIGHTS, ChainTrace, ConfigurationError, InvariantError,
                        ModelConfig, MoveSet, Posterior, Schedule, Tuning, _regraft_targets,
                        diagnostics, initial_tree, integrated_autocorrelation_time, mh_step,
                        move_node_age, move_ridge_scale, move_topology, ridge_jacobian_log,
                        ridge_map, run_chain)
from dollo.priors import PriorConfig
from dollo.simulate import SimScenario, simulate
from dollo.tree import CalibrationSet, CladeConstraint, DatedTree, LeafAgeInterval, admissible

from .conftest import TEN_TAXA, random_tree, trees

MU = 2e-4


@pytest.fixture(scope="module")
def ten_data():
    tree = DatedTree.from_newick(TEN_TAXA)
    return simulate(SimScenario(tree, 150 * MU, MU, obs="NOUNIQUE", seed=1)).data


@pytest.fixture(scope="module")
def ten_cal():
    return CalibrationSet([CladeConstraint("AB", {"A", "B"}, 700, 900),
                           CladeConstraint("GH", {"G", "H"}, 900, 1100)])


def named_clades(t):
    return {frozenset(t.mask_names(m)) for m in t.clade_masks()}


def empty_data(n):
    return TraitMatrix([f"L{k}" for k in range(n)], np.zeros((0, n), bool))


def test_schedule_defaults():
    assert Schedule(100_000).resolved() == (10_000, 9)
    assert Schedule(1000, 0, 1).resolved() == (0, 1)
    with pytest.raises(ConfigurationError):
        Schedule(100, 100).resolved()


def test_tuning_validation():
    with pytest.raises(ConfigurationError):
        Tuning(ridge_low=0.5, ridge_high=3.0)
    with pytest.raises(ConfigurationError):
        Tuning(root_window=0)
    Tuning(ridge_low=0.8, ridge_high=1.25)


@pytest.mark.parametrize("L", [2, 5, 10])
def test_ridge_jacobian_matches_finite_differences(L):
    rng = np.random.default_rng(L)
    tree = random_tree(rng, L)
    rho = 1.37
    x0 = np.append(tree.ages[L:-1], 3e-4)

    def f(x):
        ages = tree.ages.copy()
        ages[L:-1] = x[:-1]
        out, mu = ridge_map(ages, x[-1], rho, L)
        return np.append(out[L:-1], mu)

    J = np.empty((L, L))
    for k in range(L):
        h = 1e-6 * x0[k]
        e = np.zeros(L)
        e[k] = h
        J[:, k] = (f(x0 + e) - f(x0 - e)) / (2 * h)
    assert abs(np.linalg.det(J)) == pytest.approx(rho ** (L - 2), rel=1e-6)
    assert ridge_jacobian_log(rho, L) == pytest.approx((L - 2) * math.log(rho))


def _state(data, cal, tree, mu, model=None, prior=None):
    post = Posterior(data, cal, model or ModelConfig(obs=1), prior or PriorConfig())
    return post.state(tree, mu)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_two_state_balance_for_ridge_and_root_moves(seed):
    """Forward and reverse acceptance log-ratios cancel: log a(x->y) + log a(y->x) = 0."""
    rng = np.random.default_rng(seed)
    tree = random_tree(rng, 6)
    data = TraitMatrix(tree.names, np.ones((3, 6), bool))
    s0 = _state(data, None, tree, 1e-3, prior=PriorConfig(T=1e9))
    for move in (move_ridge_scale, move_node_age):
        prop = move(s0, rng)
        if prop is None:
            continue
        s1 = s0.posterior.state(prop.tree, prop.mu)
        if s1 is None:
            continue
        if move is move_ridge_scale:
            rho = s0.mu / prop.mu
            back = (6 - 2) * math.log(1 / rho) - 2 * math.log(1 / rho)
        else:
            i = [k for k in range(6, 11) if tree.ages[k] != prop.tree.ages[k]]
            if not i or i[0] != tree.root:
                back = 0.0
            else:
                back = -prop.log_hastings
        fwd = s1.log_post - s0.log_post + prop.log_hastings
        rev = s0.log_post - s1.log_post + back
        assert fwd + rev == pytest.approx(0.0, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(trees(min_leaves=3, max_leaves=9), st.data())
def test_spr_target_counts_are_symmetric(t, data):
    nodes = [j for j in range(t.rstar) if j != t.root]
    i = data.draw(st.sampled_from(nodes))
    targets = _regraft_targets(t, i)
    p = t.parent[i]
    assert targets  # the sibling edge always qualifies
    target = data.draw(st.sampled_from(targets))
    new = t.copy()
    new.regraft(i, target)
    assert len(_regraft_targets(new, i)) == len(targets)
    assert new.ages[p] == t.ages[p]
    assert (new.branch_lengths()[:-2] >= 0).all()


def test_topology_move_respects_calibrations(ten_data, ten_cal):
    tree, mu = initial_tree(ten_data, ten_cal, PriorConfig(), np.random.default_rng(0))
    s = _state(ten_data, ten_cal, tree, mu)
    rng = np.random.default_rng(1)
    for _ in range(300):
        prop = move_topology(s, rng)
        if prop is None:
            continue
        new = s.posterior.state(prop.tree, prop.mu)
        if new is not None:
            assert admissible(new.tree, ten_cal)[0]


def test_moveset_restrictions(ten_data):
    post = Posterior(ten_data, None, ModelConfig(obs=1, mu=MU), PriorConfig())
    ms = MoveSet().restrict(post, 10)
    assert set(ms.weights) == {"node_age", "topology"}
    post2 = Posterior(ten_data, None, ModelConfig(obs=1), PriorConfig())
    assert set(MoveSet().restrict(post2, 2).weights) == {"node_age", "ridge", "mu"}
    with pytest.raises(ConfigurationError):
        MoveSet({"bogus": 1.0})
    with pytest.raises(ConfigurationError):
        MoveSet({"mu": 1.0}).restrict(post, 10)


def test_zero_weight_move_never_proposed(ten_data, ten_cal):
    w = dict(DEFAULT_WEIGHTS, topology=0.0)
    tr = run_chain(ten_data, ten_cal, ModelConfig(obs=1), PriorConfig(), Schedule(3000, 0, 10),
                   seed=2, weights=w)
    assert "topology" not in tr.proposed
    assert sum(tr.proposed.values()) == 3000
    assert all(tr.accepted[k] <= tr.proposed[k] for k in tr.proposed)


def test_seed_reproducibility_and_cache_consistency(ten_data, ten_cal):
    kw = dict(data=ten_data, cal=ten_cal, model=ModelConfig(obs=1), prior=PriorConfig(),
              schedule=Schedule(3000, 500, 25))
    a = run_chain(seed=9, check_every=1, **kw)
    b = run_chain(seed=9, **kw)
    c = run_chain(seed=10, **kw)
    assert a.log_post == b.log_post and a.mu == b.mu
    assert [t.to_newick() for t in a.trees] == [t.to_newick() for t in b.trees]
    assert a.log_post != c.log_post
    for t in a.trees:
        assert admissible(t, ten_cal)[0]
    assert np.isfinite(a.column("log_post")).all()


def test_initial_tree_respects_nested_calibrations(ten_data):
    cal = CalibrationSet([CladeConstraint("AB", {"A", "B"}, 700, 900),
                          CladeConstraint("ABCD", set("ABCD"), 1800, 2300),
                          CladeConstraint("IJ", {"I", "J"}, 2000, None)])
    tree, mu = initial_tree(ten_data, cal, PriorConfig(), np.random.default_rng(0))
    assert admissible(tree, cal)[0]
    assert 1e-5 < mu < 1e-2


def test_infeasible_calibrations_are_reported(ten_data):
    crossing = CalibrationSet([CladeConstraint("ABC", set("ABC"), 100, 5000),
                               CladeConstraint("CD", set("CD"), 100, 5000)])
    with pytest.raises(ConfigurationError, match="overlap"):
        run_chain(ten_data, crossing, ModelConfig(obs=1), PriorConfig(), Schedule(10, 0, 1), seed=0)
    inverted = CalibrationSet([CladeConstraint("AB", set("AB"), 3000, 3100),
                               CladeConstraint("ABCD", set("ABCD"), 100, 200)])
    with pytest.raises(ConfigurationError, match="infeasible"):
        run_chain(ten_data, inverted, ModelConfig(obs=1), PriorConfig(), Schedule(10, 0, 1), seed=0)


def test_leaf_age_move_keeps_leaves_in_range():
    tree = DatedTree.from_newick("((A:300,B:300):300,(C:350,D:350):250);")
    data = TraitMatrix(tree.names, np.zeros((0, 4), bool))
    cal = CalibrationSet([CladeConstraint("ABCD", set("ABCD"), 500, 700)],
                         {"A": LeafAgeInterval("A", 50, 250)})
    tr = run_chain(data, cal, ModelConfig(obs=1), PriorConfig(), Schedule(4000, 0, 10), seed=4)
    a = np.array([t.ages[t.leaf_index("A")] for t in tr.trees])
    assert (a >= 50).all() and (a <= 250).all() and np.ptp(a) > 50
    assert tr.proposed["leaf_age"] > 0


def test_prior_only_three_leaf_topologies_are_uniform():
    tr = run_chain(empty_data(3), None, ModelConfig(obs=1), PriorConfig(T=1000),
                   Schedule(60_000, 1000, 10), seed=5)
    counts = Counter(t.topology_key() for t in tr.trees)
    assert len(counts) == 3
    freq = np.array(list(counts.values())) / len(tr)
    assert np.abs(freq - 1 / 3).max() < 0.05


def test_prior_only_four_leaves_ranked_histories():
    """Balanced shapes have two rankings, caterpillars one: balanced mass is 3*2/18."""
    tr = run_chain(empty_data(4), None, ModelConfig(obs=1), PriorConfig(T=1000),
                   Schedule(80_000, 1000, 10), seed=6)
    balanced = np.mean([all(bin(m).count("1") in (2, 4) for m in t.clade_masks()) for t in tr.trees])
    assert balanced == pytest.approx(1 / 3, abs=0.05)


def test_invariant_error_on_bad_state(ten_data):
    tree = DatedTree.from_newick(TEN_TAXA)
    s = _state(ten_data, None, tree, MU)
    s.log_lkd = math.nan
    with pytest.raises(InvariantError):
        mh_step(s, MoveSet(), np.random.default_rng(0))


def test_trace_roundtrip(tmp_path, ten_data, ten_cal):
    tr = run_chain(ten_data, ten_cal, ModelConfig(obs=1), PriorConfig(), Schedule(1000, 0, 100), seed=3)
    path = tmp_path / "trace.tsv"
    tr.write_tsv(path)
    back = ChainTrace.read_tsv(path)
    assert back.iteration == tr.iteration and back.mu == tr.mu and back.log_post == tr.log_post
    assert back.meta["seed"] == 3 and back.proposed == tr.proposed
    for a, b in zip(tr.trees, back.trees):
        assert named_clades(a) == named_clades(b)
        assert b.root_age == pytest.approx(a.root_age, rel=1e-9)
    header = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")][0]
    assert header.split("\t") == ["iter", "log_post", "log_lkd", "mu", "t_root", "newick"]


def test_diagnostics_white_noise_and_constant():
    rng = np.random.default_rng(0)
    tr = ChainTrace()
    n = 5000
    tr.mu = list(rng.normal(size=n))
    tr.t_root = [1.0] * n
    tr.log_prior = list(rng.normal(size=n))
    tr.log_lkd = list(rng.normal(size=n))
    rep = diagnostics(tr)
    assert rep["mu"]["ess"] == pytest.approx(n, rel=0.1)
    assert rep["t_root"]["degenerate"]
    assert rep["mu"]["reliable"]
    short = ChainTrace(mu=[1.0, 2.0, 1.5], t_root=[1, 2, 3], log_prior=[0, 1, 0], log_lkd=[1, 0, 1])
    assert not diagnostics(short)["mu"]["reliable"]


def test_iact_of_ar1():
    rng = np.random.default_rng(1)
    phi = 0.9
    x = np.empty(100_000)
    x[0] = rng.normal() / math.sqrt(1 - phi**2)
    eps = rng.normal(size=len(x))
    for k in range(1, len(x)):
        x[k] = phi * x[k - 1] + eps[k]
    assert integrated_autocorrelation_time(x) == pytest.approx((1 + phi) / (1 - phi), rel=0.1)
