import numpy as np
import pytest
from hypothesis import strategies as st

from dollo.tree import DatedTree

TEN_TAXA = ("((((A:800,B:800):1200,(C:1500,D:1500):500):1000,(E:2000,F:2000):1000):1000,"
            "((G:1000,H:1000):2500,(I:2200,J:2200):1300):500);")


def random_tree(rng, n_leaves, scale=1000.0, leaf_jitter=0.0):
    """Coalescent-style random tree; leaves optionally offset from age 0."""
    names = [f"t{k}" for k in range(n_leaves)]
    leaf_ages = rng.uniform(0, leaf_jitter, n_leaves) if leaf_jitter else np.zeros(n_leaves)
    active = list(range(n_leaves))
    node_age = {k: leaf_ages[k] for k in range(n_leaves)}
    merges, ages = [], []
    t = float(leaf_ages.max())
    nxt = n_leaves
    while len(active) > 1:
        t += rng.exponential(scale / len(active))
        i, j = rng.choice(len(active), 2, replace=False)
        a, b = active[i], active[j]
        merges.append((a, b))
        ages.append(t)
        node_age[nxt] = t
        active = [x for x in active if x not in (a, b)] + [nxt]
        nxt += 1
    return DatedTree.from_merges(names, merges, ages, leaf_ages)


@st.composite
def trees(draw, min_leaves=2, max_leaves=8, leaf_jitter=0.0):
    n = draw(st.integers(min_leaves, max_leaves))
    seed = draw(st.integers(0, 2**31 - 1))
    return random_tree(np.random.default_rng(seed), n, leaf_jitter=leaf_jitter)


@pytest.fixture
def three_taxa():
    return DatedTree.from_newick("((A:500,B:500):700,C:1200);")


@pytest.fixture
def ten_taxa():
    return DatedTree.from_newick(TEN_TAXA)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
