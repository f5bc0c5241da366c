"""
Forward simulation of the trait birth-death process on a dated tree.

Two kernels:

* ``_simulate_independent`` -- traits evolve independently, so each
  instance carries its own exponential death clock and births on a branch
  are a Poisson scatter.  Exact, and supports per-edge death rates.
* ``_simulate_interacting`` -- a Gillespie walk down the time axis over all
  branches alive at once.  Needed when instances interact: lateral
  borrowing between linked lineages, or the no-empty-class constraint.

Scenario codes follow the ``S/X/Y`` convention: ``X`` in ``T``, ``G<b>``,
``L<z>-<b>``, ``BH<pct>``, ``MH<pct>``; ``Y`` in ``U<n>`` (unconstrained,
``lambda/mu = n``) and ``C<K>`` (``K`` meaning classes that never empty).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .likelihood import ObservationModel, TraitMatrix
from .tree import DatedTree

MAX_EXPECTED_TRAITS = 1e6


class ScenarioError(ValueError):
    pass


@dataclass
class SimScenario:
    """
    Simulation settings.  ``lam`` is the total birth rate per year; with
    ``meaning_classes = K`` each class is born at ``lam / K``.
    """

    tree: DatedTree
    lam: float
    mu: float
    obs: ObservationModel = ObservationModel.NOABSENT
    borrowing: str = "none"          # none | global | local
    borrow_rate: float = 0.0         # b: borrowing events per instance at rate b * mu
    borrow_depth: float = math.inf   # z: local linkage horizon in years
    rate_het: str = "none"           # none | branch | meaning
    rate_sd: float = 0.0             # r: rate sd as a fraction of mu
    meaning_classes: int = 1
    empty_field: bool = False
    seed: int = 0
    code: str | None = None

    def __post_init__(self):
        self.obs = ObservationModel.parse(self.obs)
        if not (self.lam > 0 and self.mu > 0):
            raise ScenarioError("birth and death rates must be positive")
        if self.borrowing not in ("none", "global", "local"):
            raise ScenarioError(f"unknown borrowing mode {self.borrowing!r}")
        if self.rate_het not in ("none", "branch", "meaning"):
            raise ScenarioError(f"unknown rate heterogeneity mode {self.rate_het!r}")
        if self.borrow_rate < 0 or self.rate_sd < 0:
            raise ScenarioError("borrowing rate and rate sd must be non-negative")
        if self.borrowing == "local" and not self.borrow_depth > 0:
            raise ScenarioError("local borrowing needs a positive time depth")
        if self.meaning_classes < 1:
            raise ScenarioError("need at least one meaning class")
        if self.lam / self.mu > MAX_EXPECTED_TRAITS:
            raise ScenarioError(f"lambda/mu = {self.lam / self.mu:g} is too large to simulate")
        if self.rate_het != "none" and (self.borrowing != "none" or self.empty_field):
            raise ScenarioError("rate heterogeneity cannot be combined with borrowing or empty-field")


@dataclass
class SimResult:
    """Simulated data plus the ground truth behind it."""

    data: TraitMatrix
    tree: DatedTree
    birth_node: np.ndarray           # node whose parent edge holds the birth
    birth_age: np.ndarray            # age of the birth (years BP)
    code: str | None = None
    class_rates: np.ndarray | None = None
    edge_rates: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def parse_scenario_code(code: str) -> dict:
    """
    Translate ``S/X/Y`` into scenario keyword arguments (rates excluded).

    >>> parse_scenario_code("S/L500-1/U200")["borrow_depth"]
    500.0
    """
    parts = code.strip().split("/")
    if len(parts) != 3 or parts[0] != "S":
        raise ScenarioError(f"scenario code must look like S/X/Y, got {code!r}")
    _, x, y = parts
    out = {"code": code}
    if x == "T":
        pass
    elif m := re.fullmatch(r"G(\d+(?:\.\d+)?)", x):
        out.update(borrowing="global", borrow_rate=float(m[1]))
    elif m := re.fullmatch(r"L(\d+(?:\.\d+)?)-(\d+(?:\.\d+)?)", x):
        out.update(borrowing="local", borrow_depth=float(m[1]), borrow_rate=float(m[2]))
    elif m := re.fullmatch(r"(BH|MH)(\d+(?:\.\d+)?)", x):
        out.update(rate_het="branch" if m[1] == "BH" else "meaning", rate_sd=float(m[2]) / 100)
    else:
        raise ScenarioError(f"unknown borrowing/heterogeneity code {x!r}")
    if m := re.fullmatch(r"U(\d+(?:\.\d+)?)", y):
        out.update(lam_over_mu=float(m[1]), obs=ObservationModel.NOABSENT)
    elif m := re.fullmatch(r"C(\d+)", y):
        out.update(meaning_classes=int(m[1]), empty_field=True)
    else:
        raise ScenarioError(f"unknown constraint code {y!r}")
    return out


def scenario_from_code(code: str, tree: DatedTree, mu: float, seed: int,
                       class_ratio: float = 1.4, meaning_classes: int | None = None,
                       obs=None) -> SimScenario:
    """
    Build a scenario from its code.  ``C<K>`` codes use ``class_ratio``
    traits per class (``lambda_k / mu``); ``MH`` codes split the birth rate
    over ``meaning_classes`` (default 200) classes.
    """
    kw = parse_scenario_code(code)
    ratio = kw.pop("lam_over_mu", None)
    if kw.get("empty_field"):
        lam = class_ratio * kw["meaning_classes"] * mu
    else:
        lam = ratio * mu
    if kw.get("rate_het") == "meaning":
        kw["meaning_classes"] = meaning_classes or 200
    if obs is not None:
        kw["obs"] = obs
    return SimScenario(tree=tree, lam=lam, mu=mu, seed=seed, **kw)


def gamma_rates(mean: float, sd_fraction: float, size, rng) -> np.ndarray:
    """Gamma draws with the given mean and standard deviation ``sd_fraction * mean``."""
    if sd_fraction == 0:
        return np.full(size, mean)
    shape = 1.0 / sd_fraction ** 2
    return rng.gamma(shape, mean / shape, size=size)


# -- independent-instance kernel -----------------------------------------


def _simulate_independent(tree: DatedTree, lam: float, mu_edge: np.ndarray, mu_root: float,
                          rng: np.random.Generator, root_count: int | None = None):
    """
    Returns ``(presence [n_traits, L], birth_node, birth_age)`` for traits
    alive at one or more leaves.  ``mu_edge[i]`` is the death rate on the
    edge above node ``i``.
    """
    L = tree.n_leaves
    root = tree.root
    t_root = tree.ages[root]
    n0 = rng.poisson(lam / mu_root) if root_count is None else root_count
    birth_node = [np.full(n0, root)]
    birth_age = [t_root + rng.exponential(1.0 / mu_root, size=n0)]
    next_id = n0
    alive = {root: np.arange(n0)}
    leaf_sets = {}
    stack = [root]
    while stack:
        p = stack.pop()
        if p < L:
            leaf_sets[p] = alive.pop(p)
            continue
        incoming = alive.pop(p)
        for i in tree.children[p]:
            i = int(i)
            length = tree.ages[p] - tree.ages[i]
            m = mu_edge[i]
            keep = incoming[rng.exponential(1.0, size=incoming.size) > m * length]
            k = rng.poisson(lam * length)
            if k:
                tau = rng.uniform(0.0, length, size=k)      # time above the node
                survive = rng.exponential(1.0, size=k) > m * tau
                ns = int(survive.sum())
                new = np.arange(next_id, next_id + ns)
                next_id += ns
                birth_node.append(np.full(ns, i))
                birth_age.append(tree.ages[i] + tau[survive])
                keep = np.concatenate([keep, new])
            alive[i] = keep
            stack.append(i)
    presence = np.zeros((next_id, L), dtype=bool)
    for k, ids in leaf_sets.items():
        presence[ids, k] = True
    birth_node = np.concatenate(birth_node)
    birth_age = np.concatenate(birth_age)
    seen = presence.any(axis=1)
    return presence[seen], birth_node[seen], birth_age[seen]


# -- interacting kernel --------------------------------------------------


class _Lineage:
    """Trait instances carried by one branch, grouped by meaning class."""

    __slots__ = ("items", "pos", "class_count", "n_killable")

    def __init__(self, n_classes):
        self.items = []
        self.pos = {}
        self.class_count = [0] * n_classes
        self.n_killable = 0

    def copy(self):
        out = _Lineage.__new__(_Lineage)
        out.items = list(self.items)
        out.pos = dict(self.pos)
        out.class_count = list(self.class_count)
        out.n_killable = self.n_killable
        return out

    def _killable(self, cls_count, empty_field):
        return cls_count if not empty_field or cls_count > 1 else 0

    def add(self, trait, k, empty_field):
        if trait in self.pos:
            return False
        self.pos[trait] = len(self.items)
        self.items.append(trait)
        c = self.class_count[k]
        self.n_killable += self._killable(c + 1, empty_field) - self._killable(c, empty_field)
        self.class_count[k] = c + 1
        return True

    def remove(self, trait, k, empty_field):
        idx = self.pos.pop(trait)
        last = self.items.pop()
        if last != trait:
            self.items[idx] = last
            self.pos[last] = idx
        c = self.class_count[k]
        self.n_killable += self._killable(c - 1, empty_field) - self._killable(c, empty_field)
        self.class_count[k] = c - 1


def _truncated_poisson(mean, rng):
    while True:
        n = rng.poisson(mean)
        if n > 0:
            return n


def _linkage_ages(tree: DatedTree) -> np.ndarray:
    """Age of the MRCA of every pair of nodes."""
    n = tree.n_nodes - 1
    masks = tree.leaf_masks()
    out = np.zeros((n, n))
    for a in range(n):
        for b in range(a, n):
            node = tree.mrca_mask(masks[a] | masks[b])
            out[a, b] = out[b, a] = tree.ages[node]
    return out


def linkage_neighbors(tree: DatedTree, active, tau: float, mode: str, depth: float,
                      mrca_age: np.ndarray | None = None) -> dict:
    """
    Linkage graph over the branches alive at age ``tau`` (keyed by the node
    below each branch).  Global: complete graph.  Local: branches whose
    common ancestor is less than ``depth`` years older than ``tau``.
    """
    active = list(active)
    if mode == "global":
        return {b: [c for c in active if c != b] for b in active}
    if mrca_age is None:
        mrca_age = _linkage_ages(tree)
    return {b: [c for c in active if c != b and mrca_age[b, c] - tau < depth] for b in active}


def _simulate_interacting(sc: SimScenario, rng: np.random.Generator):
    tree = sc.tree
    L = tree.n_leaves
    K = sc.meaning_classes
    lam_k = sc.lam / K
    mu = sc.mu
    b_rate = sc.borrow_rate * mu if sc.borrowing != "none" else 0.0
    ef = sc.empty_field
    mrca_age = _linkage_ages(tree) if sc.borrowing == "local" else None

    trait_class = []
    birth_node, birth_age = [], []
    root = tree.root
    t_root = tree.ages[root]
    top = _Lineage(K)
    for k in range(K):
        n = _truncated_poisson(lam_k / mu, rng) if ef else rng.poisson(lam_k / mu)
        for _ in range(n):
            c = len(trait_class)
            trait_class.append(k)
            birth_node.append(root)
            birth_age.append(t_root + rng.exponential(1.0 / mu))
            top.add(c, k, ef)

    active = {}
    leaf_sets = {}

    def split(node, lineage):
        if node < L:
            leaf_sets[node] = lineage
            return
        a, b = (int(x) for x in tree.children[node])
        active[a] = lineage
        active[b] = lineage.copy()

    split(root, top)
    tau = t_root
    n_borrow = 0
    while active:
        nxt = max(active, key=lambda j: tree.ages[j])
        boundary = tree.ages[nxt]
        branches = list(active)
        sizes = np.array([len(active[j].items) for j in branches], dtype=float)
        kill = np.array([active[j].n_killable for j in branches], dtype=float) if ef else sizes
        r_birth = sc.lam * len(branches)
        r_death = mu * kill.sum()
        r_borrow = b_rate * sizes.sum()
        total = r_birth + r_death + r_borrow
        dt = rng.exponential(1.0 / total) if total > 0 else math.inf
        if tau - dt <= boundary:
            tau = boundary
            split(nxt, active.pop(nxt))
            continue
        tau -= dt
        u = rng.random() * total
        if u < r_birth:
            j = branches[int(rng.integers(len(branches)))]
            k = int(rng.integers(K))
            c = len(trait_class)
            trait_class.append(k)
            birth_node.append(j)
            birth_age.append(tau)
            active[j].add(c, k, ef)
        elif u < r_birth + r_death:
            j = branches[_weighted_index(kill, rng)]
            lin = active[j]
            while True:
                c = lin.items[int(rng.integers(len(lin.items)))]
                k = trait_class[c]
                if not ef or lin.class_count[k] > 1:
                    break
            lin.remove(c, k, ef)
        else:
            j = branches[_weighted_index(sizes, rng)]
            lin = active[j]
            c = lin.items[int(rng.integers(len(lin.items)))]
            if sc.borrowing == "global":
                nbrs = [x for x in branches if x != j]
            else:
                nbrs = [x for x in branches if x != j and mrca_age[j, x] - tau < sc.borrow_depth]
            if nbrs:
                target = nbrs[int(rng.integers(len(nbrs)))]
                n_borrow += active[target].add(c, trait_class[c], ef)

    presence = np.zeros((len(trait_class), L), dtype=bool)
    for j, lin in leaf_sets.items():
        presence[lin.items, j] = True
    seen = presence.any(axis=1)
    extra = {"borrow_events": n_borrow,
             "leaf_class_counts": {tree.names[j]: list(lin.class_count) for j, lin in leaf_sets.items()}}
    return (presence[seen], np.asarray(birth_node)[seen], np.asarray(birth_age)[seen],
            np.asarray(trait_class)[seen], extra)


def _weighted_index(weights: np.ndarray, rng) -> int:
    c = np.cumsum(weights)
    return int(np.searchsorted(c, rng.random() * c[-1], side="right"))


# -- public entry points -------------------------------------------------


def _finish(sc: SimScenario, presence, bnode, bage, classes=None, **kw) -> SimResult:
    tree = sc.tree
    ids = [f"c{a + 1}" for a in range(len(presence))]
    cls = None if classes is None else [f"k{int(k) + 1}" for k in classes]
    data = TraitMatrix(tree.names, presence, ids, cls)
    keep = data.sizes > int(sc.obs)
    data = data.subset(keep)
    data.trait_ids = [f"c{a + 1}" for a in range(data.n_traits)]
    return SimResult(data, tree, bnode[keep], bage[keep], sc.code, **kw)


def simulate_traits(sc: SimScenario) -> SimResult:
    """Homogeneous process with no interactions."""
    if sc.borrowing != "none" or sc.rate_het != "none" or sc.empty_field:
        raise ScenarioError("simulate_traits needs a plain scenario")
    rng = np.random.default_rng(sc.seed)
    mu_edge = np.full(sc.tree.n_nodes, sc.mu)
    pres, bn, ba = _simulate_independent(sc.tree, sc.lam, mu_edge, sc.mu, rng)
    return _finish(sc, pres, bn, ba)


def simulate_with_borrowing(sc: SimScenario) -> SimResult:
    """Lateral copying of trait instances between linked lineages."""
    if sc.borrowing == "none":
        raise ScenarioError("scenario has no borrowing mode")
    rng = np.random.default_rng(sc.seed)
    pres, bn, ba, cls, extra = _simulate_interacting(sc, rng)
    return _finish(sc, pres, bn, ba, cls if sc.meaning_classes > 1 else None, extra=extra)


def simulate_rate_heterogeneity(sc: SimScenario) -> SimResult:
    """
    Gamma-distributed death rates (mean ``mu``, sd ``rate_sd * mu``), drawn
    per edge or per meaning class.  Classes are simulated separately and
    merged by set union.
    """
    if sc.rate_het == "none":
        raise ScenarioError("scenario has no rate heterogeneity mode")
    rng = np.random.default_rng(sc.seed)
    tree = sc.tree
    if sc.rate_het == "branch":
        rates = gamma_rates(sc.mu, sc.rate_sd, tree.n_nodes, rng)
        rates[tree.rstar] = sc.mu
        pres, bn, ba = _simulate_independent(tree, sc.lam, rates, sc.mu, rng)
        return _finish(sc, pres, bn, ba, edge_rates=rates)
    K = sc.meaning_classes
    rates = gamma_rates(sc.mu, sc.rate_sd, K, rng)
    parts, bns, bas, cls = [], [], [], []
    mu_edge = np.empty(tree.n_nodes)
    for k in range(K):
        mu_edge.fill(rates[k])
        p, bn, ba = _simulate_independent(tree, sc.lam / K, mu_edge, rates[k], rng)
        parts.append(p)
        bns.append(bn)
        bas.append(ba)
        cls.append(np.full(len(p), k))
    return _finish(sc, np.concatenate(parts), np.concatenate(bns), np.concatenate(bas),
                   np.concatenate(cls), class_rates=rates)


def simulate_empty_field(sc: SimScenario) -> SimResult:
    """
    Meaning classes that are never empty on any lineage: the root count per
    class is a zero-truncated Poisson and the last instance of a class
    cannot die.
    """
    if not sc.empty_field:
        raise ScenarioError("scenario is not empty-field constrained")
    rng = np.random.default_rng(sc.seed)
    pres, bn, ba, cls, extra = _simulate_interacting(sc, rng)
    return _finish(sc, pres, bn, ba, cls, extra=extra)


def simulate(sc: SimScenario) -> SimResult:
    """Dispatch on the scenario's settings."""
    if sc.empty_field:
        return simulate_empty_field(sc)
    if sc.borrowing != "none":
        return simulate_with_borrowing(sc)
    if sc.rate_het != "none":
        return simulate_rate_heterogeneity(sc)
    return simulate_traits(sc)


def simulate_presence(tree: DatedTree, lam: float, mu: float, rng: np.random.Generator) -> np.ndarray:
    """Presence matrix (tree leaf order) of all traits seen at one or more leaves."""
    mu_edge = np.full(tree.n_nodes, mu)
    return _simulate_independent(tree, lam, mu_edge, mu, rng)[0]
