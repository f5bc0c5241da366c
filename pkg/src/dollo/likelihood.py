"""
Likelihood of binary trait data under the stochastic Dollo process.

Traits are born once on the tree at rate ``lambda`` and each instance dies
at rate ``mu``.  The likelihood integrates trait birth points out along the
branches: node-level survival probabilities (``u0``, ``u1``) feed the total
expected number of observed traits, and a pruning-style recursion gives
each observed pattern's edge-sum factor.

All ages are in years; ``mu`` and ``lambda`` are per year.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .tree import DatedTree


class DataError(ValueError):
    """Trait data inconsistent with the requested observation model."""


class ObservationModel(enum.IntEnum):
    """Minimum number of displaying leaves is ``d + 1``."""

    NOABSENT = 0
    NOUNIQUE = 1

    @classmethod
    def parse(cls, value) -> "ObservationModel":
        if isinstance(value, cls):
            return value
        if isinstance(value, int):
            return cls(value)
        return cls[str(value).upper()]


@dataclass
class TraitMatrix:
    """
    Presence/absence data: ``presence[a, k]`` is True when trait ``a`` is
    displayed by taxon ``taxa[k]``.
    """

    taxa: list
    presence: np.ndarray
    trait_ids: list = None
    classes: list | None = None

    def __post_init__(self):
        self.taxa = list(self.taxa)
        self.presence = np.asarray(self.presence, dtype=bool).reshape(-1, len(self.taxa))
        if self.trait_ids is None:
            self.trait_ids = [f"c{a + 1}" for a in range(len(self.presence))]
        self.trait_ids = list(self.trait_ids)
        if len(self.trait_ids) != len(self.presence):
            raise DataError("one identifier per trait required")
        if len(set(self.trait_ids)) != len(self.trait_ids):
            raise DataError("duplicate trait identifiers")
        if len(set(self.taxa)) != len(self.taxa):
            raise DataError("duplicate taxon names")
        if self.classes is not None and len(self.classes) != len(self.presence):
            raise DataError("one meaning class per trait required")

    @classmethod
    def from_sets(cls, taxa, sets, trait_ids=None, classes=None) -> "TraitMatrix":
        taxa = list(taxa)
        col = {t: k for k, t in enumerate(taxa)}
        pres = np.zeros((len(sets), len(taxa)), dtype=bool)
        for a, s in enumerate(sets):
            for t in s:
                if t not in col:
                    raise DataError(f"unknown taxon {t!r} in trait {a}")
                pres[a, col[t]] = True
        return cls(taxa, pres, trait_ids, classes)

    @property
    def n_traits(self) -> int:
        return len(self.presence)

    @property
    def sizes(self) -> np.ndarray:
        return self.presence.sum(axis=1)

    def leaf_sets(self) -> list:
        return [frozenset(self.taxa[k] for k in np.flatnonzero(row)) for row in self.presence]

    def validate(self, obs: ObservationModel) -> None:
        obs = ObservationModel.parse(obs)
        sizes = self.sizes
        if (sizes == 0).any():
            a = int(np.flatnonzero(sizes == 0)[0])
            raise DataError(f"trait {self.trait_ids[a]!r} is displayed at no taxon")
        if obs == ObservationModel.NOUNIQUE and (sizes == 1).any():
            a = int(np.flatnonzero(sizes == 1)[0])
            raise DataError(f"singleton trait {self.trait_ids[a]!r} under NOUNIQUE")

    def aligned_to(self, names) -> np.ndarray:
        """Presence columns reordered to follow ``names``."""
        col = {t: k for k, t in enumerate(self.taxa)}
        try:
            idx = [col[n] for n in names]
        except KeyError as e:
            raise DataError(f"tree leaf {e.args[0]!r} missing from data") from None
        if len(idx) != len(self.taxa):
            raise DataError("tree and data have different taxa")
        return self.presence[:, idx]

    def subset(self, rows) -> "TraitMatrix":
        rows = np.asarray(rows)
        return TraitMatrix(self.taxa, self.presence[rows],
                           [self.trait_ids[a] for a in np.arange(self.n_traits)[rows]],
                           None if self.classes is None
                           else [self.classes[a] for a in np.arange(self.n_traits)[rows]])

    def thin(self, obs: ObservationModel) -> "TraitMatrix":
        """Drop traits displayed at ``d`` or fewer taxa."""
        return self.subset(self.sizes > ObservationModel.parse(obs))

    def __eq__(self, other):
        return (isinstance(other, TraitMatrix) and self.taxa == other.taxa
                and self.trait_ids == other.trait_ids and self.classes == other.classes
                and np.array_equal(self.presence, other.presence))


@dataclass
class SurvivalTable:
    """``u0[i]`` / ``u1[i]``: a trait present at node i ends up at 0 / 1 leaves."""

    u0: np.ndarray
    u1: np.ndarray

    def prob_observed(self, obs: ObservationModel) -> np.ndarray:
        if obs == ObservationModel.NOABSENT:
            return 1.0 - self.u0
        return np.maximum(1.0 - self.u0 - self.u1, 0.0)


def _check_mu(mu: float) -> None:
    if not mu > 0 or not math.isfinite(mu):
        raise ValueError(f"death rate must be positive and finite, got {mu!r}")


def edge_terms(tree: DatedTree, mu: float) -> tuple:
    """
    ``(delta, w)`` per node: survival ``exp(-mu * len)`` along the edge above
    the node and ``w = 1 - delta``.  The root edge is infinite (delta = 0).
    """
    bl = tree.ages[tree.parent[:-1]] - tree.ages[:-1]
    x = mu * bl
    delta = np.exp(-x)
    w = -np.expm1(-x)
    return np.append(delta, 0.0), np.append(w, 1.0)


def survival_recursion(tree: DatedTree, mu: float) -> SurvivalTable:
    _check_mu(mu)
    delta, _ = edge_terms(tree, mu)
    return _survival(tree, delta)


def _survival(tree: DatedTree, delta: np.ndarray) -> SurvivalTable:
    n = tree.n_nodes
    u0 = np.zeros(n)
    u1 = np.zeros(n)
    L = tree.n_leaves
    u1[:L] = 1.0
    for i in tree.postorder():
        if i < L:
            continue
        j, k = tree.children[i]
        dj, dk = delta[j], delta[k]
        u0[i] = ((1 - dj) + dj * u0[j]) * ((1 - dk) + dk * u0[k])
        u1[i] = (dj * (1 - dk) * u1[j] + dk * (1 - dj) * u1[k]
                 + dj * dk * (u1[j] * u0[k] + u0[j] * u1[k]))
    return SurvivalTable(u0, u1)


def expected_births_integral(tree: DatedTree, mu: float, obs: ObservationModel,
                             table: SurvivalTable | None = None) -> float:
    """
    Dimensionless edge sum ``I`` with ``int lambda(z) dz = (lambda / mu) * I``.
    """
    _check_mu(mu)
    obs = ObservationModel.parse(obs)
    delta, w = edge_terms(tree, mu)
    if table is None:
        table = _survival(tree, delta)
    nodes = tree.postorder()
    return float(np.dot(table.prob_observed(obs)[nodes], w[nodes]))


def pattern_log_factor(tree: DatedTree, mu: float, m, table: SurvivalTable | None = None) -> float:
    """
    Log of the edge sum over the path from the MRCA of ``m`` to the root
    ancestor of Pr{pattern = m | trait at the lower node} * (1 - delta).

    ``m`` is a collection of leaf names.  Subtrees with no member of ``m``
    are closed off with their ``u0`` value instead of being descended.
    """
    _check_mu(mu)
    m = list(m)
    if not m:
        raise ValueError("pattern must contain at least one leaf")
    mask = tree.taxa_mask(m)
    delta, w = edge_terms(tree, mu)
    if table is None:
        table = _survival(tree, delta)
    masks = tree.leaf_masks()
    prob = {}

    def top(j):
        if masks[j] & mask:
            return delta[j] * prob[j]
        return (1 - delta[j]) + delta[j] * table.u0[j]

    for i in tree.postorder():
        if not masks[i] & mask:
            continue
        if tree.is_leaf(i):
            prob[i] = 1.0
        else:
            a, b = tree.children[i]
            prob[i] = top(a) * top(b)
    i = tree.mrca_mask(mask)
    total = 0.0
    while i != tree.rstar:
        total += prob[i] * w[i]
        i = int(tree.parent[i])
    return math.log(total) if total > 0 else -math.inf


def pattern_factors(tree: DatedTree, mu: float, presence: np.ndarray,
                    delta=None, w=None) -> np.ndarray:
    """Vectorized pattern edge sums for every row of ``presence`` (tree leaf order)."""
    if delta is None:
        delta, w = edge_terms(tree, mu)
    cache = _NodeArrays.build(tree, presence, delta, w)
    return cache.factors()


@dataclass
class _NodeArrays:
    """Per-node pattern probabilities for a whole data set."""

    P: np.ndarray        # [n_nodes, N] Pr{pattern below node | trait at node}
    empty: np.ndarray    # [n_nodes, N] node subtends no displaying leaf
    full: np.ndarray     # [n_nodes, N] node subtends every displaying leaf
    w: np.ndarray
    delta: np.ndarray

    @classmethod
    def counts(cls, tree: DatedTree, presence: np.ndarray) -> np.ndarray:
        n, L = tree.n_nodes, tree.n_leaves
        C = np.zeros((n, presence.shape[0]), dtype=np.int32)
        C[:L] = presence.T
        for i in tree.postorder():
            if i >= L:
                a, b = tree.children[i]
                np.add(C[a], C[b], out=C[i])
        return C

    @classmethod
    def build(cls, tree, presence, delta, w, counts=None):
        if counts is None:
            counts = cls.counts(tree, presence)
        sizes = counts[tree.root]
        empty = counts == 0
        full = counts == sizes
        P = np.empty(counts.shape)
        P[:tree.n_leaves] = presence.T
        P[tree.rstar] = 0.0
        out = cls(P, empty, full, w, delta)
        out.refresh(tree, [i for i in tree.postorder() if i >= tree.n_leaves])
        return out

    def refresh(self, tree, nodes) -> None:
        """Recompute P at ``nodes`` (given in postorder)."""
        P, E, d = self.P, self.empty, self.delta
        for i in nodes:
            j, k = tree.children[i]
            tj = d[j] * P[j]
            tj += (1 - d[j]) * E[j]
            tk = d[k] * P[k]
            tk += (1 - d[k]) * E[k]
            np.multiply(tj, tk, out=P[i])

    def factors(self) -> np.ndarray:
        return np.einsum("ia,ia,i->a", self.full, self.P, self.w)


def log_likelihood(tree: DatedTree, mu: float, lam: float, data: TraitMatrix,
                   obs: ObservationModel) -> float:
    """
    Log probability of the data as an ordered list of ``N`` leaf sets,
    constant ``1/N!`` included.
    """
    _check_mu(mu)
    if not lam > 0:
        raise ValueError(f"birth rate must be positive, got {lam!r}")
    obs = ObservationModel.parse(obs)
    data.validate(obs)
    delta, w = edge_terms(tree, mu)
    I = expected_births_integral(tree, mu, obs, _survival(tree, delta))
    N = data.n_traits
    out = -(lam / mu) * I - gammaln(N + 1)
    if N:
        F = pattern_factors(tree, mu, data.aligned_to(tree.names), delta, w)
        out += N * (math.log(lam) - math.log(mu)) + float(np.sum(np.log(F)))
    return float(out)


def log_likelihood_marginal_lambda(tree: DatedTree, mu: float, data: TraitMatrix,
                                   obs: ObservationModel) -> float:
    """
    ``log int P(D | g, mu, lambda) lambda^-1 d lambda``.

    The integrand is a Gamma kernel in lambda (shape ``N``, rate ``I / mu``),
    so the integral is ``Gamma(N) / N! * I^-N * prod(F_a)``; ``mu`` enters
    only through ``I`` and the pattern factors.
    """
    _check_mu(mu)
    obs = ObservationModel.parse(obs)
    N = data.n_traits
    if N == 0:
        raise ValueError("lambda marginal is improper for empty data")
    data.validate(obs)
    delta, w = edge_terms(tree, mu)
    I = expected_births_integral(tree, mu, obs, _survival(tree, delta))
    F = pattern_factors(tree, mu, data.aligned_to(tree.names), delta, w)
    return float(-math.log(N) - N * math.log(I) + np.sum(np.log(F)))


def lambda_conditional(n_traits: int, births_integral: float, mu: float) -> tuple:
    """
    ``(shape, rate)`` of the Gamma posterior of lambda under the 1/lambda
    prior: density proportional to ``lambda^(N-1) exp(-lambda * I / mu)``.
    """
    return float(n_traits), births_integral / mu


class LikelihoodEngine:
    """
    Cached marginal likelihood (lambda integrated) for MCMC.

    ``evaluate`` does a full computation; ``update_ages`` reuses the cached
    node arrays and recomputes only the path from the edited nodes to the
    root.
    """

    def __init__(self, data: TraitMatrix, obs: ObservationModel):
        self.data = data
        self.obs = ObservationModel.parse(obs)
        data.validate(self.obs)
        if data.n_traits == 0:
            raise DataError("no traits to fit")
        self.N = data.n_traits
        self._presence_for = {}

    def _presence(self, names):
        key = tuple(names)
        if key not in self._presence_for:
            self._presence_for[key] = np.ascontiguousarray(self.data.aligned_to(names))
        return self._presence_for[key]

    def evaluate(self, tree: DatedTree, mu: float, same_topology: "LikelihoodState | None" = None
                 ) -> "LikelihoodState":
        """Full computation; ``same_topology`` lends its occupancy masks when the topology is unchanged."""
        _check_mu(mu)
        delta, w = edge_terms(tree, mu)
        if same_topology is not None:
            a = same_topology.arrays
            arrays = _NodeArrays(a.P.copy(), a.empty, a.full, w, delta)
            arrays.refresh(tree, [i for i in tree.postorder() if i >= tree.n_leaves])
        else:
            arrays = _NodeArrays.build(tree, self._presence(tree.names), delta, w)
        state = LikelihoodState(self, tree, mu, arrays, _survival(tree, delta))
        state.finish()
        return state

    def update_ages(self, prev: "LikelihoodState", tree: DatedTree, nodes) -> "LikelihoodState":
        """State for ``tree`` that differs from ``prev.tree`` only in the ages of ``nodes``."""
        delta, w = edge_terms(tree, prev.mu)
        path = set()
        for k in nodes:
            if not tree.is_leaf(k):
                path.add(k)
            path.update(tree.ancestors(k))
        order = [i for i in tree.postorder() if i in path]
        a = prev.arrays
        arrays = _NodeArrays(a.P.copy(), a.empty, a.full, w, delta)
        arrays.refresh(tree, order)
        state = LikelihoodState(self, tree, prev.mu, arrays, _survival(tree, delta))
        state.finish()
        return state


@dataclass
class LikelihoodState:
    engine: LikelihoodEngine
    tree: DatedTree
    mu: float
    arrays: _NodeArrays
    table: SurvivalTable
    births_integral: float = field(default=math.nan)
    log_marginal: float = field(default=math.nan)

    def finish(self) -> None:
        nodes = self.tree.postorder()
        pobs = self.table.prob_observed(self.engine.obs)
        I = float(np.dot(pobs[nodes], self.arrays.w[nodes]))
        self.births_integral = I
        F = self.arrays.factors()
        N = self.engine.N
        with np.errstate(divide="ignore"):
            logF = float(np.sum(np.log(F)))
        if I <= 0:
            self.log_marginal = -math.inf
        else:
            self.log_marginal = -math.log(N) - N * math.log(I) + logF


# -- two-leaf closed forms --------------------------------------------


def two_leaf_log_likelihood(abs_len: float, lam: float, mu: float, n1: int, n2: int,
                            n12: int) -> float:
    """Closed-form log likelihood of two-taxon counts, ``1/N!`` included."""
    x = mu * abs_len
    N = n1 + n2 + n12
    out = N * math.log(lam / mu) - (lam / mu) * (2 - math.exp(-x)) - gammaln(N + 1)
    if n1 + n2:
        out += (n1 + n2) * math.log(-math.expm1(-x)) if x > 0 else -math.inf
    return out - x * n12


def two_leaf_mle(n1: int, n2: int, n12: int, mu: float) -> float:
    """
    Joint maximizer over tree length and lambda of the two-taxon likelihood.
    Returns ``inf`` when the taxa share no trait.
    """
    _check_mu(mu)
    if min(n1, n2, n12) < 0:
        raise ValueError("counts must be non-negative")
    if n12 == 0:
        return math.inf
    return math.log1p((n1 + n2) / (2 * n12)) / mu


def two_leaf_posterior_logpdf(abs_len: float, mu: float, n1: int, n2: int, n12: int) -> float:
    """
    Unnormalized log posterior of the two-taxon tree length with ``mu`` known,
    after integrating lambda and the branching rate against 1/x priors.
    """
    if not abs_len > 0:
        raise ValueError(f"tree length must be positive, got {abs_len!r}")
    _check_mu(mu)
    x = mu * abs_len
    log_norm = math.log(2 - math.exp(-x))
    out = -math.log(x) + n12 * (-x - log_norm)
    if n1 + n2:
        out += (n1 + n2) * (math.log(-math.expm1(-x)) - log_norm)
    return out
