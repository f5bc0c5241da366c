"""
Metropolis-Hastings sampling of dated trees and the trait death rate.

The target is the marginal posterior of (tree, mu): the birth rate and the
branching rate are integrated analytically against 1/x priors.  Calibration
constraints are enforced by rejecting proposals that violate them.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .likelihood import LikelihoodEngine, ObservationModel, TraitMatrix
from .priors import PriorConfig, TreePrior, log_mu_prior, log_tree_prior
from .tree import CalibrationSet, DatedTree, TreeError, admissible

log = logging.getLogger(__name__)

MOVES = ("node_age", "topology", "ridge", "mu", "leaf_age")
DEFAULT_WEIGHTS = {"node_age": 0.40, "topology": 0.25, "ridge": 0.15, "mu": 0.10, "leaf_age": 0.10}


class ConfigurationError(ValueError):
    """No admissible starting state, or inconsistent run settings."""


class InvariantError(RuntimeError):
    """The chain reached a state with non-finite target density."""


@dataclass(frozen=True)
class ModelConfig:
    """Observation model and, optionally, a fixed death rate (per year)."""

    obs: ObservationModel = ObservationModel.NOUNIQUE
    mu: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "obs", ObservationModel.parse(self.obs))
        if self.mu is not None and not self.mu > 0:
            raise ValueError("fixed death rate must be positive")


@dataclass(frozen=True)
class Schedule:
    iterations: int
    burn_in: int | None = None
    thin: int | None = None

    def resolved(self) -> tuple:
        burn = self.burn_in if self.burn_in is not None else self.iterations // 10
        thin = self.thin if self.thin is not None else max(1, (self.iterations - burn) // 10_000)
        if burn < 0 or thin < 1 or burn >= self.iterations:
            raise ConfigurationError(f"bad schedule {self}")
        return burn, thin


@dataclass(frozen=True)
class Tuning:
    """Proposal widths: log-scale window for the root gap and for mu."""

    root_window: float = 0.6
    mu_window: float = 0.6
    ridge_low: float = 0.5
    ridge_high: float = 2.0

    def __post_init__(self):
        if min(self.root_window, self.mu_window) <= 0:
            raise ConfigurationError("proposal windows must be positive")
        # the reverse of a scale by rho is a scale by 1/rho, which must be drawable
        if not (0 < self.ridge_low < 1 < self.ridge_high
                and math.isclose(self.ridge_low * self.ridge_high, 1.0)):
            raise ConfigurationError("ridge range must be [1/c, c] for some c > 1")


# -- target ------------------------------------------------------------


class Posterior:
    """Everything needed to score a (tree, mu) state."""

    def __init__(self, data: TraitMatrix, cal: CalibrationSet, model: ModelConfig,
                 prior: PriorConfig):
        self.data = data
        self.cal = cal or CalibrationSet()
        self.model = model
        self.prior = prior
        self.cal.validate(data.taxa)
        self.engine = LikelihoodEngine(data, model.obs) if data.n_traits else None
        self._clade_checks = None

    def _checks(self, tree: DatedTree):
        if self._clade_checks is None or self._clade_checks[0] != tree.names:
            clades = [(tree.taxa_mask(c.taxa),
                       -math.inf if c.lower is None else c.lower,
                       math.inf if c.upper is None else c.upper) for c in self.cal.clades]
            leaves = [(k, *self.cal.leaf_interval(nm)) for k, nm in enumerate(tree.names)]
            self._clade_checks = (tree.names, clades, leaves)
        return self._clade_checks

    def admissible(self, tree: DatedTree) -> bool:
        _, clades, leaves = self._checks(tree)
        ages = tree.ages
        if clades:
            masks = tree.leaf_masks()
            for m, lo, hi in clades:
                node = tree.mrca_mask(m)
                if masks[node] != m or not lo <= ages[node] <= hi:
                    return False
        for k, lo, hi in leaves:
            if not lo <= ages[k] <= hi:
                return False
        return True

    def state(self, tree: DatedTree, mu: float, prev: "ChainState | None" = None,
              changed=None) -> "ChainState | None":
        """Score a state; None when it is outside the support."""
        if not self.admissible(tree):
            return None
        # leaf intervals were checked above, so their box prior is flat here
        lp = log_mu_prior(mu, self.prior)
        if lp == -math.inf:
            return None
        lp += log_tree_prior(tree, self.cal, self.prior)
        if lp == -math.inf:
            return None
        lik = None
        ll = 0.0
        if self.engine is not None:
            if prev is not None and prev.lik is not None and changed is not None and mu == prev.mu:
                lik = self.engine.update_ages(prev.lik, tree, changed)
            elif prev is not None and prev.lik is not None and tree.same_topology(prev.tree):
                lik = self.engine.evaluate(tree, mu, same_topology=prev.lik)
            else:
                lik = self.engine.evaluate(tree, mu)
            ll = lik.log_marginal
            if not math.isfinite(ll):
                return None
        return ChainState(tree, mu, lp, ll, lik, self)

    def recompute(self, s: "ChainState") -> "ChainState":
        return self.state(s.tree, s.mu)


@dataclass
class ChainState:
    tree: DatedTree
    mu: float
    log_prior: float
    log_lkd: float
    lik: object
    posterior: Posterior

    @property
    def log_post(self) -> float:
        return self.log_prior + self.log_lkd


@dataclass
class Proposal:
    tree: DatedTree
    mu: float
    log_hastings: float = 0.0
    changed: list | None = None     # nodes whose ages moved (None: full recompute)


# -- moves ---------------------------------------------------------------


def move_node_age(state: ChainState, rng: np.random.Generator,
                  tuning: Tuning = Tuning()) -> Proposal | None:
    """
    Resample one internal node age uniformly between its oldest child and
    its parent.  The root, whose parent edge is unbounded, takes a
    log-scale random-walk step on its gap above the oldest child.
    """
    tree = state.tree
    L = tree.n_leaves
    i = int(rng.integers(L, 2 * L - 1))
    a, b = tree.children[i]
    lo = max(tree.ages[a], tree.ages[b])
    t = tree.ages[i]
    new = tree.copy()
    if i == tree.root:
        gap = t - lo
        if gap <= 0:
            return None
        step = tuning.root_window * (rng.random() - 0.5)
        new.ages[i] = lo + gap * math.exp(step)
        return Proposal(new, state.mu, step, [i])
    hi = tree.ages[tree.parent[i]]
    if hi <= lo:
        return None
    new.ages[i] = rng.uniform(lo, hi)
    return Proposal(new, state.mu, 0.0, [i])


def move_leaf_age(state: ChainState, rng: np.random.Generator,
                  tuning: Tuning = Tuning()) -> Proposal | None:
    """Resample a dated leaf uniformly inside its interval, below its parent."""
    tree = state.tree
    cal = state.posterior.cal
    free = [k for k, nm in enumerate(tree.names)
            if nm in cal.leaf_ages and cal.leaf_ages[nm].t_plus > cal.leaf_ages[nm].t_minus]
    if not free:
        return None
    k = free[int(rng.integers(len(free)))]
    lo, hi = cal.leaf_interval(tree.names[k])
    hi = min(hi, tree.ages[tree.parent[k]])
    if hi <= lo:
        return None
    new = tree.copy()
    new.ages[k] = rng.uniform(lo, hi)
    return Proposal(new, state.mu, 0.0, [k])


def _regraft_targets(tree: DatedTree, i: int) -> list:
    """Edges of the tree with subtree ``i`` pruned that span the pruned parent's age."""
    p = int(tree.parent[i])
    tp = tree.ages[p]
    sib = int(tree.children[p, 0] if tree.children[p, 1] == i else tree.children[p, 1])
    gp = int(tree.parent[p])
    inside = set()
    stack = [i]
    while stack:
        j = stack.pop()
        inside.add(j)
        if not tree.is_leaf(j):
            stack.extend(int(c) for c in tree.children[j])
    out = []
    for j in tree.postorder():
        if j in inside or j == p:
            continue
        up = gp if j == sib else int(tree.parent[j])
        if tree.ages[j] <= tp < tree.ages[up]:
            out.append(j)
    return out


def move_topology(state: ChainState, rng: np.random.Generator,
                  tuning: Tuning = Tuning()) -> Proposal | None:
    """
    Subtree prune and regraft at fixed ages: the pruned subtree's parent
    node keeps its age and is reattached on an edge spanning that age.
    """
    tree = state.tree
    if tree.n_leaves < 3:
        return None
    nodes = [j for j in range(tree.rstar) if j != tree.root]
    i = nodes[int(rng.integers(len(nodes)))]
    targets = _regraft_targets(tree, i)
    if not targets:
        return None
    target = targets[int(rng.integers(len(targets)))]
    new = tree.copy()
    new.regraft(i, target)
    back = _regraft_targets(new, i)
    return Proposal(new, state.mu, math.log(len(targets)) - math.log(len(back)), None)


def ridge_map(ages: np.ndarray, mu: float, rho: float, n_leaves: int) -> tuple:
    """Scale the internal node ages (``ages[L:-1]``) by ``rho`` and divide ``mu`` by it."""
    out = np.array(ages, dtype=float)
    out[n_leaves:-1] *= rho
    return out, mu / rho


def ridge_jacobian_log(rho: float, n_leaves: int) -> float:
    """log |d(ages', mu') / d(ages, mu)| when L-1 ages scale by rho and mu by 1/rho."""
    return (n_leaves - 2) * math.log(rho)


def move_ridge_scale(state: ChainState, rng: np.random.Generator,
                     tuning: Tuning = Tuning()) -> Proposal | None:
    """
    Scale every internal node age by rho ~ U(1/2, 2) and divide mu by rho.

    The Hastings term is the Jacobian ``rho^(L-2)`` times the density ratio
    of the reverse draw ``1/rho``: ``q(1/rho) |d(1/rho)/d rho| / q(rho) =
    rho^-2`` for a uniform draw.
    """
    tree = state.tree
    L = tree.n_leaves
    rho = rng.uniform(tuning.ridge_low, tuning.ridge_high)
    new = tree.copy()
    new.ages, mu = ridge_map(tree.ages, state.mu, rho, L)
    bl = new.ages[new.parent[:L]] - new.ages[:L]
    if (bl < 0).any():
        return None
    log_h = ridge_jacobian_log(rho, L) - 2.0 * math.log(rho)
    return Proposal(new, mu, log_h, None)


def move_mu(state: ChainState, rng: np.random.Generator,
            tuning: Tuning = Tuning()) -> Proposal | None:
    """Log-scale random walk on mu."""
    step = tuning.mu_window * (rng.random() - 0.5)
    return Proposal(state.tree, state.mu * math.exp(step), step, None)


_MOVE_FUNCS = {
    "node_age": move_node_age,
    "topology": move_topology,
    "ridge": move_ridge_scale,
    "mu": move_mu,
    "leaf_age": move_leaf_age,
}


class MoveSet:
    """Move weights, normalized over the moves that apply to the problem."""

    def __init__(self, weights: dict | None = None, tuning: Tuning = Tuning()):
        weights = dict(DEFAULT_WEIGHTS if weights is None else weights)
        unknown = set(weights) - set(MOVES)
        if unknown:
            raise ConfigurationError(f"unknown moves {sorted(unknown)}")
        self.weights = {k: float(v) for k, v in weights.items() if v > 0}
        self.tuning = tuning
        self._names = None
        self._cum = None

    def restrict(self, posterior: Posterior, n_leaves: int) -> "MoveSet":
        w = dict(self.weights)
        if posterior.model.mu is not None:
            w.pop("mu", None)
            w.pop("ridge", None)
        if n_leaves < 3:
            w.pop("topology", None)
        cal = posterior.cal
        if not any(iv.t_plus > iv.t_minus for iv in cal.leaf_ages.values()):
            w.pop("leaf_age", None)
        if not w:
            raise ConfigurationError("no applicable moves")
        out = MoveSet(w, self.tuning)
        return out

    def pick(self, rng: np.random.Generator) -> str:
        if self._names is None:
            self._names = list(self.weights)
            c = np.cumsum([self.weights[k] for k in self._names])
            self._cum = c / c[-1]
        return self._names[int(np.searchsorted(self._cum, rng.random(), side="right"))]


def mh_step(state: ChainState, moveset: MoveSet, rng: np.random.Generator) -> tuple:
    """
    One Metropolis-Hastings update.  Returns ``(state, move_name, accepted)``.
    """
    if not math.isfinite(state.log_post):
        raise InvariantError("current state has non-finite target density")
    name = moveset.pick(rng)
    prop = _MOVE_FUNCS[name](state, rng, moveset.tuning)
    if prop is None:
        return state, name, False
    new = state.posterior.state(prop.tree, prop.mu, state, prop.changed)
    if new is None:
        return state, name, False
    log_a = new.log_post - state.log_post + prop.log_hastings
    if log_a >= 0 or rng.random() < math.exp(log_a):
        return new, name, True
    return state, name, False


# -- initial state ---------------------------------------------------------


def _laminar_ok(merged: int, clade_masks) -> bool:
    for c in clade_masks:
        inter = merged & c
        if inter and inter != merged and inter != c:
            return False
    return True


def initial_tree(data: TraitMatrix, cal: CalibrationSet, prior: PriorConfig,
                 rng: np.random.Generator, mu: float | None = None) -> tuple:
    """
    Constraint-respecting average-linkage tree with ages scaled to the
    calibrations, then jittered.  Returns ``(tree, mu)``.
    """
    taxa = list(data.taxa)
    L = len(taxa)
    pres = data.presence.astype(float)
    shared = pres.T @ pres
    own = np.diag(shared)
    if data.n_traits:
        with np.errstate(divide="ignore", invalid="ignore"):
            excl = own[:, None] + own[None, :] - 2 * shared
            d = np.log1p(excl / (2 * shared))
        finite = d[np.isfinite(d)]
        cap = (finite.max() if finite.size else 1.0) + 1.0
        d = np.where(np.isfinite(d), d, cap)
    else:
        d = rng.uniform(0.5, 1.5, size=(L, L))
        d = (d + d.T) / 2
    np.fill_diagonal(d, 0.0)
    index = {t: k for k, t in enumerate(taxa)}
    cmasks = []
    for c in cal.clades:
        m = 0
        for t in c.taxa:
            m |= 1 << index[t]
        cmasks.append(m)

    clusters = {k: (1 << k, [k]) for k in range(L)}
    height = {k: 0.0 for k in range(L)}
    merges, hs = [], []
    nxt = L
    while len(clusters) > 1:
        best = None
        keys = list(clusters)
        for x in range(len(keys)):
            for y in range(x + 1, len(keys)):
                a, b = keys[x], keys[y]
                ma, la = clusters[a]
                mb, lb = clusters[b]
                if not _laminar_ok(ma | mb, cmasks):
                    continue
                dist = d[np.ix_(la, lb)].mean()
                if best is None or dist < best[0]:
                    best = (dist, a, b)
        if best is None:
            raise ConfigurationError("calibration clades overlap without nesting")
        dist, a, b = best
        ma, la = clusters.pop(a)
        mb, lb = clusters.pop(b)
        clusters[nxt] = (ma | mb, la + lb)
        height[nxt] = max(dist / 2, height[a], height[b])
        merges.append((a, b))
        hs.append(height[nxt])
        nxt += 1
    leaf_ages = np.array([sum(cal.leaf_interval(t)) / 2 for t in taxa])
    # placeholder ages, increasing with merge order, are replaced below
    tree = DatedTree.from_merges(taxa, merges, leaf_ages.max() + np.arange(1.0, L), leaf_ages)
    hs = np.array(hs)

    # rate that maps linkage heights (in mu-years) onto calibrated ages
    if mu is None:
        ratios = []
        for c in cal.clades:
            if c.lower is None and c.upper is None:
                continue
            target = (c.lower + c.upper) / 2 if c.lower is not None and c.upper is not None \
                else (c.lower * 1.2 if c.lower is not None else c.upper * 0.8)
            node = tree.mrca(c.taxa)
            if target > 0 and hs[node - L] > 0:
                ratios.append(hs[node - L] / target)
        if ratios:
            mu = float(np.median(ratios))
        elif data.n_traits and hs[-1] > 0:
            span = prior.T / 2 if prior.kind is TreePrior.UNIFORM_ROOT else 1000.0
            mu = float(hs[-1] / span)
        else:
            mu = 1e-3
        lo_mu, hi_mu = prior.mu_bounds
        mu = float(np.clip(mu, lo_mu * 10, hi_mu / 10))
    tree.ages[L:-1] = hs / mu
    tree = _project_ages(tree, cal, prior)
    ok, problems = admissible(tree, cal)
    if not ok:
        raise ConfigurationError("no admissible initial tree: " + "; ".join(problems))
    return tree, mu


def _project_ages(tree: DatedTree, cal: CalibrationSet, prior: PriorConfig) -> DatedTree:
    """Push node ages into the box implied by the calibrations, keeping order."""
    L = tree.n_leaves
    n = tree.n_nodes
    lo = np.zeros(n)
    hi = np.full(n, math.inf)
    for k, nm in enumerate(tree.names):
        lo[k], hi[k] = cal.leaf_interval(nm)
    for c in cal.clades:
        node = tree.mrca(c.taxa)
        if c.lower is not None:
            lo[node] = max(lo[node], c.lower)
        if c.upper is not None:
            hi[node] = min(hi[node], c.upper)
    if prior.kind is TreePrior.UNIFORM_ROOT:
        hi[tree.root] = min(hi[tree.root], prior.T * 0.999)
    post = tree.postorder()
    for i in post:  # lower limits flow up
        if i >= L:
            a, b = tree.children[i]
            lo[i] = max(lo[i], lo[a], lo[b])
    for i in reversed(post):  # upper limits flow down
        p = tree.parent[i]
        if p != tree.rstar:
            hi[i] = min(hi[i], hi[p])
    bad = np.flatnonzero(lo[:-1] > hi[:-1])
    if bad.size:
        names = [c.name for c in cal.clades if tree.mrca(c.taxa) in set(bad.tolist())]
        raise ConfigurationError(f"calibration bounds are infeasible near {names or bad.tolist()}")
    out = tree.copy()
    ages = out.ages
    for i in post:
        if i < L:
            ages[i] = min(max(ages[i], lo[i]), hi[i])
            continue
        a, b = tree.children[i]
        floor = max(ages[a], ages[b])
        room = hi[i] - floor
        eps = 1.0 if not math.isfinite(room) else 0.05 * room
        ages[i] = min(max(ages[i], floor + eps, lo[i]), hi[i])
    return out


# -- trace ---------------------------------------------------------------


@dataclass
class ChainTrace:
    """Recorded states of one chain plus per-move acceptance counts."""

    iteration: list = field(default_factory=list)
    log_post: list = field(default_factory=list)
    log_lkd: list = field(default_factory=list)
    log_prior: list = field(default_factory=list)
    mu: list = field(default_factory=list)
    t_root: list = field(default_factory=list)
    trees: list = field(default_factory=list)
    proposed: dict = field(default_factory=dict)
    accepted: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def record(self, it: int, s: ChainState) -> None:
        self.iteration.append(it)
        self.log_post.append(s.log_post)
        self.log_lkd.append(s.log_lkd)
        self.log_prior.append(s.log_prior)
        self.mu.append(s.mu)
        self.t_root.append(s.tree.root_age)
        self.trees.append(s.tree)

    def __len__(self):
        return len(self.iteration)

    def column(self, name: str) -> np.ndarray:
        return np.asarray(getattr(self, name), dtype=float)

    def acceptance_rates(self) -> dict:
        return {k: self.accepted.get(k, 0) / v for k, v in self.proposed.items() if v}

    def subsample(self, step: int) -> "ChainTrace":
        out = ChainTrace(meta=dict(self.meta), proposed=dict(self.proposed),
                         accepted=dict(self.accepted))
        for name in ("iteration", "log_post", "log_lkd", "log_prior", "mu", "t_root", "trees"):
            setattr(out, name, getattr(self, name)[::step])
        return out

    COLUMNS = ("iter", "log_post", "log_lkd", "mu", "t_root", "newick")

    def write_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for key, value in self.meta.items():
                fh.write(f"# {key}: {json.dumps(value, sort_keys=True)}\n")
            fh.write(f"# proposed: {json.dumps(self.proposed, sort_keys=True)}\n")
            fh.write(f"# accepted: {json.dumps(self.accepted, sort_keys=True)}\n")
            fh.write("\t".join(self.COLUMNS) + "\n")
            for k in range(len(self)):
                fh.write("\t".join([
                    str(self.iteration[k]), repr(self.log_post[k]), repr(self.log_lkd[k]),
                    repr(self.mu[k]), repr(self.t_root[k]), self.trees[k].to_newick(),
                ]) + "\n")

    @classmethod
    def read_tsv(cls, path) -> "ChainTrace":
        out = cls()
        header = None
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if line.startswith("#"):
                    key, _, value = line[1:].partition(":")
                    key = key.strip()
                    value = json.loads(value.strip())
                    if key in ("proposed", "accepted"):
                        setattr(out, key, value)
                    else:
                        out.meta[key] = value
                    continue
                if header is None:
                    header = line.split("\t")
                    if tuple(header) != cls.COLUMNS:
                        raise ValueError(f"unexpected trace columns {header}")
                    continue
                it, lp, ll, mu, tr, nwk = line.split("\t")
                out.iteration.append(int(it))
                out.log_post.append(float(lp))
                out.log_lkd.append(float(ll))
                out.log_prior.append(float(lp) - float(ll))
                out.mu.append(float(mu))
                out.t_root.append(float(tr))
                out.trees.append(DatedTree.from_newick(nwk, root_age=float(tr)))
        return out


def config_digest(*parts) -> str:
    blob = json.dumps([_jsonable(p) for p in parts], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _jsonable(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return {k: _jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, CalibrationSet):
        return {"clades": [(c.name, sorted(c.taxa), c.lower, c.upper) for c in obj.clades],
                "leaf_ages": {k: (v.t_minus, v.t_plus) for k, v in sorted(obj.leaf_ages.items())}}
    if hasattr(obj, "value"):
        return obj.value
    return obj


def run_chain(data: TraitMatrix, cal: CalibrationSet | None, model: ModelConfig,
              prior: PriorConfig, schedule: Schedule, seed: int,
              weights: dict | None = None, tuning: Tuning = Tuning(),
              init: tuple | None = None, check_every: int = 0,
              progress=None) -> ChainTrace:
    """
    Run one chain.  ``data`` with zero traits samples the prior.

    ``init`` optionally fixes the starting ``(tree, mu)``; ``check_every``
    > 0 compares cached densities with a fresh computation at that period.
    """
    cal = cal or CalibrationSet()
    rng = np.random.default_rng(seed)
    posterior = Posterior(data, cal, model, prior)
    burn, thin = schedule.resolved()
    if init is None:
        try:
            tree, mu = initial_tree(data, cal, prior, rng, model.mu)
        except TreeError as e:
            raise ConfigurationError(str(e)) from None
    else:
        tree, mu = init
    if model.mu is not None:
        mu = model.mu
    state = posterior.state(tree, mu)
    if state is None:
        ok, problems = admissible(tree, cal)
        raise ConfigurationError("initial state outside the support: " + ("; ".join(problems)
                                 or "zero prior or likelihood"))
    moves = MoveSet(weights, tuning).restrict(posterior, tree.n_leaves)
    # randomize the start with age-only moves that keep the state admissible
    for _ in range(10 * tree.n_leaves):
        prop = move_node_age(state, rng, tuning)
        if prop is not None:
            s2 = posterior.state(prop.tree, prop.mu, state, prop.changed)
            if s2 is not None:
                state = s2
    trace = ChainTrace(meta={
        "seed": seed,
        "config_digest": config_digest(model, prior, cal, schedule, tuning),
        "move_weights": moves.weights,
        "obs": model.obs.name,
        "taxa": list(data.taxa),
        "n_traits": data.n_traits,
    })
    trace.proposed = {k: 0 for k in moves.weights}
    trace.accepted = {k: 0 for k in moves.weights}
    for it in range(1, schedule.iterations + 1):
        state, name, ok = mh_step(state, moves, rng)
        trace.proposed[name] += 1
        trace.accepted[name] += ok
        if check_every and it % check_every == 0:
            fresh = posterior.recompute(state)
            if fresh is None or abs(fresh.log_post - state.log_post) > 1e-8:
                raise InvariantError(f"cached density drifted at iteration {it}")
        if it > burn and (it - burn) % thin == 0:
            trace.record(it, state)
        if progress is not None and it % 10_000 == 0:
            progress(it)
    return trace


# -- diagnostics -----------------------------------------------------------


def autocorrelation(x, max_lag: int | None = None) -> np.ndarray:
    """Sample autocorrelation by direct lagged products."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    y = x - x.mean()
    c0 = float(np.dot(y, y)) / n
    if max_lag is None:
        max_lag = n - 1
    if c0 == 0:
        return np.full(max_lag + 1, np.nan)
    return np.array([float(np.dot(y[: n - k], y[k:])) / n / c0 for k in range(max_lag + 1)])


def integrated_autocorrelation_time(x) -> float:
    """
    ``1 + 2 * sum(rho_k)`` truncated at the first non-positive sum of an
    adjacent lag pair (initial positive sequence).
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    y = x - x.mean()
    c0 = float(np.dot(y, y)) / n
    if c0 == 0:
        return math.nan
    total = 0.0
    k = 0
    while 2 * k + 1 < n:
        pair = (float(np.dot(y[: n - 2 * k], y[2 * k:])) + float(np.dot(y[: n - 2 * k - 1], y[2 * k + 1:]))) / n / c0
        if pair <= 0:
            break
        total += pair
        k += 1
    return max(-1.0 + 2.0 * total, 1.0 / n)


def diagnostics(trace: ChainTrace, n_lags: int = 50) -> dict:
    """ACF, integrated autocorrelation time and ESS for the monitored series."""
    report = {}
    for name in ("mu", "t_root", "log_prior", "log_lkd"):
        x = trace.column(name)
        n = len(x)
        entry = {"n": n, "reliable": n >= 100, "degenerate": False}
        if n < 2 or np.ptp(x) == 0:
            entry.update(degenerate=True, iact=math.nan, ess=math.nan, acf=[])
        else:
            tau = integrated_autocorrelation_time(x)
            entry.update(iact=tau, ess=n / tau, mean=float(x.mean()), sd=float(x.std(ddof=1)),
                         acf=autocorrelation(x, min(n_lags, n - 1)).tolist())
        report[name] = entry
    report["acceptance"] = trace.acceptance_rates()
    return report
