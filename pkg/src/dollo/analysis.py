"""Posterior summaries and posterior predictive checks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .likelihood import ObservationModel, TraitMatrix, expected_births_integral
from .mcmc import ChainTrace, ConfigurationError, integrated_autocorrelation_time
from .simulate import simulate_presence
from .tree import DatedTree


def singleton_counts(data: TraitMatrix) -> np.ndarray:
    """Number of traits displayed only at each taxon (``data.taxa`` order)."""
    single = data.presence[data.sizes == 1]
    return single.sum(axis=0).astype(int)


def frequency_spectrum(data: TraitMatrix) -> np.ndarray:
    """``out[n - 1]`` = number of traits displayed at exactly ``n`` taxa."""
    L = len(data.taxa)
    return np.bincount(data.sizes, minlength=L + 1)[1:L + 1].astype(int)


@dataclass
class PredictiveReport:
    """Observed statistics beside their posterior predictive distribution."""

    taxa: list
    reps: int
    singletons: np.ndarray           # observed X_i
    singletons_pred: np.ndarray      # [reps, L] predicted X~_i
    spectrum: np.ndarray             # observed Y^(n), n = 1..L
    spectrum_pred: np.ndarray        # [reps, L]
    min_occupancy: int = 1           # smallest n the fitted data can show
    meta: dict = field(default_factory=dict)

    @staticmethod
    def _summary(pred):
        return {
            "mean": pred.mean(axis=0),
            "sd": pred.std(axis=0, ddof=1) if len(pred) > 1 else np.zeros(pred.shape[1]),
            "q025": np.percentile(pred, 2.5, axis=0),
            "q975": np.percentile(pred, 97.5, axis=0),
        }

    def singleton_summary(self) -> dict:
        return self._summary(self.singletons_pred)

    def spectrum_summary(self) -> dict:
        return self._summary(self.spectrum_pred)

    def singleton_inside(self) -> np.ndarray:
        """Per taxon: observed count inside the central 95% predictive interval."""
        s = self.singleton_summary()
        return (self.singletons >= s["q025"]) & (self.singletons <= s["q975"])

    def spectrum_flags(self) -> np.ndarray:
        """Occupancies ``n`` whose observed count lies outside mean +/- 2 sd."""
        s = self.spectrum_summary()
        n = np.arange(1, len(self.spectrum) + 1)
        outside = np.abs(s["mean"] - self.spectrum) > 2 * s["sd"]
        return n[outside & (n >= self.min_occupancy)]

    def rows(self):
        """Yield (section, key, observed, mean, sd, q025, q975, flag) tuples."""
        s = self.singleton_summary()
        inside = self.singleton_inside()
        for k, name in enumerate(self.taxa):
            yield ("singletons", name, int(self.singletons[k]), s["mean"][k], s["sd"][k],
                   s["q025"][k], s["q975"][k], not inside[k])
        s = self.spectrum_summary()
        flagged = set(self.spectrum_flags().tolist())
        for k in range(len(self.spectrum)):
            n = k + 1
            yield ("spectrum", str(n), int(self.spectrum[k]), s["mean"][k], s["sd"][k],
                   s["q025"][k], s["q975"][k], n in flagged)

    def to_tsv(self) -> str:
        lines = ["section\tkey\tobserved\tpred_mean\tpred_sd\tpred_q025\tpred_q975\tflag"]
        for sec, key, obs, m, sd, lo, hi, flag in self.rows():
            lines.append(f"{sec}\t{key}\t{obs}\t{m:.6g}\t{sd:.6g}\t{lo:.6g}\t{hi:.6g}\t{int(flag)}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        out = [f"posterior predictive check, {self.reps} replicates"]
        width = max(len(str(t)) for t in self.taxa + ["n"])
        for sec, key, obs, m, sd, lo, hi, flag in self.rows():
            out.append(f"{sec:<10} {key:<{width}} obs {obs:>6}  pred {m:9.2f} +/- {sd:7.2f}"
                       f"  [{lo:7.1f}, {hi:7.1f}]{'  *' if flag else ''}")
        return "\n".join(out) + "\n"


def posterior_predictive(trace: ChainTrace, data: TraitMatrix, obs: ObservationModel,
                         reps: int = 1000, seed: int = 0) -> PredictiveReport:
    """
    Replicate data sets from the posterior.  Each replicate takes a recorded
    (tree, mu), draws lambda from its Gamma posterior conditional (shape N,
    rate I / mu, with I the expected-births edge sum under ``obs``) and
    simulates NOABSENT data on that tree.
    """
    obs = ObservationModel.parse(obs)
    if not len(trace):
        raise ConfigurationError("empty trace")
    traced = trace.meta.get("obs")
    if traced is not None and traced != obs.name:
        raise ConfigurationError(f"trace was fitted under {traced}, not {obs.name}")
    if set(trace.trees[0].names) != set(data.taxa):
        raise ConfigurationError("trace and data have different taxa")
    rng = np.random.default_rng(seed)
    N = data.n_traits
    L = len(data.taxa)
    xs = np.zeros((reps, L), dtype=int)
    ys = np.zeros((reps, L), dtype=int)
    perms = {}
    for r in range(reps):
        k = int(rng.integers(len(trace)))
        tree, mu = trace.trees[k], trace.mu[k]
        I = expected_births_integral(tree, mu, obs)
        lam = rng.gamma(N, mu / I)
        pres = simulate_presence(tree, lam, mu, rng)
        key = tuple(tree.names)
        if key not in perms:
            perms[key] = [tree.names.index(t) for t in data.taxa]
        pres = pres[:, perms[key]]
        sizes = pres.sum(axis=1)
        xs[r] = pres[sizes == 1].sum(axis=0)
        ys[r] = np.bincount(sizes, minlength=L + 1)[1:L + 1]
    return PredictiveReport(list(data.taxa), reps, singleton_counts(data), xs,
                            frequency_spectrum(data), ys, min_occupancy=int(obs) + 1,
                            meta={"seed": seed, "obs": obs.name})


# -- clade summaries ---------------------------------------------------------


def _trees(trace_or_trees):
    return trace_or_trees.trees if isinstance(trace_or_trees, ChainTrace) else list(trace_or_trees)


def _mc_se(x: np.ndarray) -> float:
    if len(x) < 2 or np.ptp(x) == 0:
        return 0.0
    tau = integrated_autocorrelation_time(x)
    return float(x.std(ddof=1) * math.sqrt(tau / len(x)))


def clade_support(trace_or_trees, taxa) -> tuple:
    """Fraction of sampled trees in which ``taxa`` is a clade, with its Monte Carlo SE."""
    trees = _trees(trace_or_trees)
    hits = np.array([t.is_clade(taxa) for t in trees], dtype=float)
    return float(hits.mean()), _mc_se(hits)


def clade_mrca_ages(trace_or_trees, taxa) -> np.ndarray:
    return np.array([t.ages[t.mrca(taxa)] for t in _trees(trace_or_trees)])


def clade_mrca_mean_age(trace_or_trees, taxa) -> dict:
    """
    Posterior mean age of the MRCA of ``taxa`` over all sampled trees,
    whether or not the taxa form a clade in a given sample.
    """
    ages = clade_mrca_ages(trace_or_trees, taxa)
    return {"mean": float(ages.mean()), "se": _mc_se(ages),
            "q025": float(np.percentile(ages, 2.5)), "q975": float(np.percentile(ages, 97.5))}


def _canonical_clades(tree: DatedTree, index: dict) -> dict:
    """Internal-node clades as name-order bitmasks mapped to node ages."""
    bits = [1 << index[nm] for nm in tree.names]
    masks = [0] * tree.n_nodes
    out = {}
    for i in tree.postorder():
        if tree.is_leaf(i):
            masks[i] = bits[i]
        else:
            a, b = tree.children[i]
            masks[i] = masks[a] | masks[b]
            out[masks[i]] = float(tree.ages[i])
    return out


@dataclass
class ConsensusTree:
    """
    Majority-rule summary: a possibly multifurcating tree of the clades
    above the support threshold.  Not a state of the sampler.
    """

    taxa: list
    support: dict            # clade mask -> support
    mean_age: dict           # clade mask -> mean MRCA age over trees containing it
    leaf_age: dict           # taxon -> mean age

    def clades(self) -> list:
        return sorted(self.support, key=lambda m: (bin(m).count("1"), m))

    def taxa_of(self, mask: int) -> frozenset:
        return frozenset(t for k, t in enumerate(self.taxa) if mask >> k & 1)

    def children(self) -> dict:
        """Clade mask -> list of child items (clade masks or taxon names)."""
        order = self.clades()
        parent = {}
        for k, m in enumerate(order):
            for big in order[k + 1:]:
                if big & m == m and big != m:
                    parent[m] = big
                    break
        kids = {m: [] for m in order}
        for m, p in parent.items():
            kids[p].append(m)
        for m in order:
            covered = 0
            for c in kids[m]:
                covered |= c
            for k, t in enumerate(self.taxa):
                if (m >> k & 1) and not (covered >> k & 1):
                    kids[m].append(t)
        return kids

    def to_newick(self) -> str:
        kids = self.children()
        root = max(self.support, key=lambda m: bin(m).count("1"))

        def age(item):
            return self.leaf_age[item] if isinstance(item, str) else self.mean_age[item]

        def rec(item, parent_age):
            bl = "" if parent_age is None else f":{max(parent_age - age(item), 0.0)!r}"
            if isinstance(item, str):
                return item + bl
            inner = ",".join(rec(c, age(item)) for c in kids[item])
            note = f"[&support={self.support[item]:.4f},age={self.mean_age[item]:.6g}]"
            return f"({inner}){note}{bl}"

        return rec(root, None) + ";"


def majority_consensus(trace_or_trees, threshold: float = 0.5) -> ConsensusTree:
    """Clades present in more than ``threshold`` of the sampled trees."""
    if not threshold >= 0.5:
        raise ValueError("threshold below 1/2 does not guarantee compatible clades")
    trees = _trees(trace_or_trees)
    if not trees:
        raise ValueError("no trees to summarize")
    taxa = sorted(trees[0].names)
    index = {t: k for k, t in enumerate(taxa)}
    counts, age_sum = {}, {}
    leaf_sum = np.zeros(len(taxa))
    for t in trees:
        for m, a in _canonical_clades(t, index).items():
            counts[m] = counts.get(m, 0) + 1
            age_sum[m] = age_sum.get(m, 0.0) + a
        for k, nm in enumerate(t.names):
            leaf_sum[index[nm]] += t.ages[k]
    n = len(trees)
    full = (1 << len(taxa)) - 1
    support = {m: c / n for m, c in counts.items() if c / n > threshold or m == full}
    mean_age = {m: age_sum[m] / counts[m] for m in support}
    leaf_age = {t: float(leaf_sum[k] / n) for t, k in index.items()}
    return ConsensusTree(taxa, support, mean_age, leaf_age)
