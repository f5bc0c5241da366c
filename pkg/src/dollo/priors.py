"""Tree priors, leaf-age priors and the death-rate hyperprior."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .tree import CalibrationSet, DatedTree, min_attainable_ages


class TreePrior(enum.Enum):
    BRANCHING = "branching"      # Yule-type branching process, rate integrated out
    UNIFORM_ROOT = "uniform-root"

    @classmethod
    def parse(cls, value) -> "TreePrior":
        if isinstance(value, cls):
            return value
        v = str(value).lower()
        aliases = {"fg": cls.BRANCHING, "f_g": cls.BRANCHING, "fr": cls.UNIFORM_ROOT,
                   "f_r": cls.UNIFORM_ROOT, "uniform": cls.UNIFORM_ROOT}
        return aliases.get(v) or cls(v)


@dataclass(frozen=True)
class PriorConfig:
    """
    Prior choices.  ``mu_prior`` is ``"scale"`` (density 1/mu on
    ``mu_bounds``) or ``"uniform"`` on ``mu_bounds``.
    """

    kind: TreePrior = TreePrior.UNIFORM_ROOT
    T: float = 16000.0
    mu_prior: str = "scale"
    mu_bounds: tuple = (1e-8, 1e2)

    def __post_init__(self):
        object.__setattr__(self, "kind", TreePrior.parse(self.kind))
        if self.kind is TreePrior.UNIFORM_ROOT and not self.T > 0:
            raise ValueError("root age limit T must be positive")
        lo, hi = self.mu_bounds
        if not 0 <= lo < hi:
            raise ValueError(f"bad death-rate prior bounds {self.mu_bounds}")
        if self.mu_prior not in ("scale", "uniform"):
            raise ValueError(f"unknown death-rate prior {self.mu_prior!r}")
        if self.mu_prior == "scale" and lo <= 0:
            raise ValueError("1/mu prior needs a positive lower bound")


def log_fG_marginal_theta(tree: DatedTree) -> float:
    """
    Branching-process prior with the rate integrated against 1/theta:
    ``log Gamma(L-1) - (L-1) log |g|``.
    """
    L = tree.n_leaves
    if L < 2:
        raise ValueError("need at least two leaves")
    g = tree.total_branch_length()
    if not g > 0:
        raise ValueError("total branch length must be positive")
    return float(gammaln(L - 1) - (L - 1) * math.log(g))


def log_fR(tree: DatedTree, cal: CalibrationSet | None, T: float) -> float:
    """
    Uniform-root-age prior, unnormalized.

    Each free node contributes ``-log(t_root - s_i)`` where ``s_i`` is the
    node's minimum attainable age; ``-inf`` outside ``t_root < T``.
    """
    t_root = tree.root_age
    if not t_root < T:
        return -math.inf
    gaps = t_root - _free_floors(tree, cal or CalibrationSet())
    if (gaps <= 0).any():
        return -math.inf
    return -float(np.log(gaps).sum())


def _free_floors(tree: DatedTree, cal: CalibrationSet) -> np.ndarray:
    # depends on topology and calibrations only, so it is memoized per topology
    # (the entry holds ``cal`` itself so its id cannot be recycled)
    hit = tree._memo.get(("free_floors", id(cal)))
    if hit is not None and hit[0] is cal:
        return hit[1]
    out = np.fromiter(min_attainable_ages(tree, cal).values(), dtype=float)
    tree._memo[("free_floors", id(cal))] = (cal, out)
    return out


def log_leaf_age_prior(tree: DatedTree, cal: CalibrationSet | None) -> float:
    """0 when every leaf sits inside its interval (age 0 when none given), else -inf."""
    cal = cal or CalibrationSet()
    for k, name in enumerate(tree.names):
        lo, hi = cal.leaf_interval(name)
        if not lo <= tree.ages[k] <= hi:
            return -math.inf
    return 0.0


def log_mu_prior(mu: float, prior: PriorConfig) -> float:
    lo, hi = prior.mu_bounds
    if not lo <= mu <= hi:
        return -math.inf
    if prior.mu_prior == "scale":
        return -math.log(mu)
    return 0.0


def log_tree_prior(tree: DatedTree, cal: CalibrationSet | None, prior: PriorConfig) -> float:
    if prior.kind is TreePrior.BRANCHING:
        return log_fG_marginal_theta(tree)
    return log_fR(tree, cal, prior.T)
