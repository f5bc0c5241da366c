"""
Dated rooted binary trees.

A tree with ``L`` leaves is stored as parallel arrays over ``2L`` nodes:

  0 .. L-1      leaves (index order matches ``names``)
  L .. 2L-2     internal nodes, in no particular age order
  2L-1          the root-ancestor node, age ``+inf``, single child = root

Node identities are stable under age changes; topology edits only rewire
``parent`` / ``children``.  Ages are years before present.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

INF = math.inf


class TreeError(ValueError):
    """Malformed tree, unknown taxon, or bad calibration input."""


@dataclass(frozen=True)
class CladeConstraint:
    name: str
    taxa: frozenset
    lower: float | None = None
    upper: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "taxa", frozenset(self.taxa))
        if not self.taxa:
            raise TreeError(f"clade {self.name!r} has no taxa")
        if self.lower is not None and self.upper is not None and self.lower > self.upper:
            raise TreeError(f"clade {self.name!r}: lower bound {self.lower} > upper bound {self.upper}")


@dataclass(frozen=True)
class LeafAgeInterval:
    taxon: str
    t_minus: float
    t_plus: float

    def __post_init__(self):
        if not (0 <= self.t_minus <= self.t_plus < INF):
            raise TreeError(f"leaf {self.taxon!r}: bad age interval [{self.t_minus}, {self.t_plus}]")


@dataclass
class CalibrationSet:
    """Clade constraints plus leaf age intervals (leaves not listed sit at age 0)."""

    clades: list = field(default_factory=list)
    leaf_ages: dict = field(default_factory=dict)

    @property
    def is_empty(self) -> bool:
        return not self.clades and not self.leaf_ages

    @property
    def has_upper_bound(self) -> bool:
        return any(c.upper is not None for c in self.clades)

    def validate(self, names: Iterable[str]) -> None:
        known = set(names)
        for c in self.clades:
            missing = c.taxa - known
            if missing:
                raise TreeError(f"clade {c.name!r}: unknown taxa {sorted(missing)}")
        for taxon in self.leaf_ages:
            if taxon not in known:
                raise TreeError(f"leaf age given for unknown taxon {taxon!r}")

    def leaf_interval(self, name: str) -> tuple[float, float]:
        iv = self.leaf_ages.get(name)
        if iv is None:
            return 0.0, 0.0
        return iv.t_minus, iv.t_plus


class DatedTree:
    """
    Rooted binary tree with node ages and an explicit root-ancestor node.

    Parameters
    ----------
    names : sequence of str
        Leaf labels; leaf ``i`` is node ``i``.
    parent : int array [2L]
        Parent node id, -1 for the root-ancestor.
    children : int array [2L, 2]
        Child ids, -1 where absent.  The root-ancestor has one child.
    ages : float array [2L]
        Node ages; the root-ancestor entry is forced to ``inf``.
    """

    def __init__(self, names, parent, children, ages, check: bool = True):
        self.names = list(names)
        self.parent = np.asarray(parent, dtype=np.int64).copy()
        self.children = np.asarray(children, dtype=np.int64).copy()
        self.ages = np.asarray(ages, dtype=float).copy()
        self.ages[-1] = INF
        self._post = None
        self._masks = None
        self._memo = {}
        if check:
            self._check()

    # -- construction ---------------------------------------------------

    @classmethod
    def from_newick(cls, text: str, leaf_ages: Mapping[str, float] | None = None,
                    root_age: float | None = None) -> "DatedTree":
        """
        Parse a Newick string with branch lengths in years.

        Absolute ages need one anchor: ``root_age`` if given, else the
        ``leaf_ages`` table (averaged over leaves), else the youngest leaf
        is placed at age 0.
        """
        names, par, blen = _parse_newick(text)
        n = len(par)
        n_leaves = sum(1 for nm in names if nm is not None)
        if 2 * n_leaves - 1 != n:
            raise TreeError("Newick tree is not strictly binary")
        # relabel: leaves first (in order of appearance), internals after
        kids = [[] for _ in range(n)]
        for i, p in enumerate(par):
            if p >= 0:
                kids[p].append(i)
        leaf_ids = [i for i in range(n) if not kids[i]]
        int_ids = [i for i in range(n) if kids[i]]
        if any(len(kids[i]) != 2 for i in int_ids):
            raise TreeError("Newick tree is not strictly binary")
        order = leaf_ids + int_ids
        new_id = {old: k for k, old in enumerate(order)}
        L = len(leaf_ids)
        rstar = 2 * L - 1
        parent = np.full(2 * L, -1, dtype=np.int64)
        children = np.full((2 * L, 2), -1, dtype=np.int64)
        depth = np.zeros(2 * L)  # distance below the root
        for old in order:
            i = new_id[old]
            p = par[old]
            parent[i] = new_id[p] if p >= 0 else rstar
            if kids[old]:
                children[i] = [new_id[c] for c in kids[old]]
        root = [new_id[o] for o in order if par[o] < 0][0]
        children[rstar, 0] = root
        # depth below root by preorder walk
        stack = [root]
        while stack:
            i = stack.pop()
            for c in children[i]:
                if c >= 0:
                    depth[c] = depth[i] + blen[order[c]]
                    stack.append(c)
        leaf_names = [names[o] for o in leaf_ids]
        if len(set(leaf_names)) != L:
            raise TreeError("duplicate leaf names in Newick tree")
        if root_age is None:
            if leaf_ages:
                root_age = float(np.mean([leaf_ages.get(nm, 0.0) + depth[k]
                                          for k, nm in enumerate(leaf_names)]))
            else:
                root_age = float(depth[:L].max())
        ages = root_age - depth
        ages[rstar] = INF
        # exact leaf ages where supplied (absorbs rounding in branch lengths)
        if leaf_ages:
            for k, nm in enumerate(leaf_names):
                if nm in leaf_ages:
                    ages[k] = leaf_ages[nm]
        ages[:L] = np.where(np.abs(ages[:L]) < 1e-9 * max(root_age, 1.0), 0.0, ages[:L])
        return cls(leaf_names, parent, children, ages)

    @classmethod
    def from_merges(cls, names, merges, ages_internal, leaf_ages=None) -> "DatedTree":
        """
        Build from a merge list: ``merges[k] = (a, b)`` joins nodes a and b
        into node ``L + k``; the last merge is the root.
        """
        L = len(names)
        if len(merges) != L - 1:
            raise TreeError("need exactly L-1 merges")
        parent = np.full(2 * L, -1, dtype=np.int64)
        children = np.full((2 * L, 2), -1, dtype=np.int64)
        ages = np.zeros(2 * L)
        if leaf_ages is not None:
            ages[:L] = leaf_ages
        for k, (a, b) in enumerate(merges):
            node = L + k
            children[node] = (a, b)
            parent[a] = node
            parent[b] = node
            ages[node] = ages_internal[k]
        root = 2 * L - 2 if L > 1 else 0
        parent[root] = 2 * L - 1
        children[2 * L - 1, 0] = root
        return cls(names, parent, children, ages)

    def copy(self) -> "DatedTree":
        t = DatedTree.__new__(DatedTree)
        t.names = self.names
        t.parent = self.parent.copy()
        t.children = self.children.copy()
        t.ages = self.ages.copy()
        t._post = self._post
        t._masks = self._masks
        t._memo = self._memo   # topology-only quantities
        return t

    def _check(self) -> None:
        L = self.n_leaves
        if L < 2:
            raise TreeError("a tree needs at least two leaves")
        if self.parent.shape != (2 * L,) or self.children.shape != (2 * L, 2):
            raise TreeError("array shapes do not match leaf count")
        rstar = self.rstar
        if self.parent[rstar] != -1 or self.children[rstar, 1] != -1:
            raise TreeError("root-ancestor must have one child and no parent")
        for i in range(L):
            if (self.children[i] != -1).any():
                raise TreeError(f"leaf {self.names[i]!r} has children")
        for i in range(L, rstar):
            if (self.children[i] < 0).any():
                raise TreeError(f"internal node {i} is not binary")
        for i in range(rstar):
            p = self.parent[i]
            if p < 0 or i not in self.children[p]:
                raise TreeError(f"node {i} has inconsistent parent link")
        seen = self.postorder()
        if len(seen) != 2 * L - 1:
            raise TreeError("tree is not connected")
        finite = self.ages[:rstar]
        if not np.all(np.isfinite(finite)) or (finite < 0).any():
            raise TreeError("node ages must be finite and non-negative")
        for i in range(rstar):
            p = self.parent[i]
            if p != rstar and self.ages[i] > self.ages[p]:
                raise TreeError(f"node {i} is older than its parent")

    # -- structure ------------------------------------------------------

    @property
    def n_leaves(self) -> int:
        return len(self.names)

    @property
    def n_nodes(self) -> int:
        return 2 * len(self.names)

    @property
    def rstar(self) -> int:
        return 2 * len(self.names) - 1

    @property
    def root(self) -> int:
        return int(self.children[self.rstar, 0])

    @property
    def root_age(self) -> float:
        return float(self.ages[self.root])

    def is_leaf(self, i: int) -> bool:
        return i < self.n_leaves

    def leaf_index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise TreeError(f"unknown taxon {name!r}") from None

    def postorder(self) -> list:
        """Nodes below the root-ancestor, children before parents."""
        if self._post is None:
            out = []
            stack = [(self.root, False)]
            while stack:
                i, done = stack.pop()
                if done or i < self.n_leaves:
                    out.append(i)
                else:
                    stack.append((i, True))
                    stack.append((int(self.children[i, 1]), False))
                    stack.append((int(self.children[i, 0]), False))
            self._post = out
        return self._post

    def leaf_masks(self) -> list:
        """Bitmask of descendant leaves for each node (Python ints)."""
        if self._masks is None:
            masks = [0] * self.n_nodes
            for i in self.postorder():
                if i < self.n_leaves:
                    masks[i] = 1 << i
                else:
                    a, b = self.children[i]
                    masks[i] = masks[a] | masks[b]
            masks[self.rstar] = masks[self.root]
            self._masks = masks
        return self._masks

    def taxa_mask(self, taxa: Iterable[str]) -> int:
        m = 0
        for name in taxa:
            m |= 1 << self.leaf_index(name)
        if m == 0:
            raise TreeError("empty taxa set")
        return m

    def mask_names(self, mask: int) -> frozenset:
        return frozenset(nm for k, nm in enumerate(self.names) if mask >> k & 1)

    def ancestors(self, i: int) -> list:
        """Strict ancestors of ``i`` up to and including the root (not R*)."""
        out = []
        p = int(self.parent[i])
        while p != self.rstar and p >= 0:
            out.append(p)
            p = int(self.parent[p])
        return out

    def mrca_mask(self, mask: int) -> int:
        masks = self.leaf_masks()
        i = (mask & -mask).bit_length() - 1
        while masks[i] & mask != mask:
            i = int(self.parent[i])
        return i

    def mrca(self, taxa: Iterable[str]) -> int:
        """Deepest node ancestral to every named leaf."""
        return self.mrca_mask(self.taxa_mask(taxa))

    def is_clade(self, taxa: Iterable[str]) -> bool:
        m = self.taxa_mask(taxa)
        return self.leaf_masks()[self.mrca_mask(m)] == m

    def clade_masks(self) -> set:
        """Leaf masks of all internal nodes (non-trivial clades plus the full set)."""
        masks = self.leaf_masks()
        return {masks[i] for i in range(self.n_leaves, self.rstar)}

    def branch_lengths(self) -> np.ndarray:
        """Length of the edge above each node; inf for the root edge, nan for R*."""
        out = self.ages[self.parent[:-1]] - self.ages[:-1]
        return np.append(out, np.nan)

    def total_branch_length(self) -> float:
        """Sum of finite edge lengths (the root-ancestor edge excluded)."""
        bl = self.branch_lengths()[:-1]
        return float(bl[np.isfinite(bl)].sum())

    # -- edits (callers work on copies) --------------------------------

    def same_topology(self, other: "DatedTree") -> bool:
        """True when both trees have the same node wiring."""
        if self.names != other.names:
            return False
        return np.array_equal(self.children, other.children)

    def _invalidate(self):
        self._post = None
        self._masks = None
        self._memo = {}

    def regraft(self, i: int, target: int) -> None:
        """
        Prune the subtree at ``i`` (with its parent node) and reattach the
        parent node on the edge above ``target``.  The parent node keeps its
        age; the caller ensures the target edge spans that age.
        """
        p = int(self.parent[i])
        sib = int(self.children[p, 0] if self.children[p, 1] == i else self.children[p, 1])
        if target == sib or target == p:
            return
        gp = int(self.parent[p])
        # detach p: sibling takes p's place under gp
        self.children[gp][self.children[gp] == p] = sib
        self.parent[sib] = gp
        # insert p on edge target -> parent(target)
        tp = int(self.parent[target])
        self.children[tp][self.children[tp] == target] = p
        self.parent[p] = tp
        self.children[p] = (i, target)
        self.parent[target] = p
        self._invalidate()

    # -- serialization --------------------------------------------------

    def to_newick(self, annotations: Mapping[int, str] | None = None) -> str:
        """Newick with branch lengths in years; the root-ancestor edge is omitted."""

        def fmt(x):
            return repr(float(x))

        def rec(i):
            note = annotations.get(i, "") if annotations else ""
            if i < self.n_leaves:
                label = _quote(self.names[i])
            else:
                a, b = self.children[i]
                label = f"({rec(a)},{rec(b)})"
            if i == self.root:
                return label + note
            return f"{label}{note}:{fmt(self.ages[self.parent[i]] - self.ages[i])}"

        return rec(self.root) + ";"

    def topology_key(self) -> frozenset:
        """Hashable topology identifier (set of clade masks)."""
        return frozenset(self.clade_masks())

    def __repr__(self):
        return f"DatedTree({self.to_newick()})"


# -- calibration logic ------------------------------------------------


def admissible(tree: DatedTree, cal: CalibrationSet) -> tuple:
    """
    Check a tree against clade and leaf-age constraints.

    Returns ``(ok, violations)``; violations are human-readable strings.
    """
    problems = []
    masks = tree.leaf_masks()
    for c in cal.clades:
        m = tree.taxa_mask(c.taxa)
        node = tree.mrca_mask(m)
        if masks[node] != m:
            problems.append(f"topology: {c.name} is not a clade")
            continue
        age = tree.ages[node]
        if c.lower is not None and age < c.lower:
            problems.append(f"age: {c.name} MRCA age {age:g} below lower bound {c.lower:g}")
        if c.upper is not None and age > c.upper:
            problems.append(f"age: {c.name} MRCA age {age:g} above upper bound {c.upper:g}")
    for name, iv in cal.leaf_ages.items():
        t = tree.ages[tree.leaf_index(name)]
        if not iv.t_minus <= t <= iv.t_plus:
            problems.append(f"leaf: {name} age {t:g} outside [{iv.t_minus:g}, {iv.t_plus:g}]")
    return (not problems), problems


def min_attainable_ages(tree: DatedTree, cal: CalibrationSet) -> dict:
    """
    Free nodes and the smallest age each could take in an admissible tree.

    Free nodes are internal nodes other than the root that are not at or
    below the MRCA of an upper-bounded clade.  A node's minimum age is the
    largest of its descendant leaves' minimum ages and the lower bounds of
    constrained clades rooted at or below it.
    """
    L = tree.n_leaves
    floor = np.zeros(tree.n_nodes)
    for k, name in enumerate(tree.names):
        floor[k] = cal.leaf_interval(name)[0]
    capped = set()
    for c in cal.clades:
        node = tree.mrca(c.taxa)
        if c.lower is not None:
            floor[node] = max(floor[node], c.lower)
        if c.upper is not None:
            capped.add(node)
    below_cap = set()
    for node in capped:
        stack = [node]
        while stack:
            i = stack.pop()
            below_cap.add(i)
            if i >= L:
                stack.extend(int(c) for c in tree.children[i])
    s = np.zeros(tree.n_nodes)
    for i in tree.postorder():
        if i < L:
            s[i] = floor[i]
        else:
            a, b = tree.children[i]
            s[i] = max(floor[i], s[a], s[b])
    root = tree.root
    return {i: float(s[i]) for i in tree.postorder()
            if i >= L and i != root and i not in below_cap}


# -- Newick parsing ---------------------------------------------------

_TOKEN = re.compile(r"\s*('(?:[^']|'')*'|\[[^\]]*\]|[(),:;]|[^(),:;\[\]\s']+)")


def _quote(name: str) -> str:
    if re.fullmatch(r"[^(),:;\[\]\s']+", name):
        return name
    return "'" + name.replace("'", "''") + "'"


def _parse_newick(text: str):
    """Return (names or None per node, parent ids, branch lengths) in parse order."""
    tokens = [t for t in _TOKEN.findall(text.strip()) if not t.startswith("[")]
    names, parent, blen = [], [], []
    pos = 0

    def new(p):
        names.append(None)
        parent.append(p)
        blen.append(0.0)
        return len(parent) - 1

    def peek():
        return tokens[pos] if pos < len(tokens) else ";"

    def node(p):
        nonlocal pos
        me = new(p)
        if peek() == "(":
            pos += 1
            node(me)
            while peek() == ",":
                pos += 1
                node(me)
            if peek() != ")":
                raise TreeError(f"expected ')' in Newick at token {pos}")
            pos += 1
            if peek() not in (":", ",", ")", ";"):
                pos += 1  # internal label, ignored
        else:
            tok = peek()
            if tok in (":", ",", ")", ";", "("):
                raise TreeError(f"missing leaf name at token {pos}")
            names[me] = tok[1:-1].replace("''", "'") if tok.startswith("'") else tok
            pos += 1
        if peek() == ":":
            pos += 1
            try:
                blen[me] = float(tokens[pos])
            except (IndexError, ValueError):
                raise TreeError(f"bad branch length at token {pos}") from None
            pos += 1
        return me

    node(-1)
    if peek() != ";" or pos < len(tokens) - 1:
        raise TreeError("trailing characters after Newick tree")
    return names, parent, blen
