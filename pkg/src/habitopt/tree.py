"""Finite event trees, random variables on them, and conditional expectation.

The probabilistic backbone: a finite filtered space is encoded as a sequence of
nested partitions of a fixed set of terminal leaves.  All stochastic objects in
the package (prices, dividends, endowments, consumption plans) are arrays of
per-atom values attached to a level of such a tree.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BadProbability, LevelMismatch, NonNested

__all__ = [
    "EventTree",
    "RandomVariable",
    "AdaptedProcess",
    "build_tree",
    "condexp",
    "lift",
    "inner",
    "expect",
]

_PROB_TOL = 1e-12


@dataclass(frozen=True)
class EventTree:
    """Nested partitions of a finite leaf set with leaf probabilities.

    Parameters
    ----------
    levels : tuple of tuple of tuple of int
        ``levels[k]`` lists the atoms of the level-``k`` partition, each atom a
        sorted tuple of leaf indices.  Level 0 is the single full atom and
        level ``T`` consists of singletons, one per leaf, in leaf order.
    probs : numpy.ndarray
        Strictly positive leaf probabilities summing to one (normalized on
        construction when the raw sum is within 1e-12 of one).

    Notes
    -----
    Instances are immutable; derived lookup tables (atom probabilities,
    leaf-to-atom maps, parent links) are computed once in ``build_tree``.
    Construct trees through :func:`build_tree`, which validates nesting.
    """

    levels: tuple[tuple[tuple[int, ...], ...], ...]
    probs: np.ndarray
    leaf_to_atom: tuple[np.ndarray, ...] = field(repr=False)
    atom_probs: tuple[np.ndarray, ...] = field(repr=False)
    parent: tuple[np.ndarray, ...] = field(repr=False)

    @property
    def T(self) -> int:
        return len(self.levels) - 1

    @property
    def n_leaves(self) -> int:
        return self.probs.shape[0]

    def n_atoms(self, k: int) -> int:
        return len(self.levels[k])

    def atom_leaves(self, k: int, a: int) -> np.ndarray:
        return np.asarray(self.levels[k][a], dtype=int)

    def children(self, k: int, a: int) -> np.ndarray:
        """Indices of the level-``k+1`` atoms contained in atom ``a`` of level ``k``."""
        if k >= self.T:
            raise LevelMismatch(f"level {k} has no children on a depth-{self.T} tree")
        return np.flatnonzero(self.parent[k + 1] == a)

    def to_json(self) -> dict:
        return {
            "T": self.T,
            "levels": [[list(atom) for atom in lvl] for lvl in self.levels],
            "probs": [float(p) for p in self.probs],
        }

    @staticmethod
    def from_json(obj: dict) -> "EventTree":
        return build_tree(obj["levels"], obj["probs"])


def build_tree(levels, probs) -> EventTree:
    """Validate nested partitions and leaf probabilities and assemble an EventTree.

    Raises
    ------
    NonNested
        If any level is not a partition of the leaf set, level 0 is not the
        full atom, level T is not the leaf singletons, or some atom fails to
        sit inside a single parent atom.
    BadProbability
        If probabilities are non-finite, not strictly positive, or their sum
        is farther than 1e-12 from one.
    """
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise BadProbability("probs must be a non-empty 1-d array")
    if not np.all(np.isfinite(p)):
        raise BadProbability("probs contains non-finite entries")
    if np.any(p <= 0):
        bad = int(np.argmin(p))
        raise BadProbability(f"leaf {bad} has non-positive probability {p[bad]:g}")
    total = float(p.sum())
    if abs(total - 1.0) > _PROB_TOL:
        raise BadProbability(f"probs sum to {total!r}, not 1 within {_PROB_TOL:g}")
    if abs(total - 1.0) > 4.0 * np.finfo(float).eps:
        # skip at ulp level so that rebuilding a tree from its own
        # probabilities reproduces them bit for bit
        p = p / total

    n = p.size
    lvls = tuple(tuple(tuple(sorted(int(i) for i in atom)) for atom in lvl) for lvl in levels)
    if len(lvls) < 1:
        raise NonNested("a tree needs at least the trivial level 0")

    leaf_to_atom = []
    for k, lvl in enumerate(lvls):
        seen = np.full(n, -1, dtype=int)
        for a, atom in enumerate(lvl):
            for i in atom:
                if not (0 <= i < n):
                    raise NonNested(f"level {k} atom {a} references leaf {i} outside 0..{n - 1}")
                if seen[i] != -1:
                    raise NonNested(f"leaf {i} appears in two atoms at level {k}")
                seen[i] = a
        if np.any(seen == -1):
            missing = int(np.flatnonzero(seen == -1)[0])
            raise NonNested(f"leaf {missing} is missing from level {k}")
        leaf_to_atom.append(seen)

    if len(lvls[0]) != 1:
        raise NonNested("level 0 must consist of a single atom")
    if len(lvls[-1]) != n or any(len(atom) != 1 for atom in lvls[-1]):
        raise NonNested("the terminal level must list each leaf as its own atom")
    if any(lvls[-1][i][0] != i for i in range(n)):
        raise NonNested("terminal atoms must appear in leaf order")

    parent = [np.zeros(1, dtype=int)]
    for k in range(1, len(lvls)):
        par = np.empty(len(lvls[k]), dtype=int)
        for a, atom in enumerate(lvls[k]):
            owners = {int(leaf_to_atom[k - 1][i]) for i in atom}
            if len(owners) != 1:
                raise NonNested(
                    f"atom {a} at level {k} straddles {len(owners)} atoms of level {k - 1}"
                )
            par[a] = owners.pop()
        parent.append(par)

    atom_probs = tuple(
        np.array([p[list(atom)].sum() for atom in lvl]) for lvl in lvls
    )
    p.setflags(write=False)
    for arr in atom_probs:
        arr.setflags(write=False)
    return EventTree(
        levels=lvls,
        probs=p,
        leaf_to_atom=tuple(leaf_to_atom),
        atom_probs=atom_probs,
        parent=tuple(parent),
    )


@dataclass(frozen=True)
class RandomVariable:
    """A level-``k`` measurable quantity: one value per atom of the level-``k`` partition."""

    tree: EventTree
    level: int
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if not (0 <= self.level <= self.tree.T):
            raise LevelMismatch(f"level {self.level} outside 0..{self.tree.T}")
        if v.shape != (self.tree.n_atoms(self.level),):
            raise LevelMismatch(
                f"level {self.level} has {self.tree.n_atoms(self.level)} atoms, "
                f"got {v.shape[0] if v.ndim == 1 else v.shape} values"
            )
        object.__setattr__(self, "values", v)

    def leaf_values(self) -> np.ndarray:
        return self.values[self.tree.leaf_to_atom[self.level]]

    def _coerce(self, other):
        if isinstance(other, RandomVariable):
            if other.tree is not self.tree:
                raise LevelMismatch("random variables live on different trees")
            k = max(self.level, other.level)
            return lift(self, k).values, lift(other, k).values, k
        return self.values, float(other), self.level

    def __add__(self, other):
        a, b, k = self._coerce(other)
        return RandomVariable(self.tree, k, a + b)

    __radd__ = __add__

    def __sub__(self, other):
        a, b, k = self._coerce(other)
        return RandomVariable(self.tree, k, a - b)

    def __rsub__(self, other):
        a, b, k = self._coerce(other)
        return RandomVariable(self.tree, k, b - a)

    def __mul__(self, other):
        a, b, k = self._coerce(other)
        return RandomVariable(self.tree, k, a * b)

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b, k = self._coerce(other)
        return RandomVariable(self.tree, k, a / b)

    def __neg__(self):
        return RandomVariable(self.tree, self.level, -self.values)


class AdaptedProcess:
    """A time-indexed family ``X_0, ..., X_T`` with ``X_k`` measurable at level ``k``."""

    def __init__(self, tree: EventTree, per_level_values):
        if len(per_level_values) != tree.T + 1:
            raise LevelMismatch(
                f"expected {tree.T + 1} levels of values, got {len(per_level_values)}"
            )
        self.tree = tree
        self.vars = tuple(
            x if isinstance(x, RandomVariable) else RandomVariable(tree, k, np.asarray(x, float))
            for k, x in enumerate(per_level_values)
        )
        for k, x in enumerate(self.vars):
            if x.level != k:
                raise LevelMismatch(f"process entry {k} is attached to level {x.level}")

    def __getitem__(self, k: int) -> RandomVariable:
        return self.vars[k]

    def __len__(self) -> int:
        return len(self.vars)

    def values(self, k: int) -> np.ndarray:
        return self.vars[k].values


def lift(x: RandomVariable, k: int) -> RandomVariable:
    """Re-express a coarse random variable on the finer level-``k`` partition."""
    if k < x.level:
        raise LevelMismatch(f"cannot lift from level {x.level} down to level {k}")
    if k == x.level:
        return x
    t = x.tree
    leaf_vals = x.values[t.leaf_to_atom[x.level]]
    rep = np.array([leaf_vals[t.levels[k][a][0]] for a in range(t.n_atoms(k))])
    return RandomVariable(t, k, rep)


def condexp(x: RandomVariable, k: int) -> RandomVariable:
    """Conditional expectation of ``x`` given the level-``k`` partition.

    Coarsening only: ``k`` must not exceed the level of ``x`` (use :func:`lift`
    for the measurable-inclusion direction).
    """
    if k > x.level:
        raise LevelMismatch(
            f"conditional expectation onto level {k} needs level <= {x.level}"
        )
    t = x.tree
    leaf_vals = x.values[t.leaf_to_atom[x.level]]
    num = np.bincount(t.leaf_to_atom[k], weights=t.probs * leaf_vals, minlength=t.n_atoms(k))
    return RandomVariable(t, k, num / t.atom_probs[k])


def expect(x: RandomVariable) -> float:
    """Unconditional expectation."""
    return float(np.dot(x.tree.probs, x.leaf_values()))


def inner(x: RandomVariable, y: RandomVariable) -> float:
    """The pairing ``E[X Y]`` used throughout the pricing algebra."""
    if x.tree is not y.tree:
        raise LevelMismatch("random variables live on different trees")
    return float(np.dot(x.tree.probs, x.leaf_values() * y.leaf_values()))
