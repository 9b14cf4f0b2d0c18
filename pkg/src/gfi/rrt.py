"""Random recursive trees.

A recursive tree on vertices 1..n is stored as its parent array: vertex i
(for i >= 2) points to a parent with a smaller index. Equivalence classes of
increasingly labelled trees are in bijection with these arrays, so there are
(n-1)! of them. Edges are identified with their child vertex.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Hashable, Iterator, Mapping, Optional

from ._random import RngLike, as_stream
from .params import ResourceCapError, ValidationError

ENUMERATION_CAP = 9


@dataclass(frozen=True)
class RecursiveTree:
    """Canonical recursive tree; ``parents[k]`` is the parent of vertex k+2."""

    parents: tuple = ()

    def __post_init__(self):
        parents = tuple(int(p) for p in self.parents)
        for k, p in enumerate(parents):
            if not 1 <= p <= k + 1:
                raise ValidationError(
                    f"vertex {k + 2} has parent {p}; parents must satisfy 1 <= p < child")
        object.__setattr__(self, "parents", parents)

    @classmethod
    def _trusted(cls, parents: tuple) -> "RecursiveTree":
        tree = object.__new__(cls)
        object.__setattr__(tree, "parents", parents)
        return tree

    @classmethod
    def from_zero_based(cls, par: list) -> "RecursiveTree":
        """Build from a 0-based array with ``par[0] == -1``."""
        return cls._trusted(tuple(p + 1 for p in par[1:]))

    @property
    def n(self) -> int:
        return len(self.parents) + 1

    def __len__(self) -> int:
        return self.n

    def zero_based(self) -> list:
        return [-1] + [p - 1 for p in self.parents]

    def child_counts(self) -> list:
        counts = [0] * self.n
        for p in self.parents:
            counts[p - 1] += 1
        return counts

    def leaf_count(self) -> int:
        return sum(1 for c in self.child_counts() if c == 0)

    def depth(self) -> int:
        depth = [0] * self.n
        for k, p in enumerate(self.parents):
            depth[k + 1] = depth[p - 1] + 1
        return max(depth)

    def to_dict(self) -> dict:
        return {"n": self.n, "parents": list(self.parents)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: Mapping) -> "RecursiveTree":
        tree = cls(tuple(data["parents"]))
        if "n" in data and int(data["n"]) != tree.n:
            raise ValidationError(f"declared size {data['n']} but {tree.n} vertices given")
        return tree


SINGLE_VERTEX = RecursiveTree(())


@dataclass(frozen=True)
class SplitOutcome:
    root_part: RecursiveTree
    detached_part: RecursiveTree

    @property
    def detached_size(self) -> int:
        return self.detached_part.n


def _check_size(n) -> int:
    if isinstance(n, bool) or int(n) != n:
        raise ValidationError(f"tree size must be an integer, got {n!r}")
    n = int(n)
    if n < 1:
        raise ValidationError(f"tree size must be positive, got {n}")
    return n


def sample_uniform_rrt(n: int, rng: RngLike = None) -> RecursiveTree:
    """Uniform recursive tree: vertex k+1 attaches to a uniform vertex in 1..k."""
    n = _check_size(n)
    stream = as_stream(rng)
    return RecursiveTree._trusted(tuple(stream.below(k) + 1 for k in range(1, n)))


def enumerate_classes(n: int, cap: int = ENUMERATION_CAP) -> list:
    """All (n-1)! recursive trees of size n, lexicographic in the parent array."""
    n = _check_size(n)
    if n > cap:
        raise ResourceCapError(
            f"enumeration of size {n} exceeds cap {cap} ({math.factorial(n - 1)} classes)")
    ranges = [range(1, k + 1) for k in range(1, n)]
    return [RecursiveTree._trusted(p) for p in itertools.product(*ranges)]


def iter_classes_jsonl(n: int, cap: int = ENUMERATION_CAP) -> Iterator[str]:
    for tree in enumerate_classes(n, cap):
        yield tree.to_json()


def split_size_law(n: int, j: int) -> float:
    """Probability that removing a uniform edge detaches a subtree of size j."""
    return float(split_size_fraction(n, j))


def split_size_fraction(n: int, j: int) -> Fraction:
    n = _check_size(n)
    if n < 2:
        raise ValidationError("a tree of size 1 has no edge to remove")
    if isinstance(j, bool) or int(j) != j or not 1 <= j <= n - 1:
        raise ValidationError(f"detached size must lie in 1..{n - 1}, got {j}")
    j = int(j)
    return Fraction(n, (n - 1) * j * (j + 1))


def sample_split_size(n: int, u: float) -> int:
    """Detached size ``floor(n / ((n-1) u + 1))`` for u in (0, 1].

    The float evaluation is settled with exact rational arithmetic whenever
    it falls within rounding distance of an integer, so the result always
    equals the inverse CDF of the split law.
    """
    if n < 2:
        raise ValidationError("a tree of size 1 has no edge to remove")
    if not 0.0 < u <= 1.0:
        raise ValidationError(f"u must lie in (0, 1], got {u}")
    x = n / ((n - 1) * u + 1.0)
    j = int(x)
    frac = x - j
    if frac < 1e-9 * x or 1.0 - frac < 1e-9 * x:
        j = int(Fraction(n) // ((n - 1) * Fraction(u) + 1))
    return min(max(j, 1), n - 1)


def _split_lists(par: list, child: int):
    """Cut the edge above ``child`` in a 0-based parent array.

    Returns (root indices, detached indices, root parents, detached parents);
    both parent arrays are 0-based and rank-relabelled.
    """
    n = len(par)
    inside = [False] * n
    inside[child] = True
    for i in range(child + 1, n):
        if inside[par[i]]:
            inside[i] = True
    new = [0] * n
    root_idx = []
    det_idx = []
    for i in range(n):
        if inside[i]:
            new[i] = len(det_idx)
            det_idx.append(i)
        else:
            new[i] = len(root_idx)
            root_idx.append(i)
    root_par = [-1] + [new[par[i]] for i in root_idx[1:]]
    det_par = [-1] + [new[par[i]] for i in det_idx[1:]]
    return root_idx, det_idx, root_par, det_par


def split_at_edge(tree: RecursiveTree, child: int) -> SplitOutcome:
    """Remove the edge between vertex ``child`` (1-based, >= 2) and its parent."""
    if tree.n < 2:
        raise ValidationError("a tree of size 1 has no edge to remove")
    if not 2 <= child <= tree.n:
        raise ValidationError(f"edge child must lie in 2..{tree.n}, got {child}")
    _, _, root_par, det_par = _split_lists(tree.zero_based(), child - 1)
    return SplitOutcome(RecursiveTree.from_zero_based(root_par),
                        RecursiveTree.from_zero_based(det_par))


def split_at_uniform_edge(tree: RecursiveTree, rng: RngLike = None) -> SplitOutcome:
    if tree.n < 2:
        raise ValidationError("a tree of size 1 has no edge to remove")
    stream = as_stream(rng)
    return split_at_edge(tree, 2 + stream.below(tree.n - 1))


def canonicalize(tree) -> RecursiveTree:
    """Rank-relabel a tree on an arbitrary ordered label set.

    ``tree`` is either a :class:`RecursiveTree` (returned unchanged) or a
    mapping from each label to its parent label, with ``None`` for the root.
    Every parent label must be smaller than its child's.
    """
    if isinstance(tree, RecursiveTree):
        return tree
    if not isinstance(tree, Mapping) or not tree:
        raise ValidationError("expected a non-empty mapping label -> parent label")
    labels = sorted(tree)
    roots = [v for v in labels if tree[v] is None]
    if len(roots) != 1:
        raise ValidationError(f"expected exactly one root, found {len(roots)}")
    rank = {label: i for i, label in enumerate(labels)}
    parents = []
    for label in labels[1:]:
        parent: Optional[Hashable] = tree[label]
        if parent is None:
            raise ValidationError(f"label {label!r} is a second root")
        if parent not in rank:
            raise ValidationError(f"parent {parent!r} of {label!r} is not a vertex")
        if not parent < label:
            raise ValidationError(
                f"not a recursive tree: parent {parent!r} is not smaller than child {label!r}")
        parents.append(rank[parent] + 1)
    return RecursiveTree._trusted(tuple(parents))
