import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gfi.params import ResourceCapError, ValidationError
from gfi.rrt import (RecursiveTree, canonicalize, enumerate_classes, sample_split_size,
                     sample_uniform_rrt, split_at_edge, split_at_uniform_edge, split_size_fraction,
                     split_size_law)


@st.composite
def trees(draw, min_size=1, max_size=40):
    n = draw(st.integers(min_size, max_size))
    return RecursiveTree(tuple(draw(st.integers(1, k)) for k in range(1, n)))


def subtree_size(tree, child):
    """Brute-force descendant count of ``child`` by walking parent pointers."""
    parent = {k + 2: p for k, p in enumerate(tree.parents)}
    count = 0
    for v in range(1, tree.n + 1):
        w = v
        while w is not None and w != child:
            w = parent.get(w)
        count += w == child
    return count


def test_class_counts_are_factorials():
    for n in range(1, 8):
        classes = enumerate_classes(n)
        assert len(classes) == math.factorial(n - 1)
        assert len(set(classes)) == len(classes)


def test_enumeration_cap():
    with pytest.raises(ResourceCapError):
        enumerate_classes(10)


def test_invalid_parent_rejected():
    with pytest.raises(ValidationError):
        RecursiveTree((1, 3))
    with pytest.raises(ValidationError):
        RecursiveTree((0,))


def test_split_law_against_exhaustive_count():
    for n in range(2, 8):
        counts = {}
        for tree in enumerate_classes(n):
            for child in range(2, n + 1):
                j = subtree_size(tree, child)
                counts[j] = counts.get(j, 0) + 1
        total = math.factorial(n - 1) * (n - 1)
        for j in range(1, n):
            assert Fraction(counts[j], total) == split_size_fraction(n, j)


def test_split_law_sums_to_one():
    for n in range(2, 60):
        assert sum(split_size_fraction(n, j) for j in range(1, n)) == 1
    assert split_size_law(3, 1) == pytest.approx(0.75)


def test_split_law_rejects_bad_sizes():
    with pytest.raises(ValidationError):
        split_size_fraction(1, 1)
    with pytest.raises(ValidationError):
        split_size_fraction(5, 5)


@given(st.integers(2, 500), st.fractions(min_value=0, max_value=1).filter(lambda u: u > 0))
def test_sampler_is_inverse_tail(n, u):
    # P(J >= k) = (n - k) / (k (n - 1)); J is the largest k whose tail is >= u
    j = sample_split_size(n, float(Fraction(u)))
    u = Fraction(float(u))
    tail = lambda k: Fraction(n - k, k * (n - 1)) if k < n else Fraction(0)
    assert 1 <= j <= n - 1
    assert tail(j) >= u
    assert j == n - 1 or tail(j + 1) < u


def test_sampler_exact_boundaries():
    # u = 1 makes n/((n-1)u+1) = 1 exactly
    assert sample_split_size(7, 1.0) == 1
    # j = 2 boundary: u = (n/2 - 1)/(n - 1)
    assert sample_split_size(5, 0.375) == 2
    with pytest.raises(ValidationError):
        sample_split_size(5, 0.0)


@given(trees(min_size=2), st.data())
def test_split_partitions_vertices(tree, data):
    child = data.draw(st.integers(2, tree.n))
    out = split_at_edge(tree, child)
    assert out.root_part.n + out.detached_part.n == tree.n
    assert out.detached_size == subtree_size(tree, child)
    # both parts are valid recursive trees (the constructor validates)
    RecursiveTree(out.root_part.parents)
    RecursiveTree(out.detached_part.parents)


@given(trees(min_size=2, max_size=25), st.data())
def test_split_matches_canonicalized_components(tree, data):
    child = data.draw(st.integers(2, tree.n))
    parent = {1: None, **{k + 2: p for k, p in enumerate(tree.parents)}}
    inside = {v for v in parent if v == child or _descends(parent, v, child)}
    detached = {v: (parent[v] if v != child else None) for v in inside}
    root = {v: parent[v] for v in parent if v not in inside}
    out = split_at_edge(tree, child)
    assert out.detached_part == canonicalize(detached)
    assert out.root_part == canonicalize(root)


def _descends(parent, v, target):
    while v is not None:
        if v == target:
            return True
        v = parent[v]
    return False


@given(trees())
def test_dict_roundtrip(tree):
    assert RecursiveTree.from_dict(tree.to_dict()) == tree
    assert RecursiveTree.from_zero_based(tree.zero_based()) == tree


def test_expected_leaves_exhaustive():
    # E[leaves] of a uniform recursive tree is n/2 for n >= 2
    for n in range(2, 8):
        classes = enumerate_classes(n)
        mean = Fraction(sum(t.leaf_count() for t in classes), len(classes))
        assert mean == Fraction(n, 2)
    assert RecursiveTree(()).leaf_count() == 1


def test_uniform_sampler_hits_every_class():
    rng = np.random.default_rng(4)
    counts = {}
    for _ in range(24000):
        t = sample_uniform_rrt(5, rng)
        counts[t] = counts.get(t, 0) + 1
    assert len(counts) == 24
    stat = sum((c - 1000) ** 2 / 1000 for c in counts.values())
    assert stat < 50  # chi-square with 23 dof, p ~ 1e-3


def test_uniform_edge_split_size_law():
    rng = np.random.default_rng(11)
    n = 6
    sizes = np.zeros(n)
    for _ in range(20000):
        sizes[split_at_uniform_edge(sample_uniform_rrt(n, rng), rng).detached_size] += 1
    freq = sizes[1:] / sizes.sum()
    law = np.array([split_size_law(n, j) for j in range(1, n)])
    assert np.max(np.abs(freq - law)) < 0.015


def test_canonicalize_rank_relabels():
    tree = canonicalize({10: None, 20: 10, 30: 10, 35: 20})
    assert tree.parents == (1, 1, 2)
    with pytest.raises(ValidationError):
        canonicalize({1: None, 2: None})
