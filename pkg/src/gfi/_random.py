"""Seed derivation and a buffered uniform stream for tight event loops."""

from __future__ import annotations

import math
from typing import Union

import numpy as np

RngLike = Union[np.random.Generator, "UniformStream", int, None]

_BUFFER = 4096


def derive_seed_sequence(master: int, *key: int) -> np.random.SeedSequence:
    """Counter-based child seed: replica ``i`` of ``master`` is ``(master, i)``.

    Implemented with ``SeedSequence(master, spawn_key=key)`` so that the
    i-th child does not depend on how many other children were drawn.
    """
    return np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in key))


def replica_rng(master: int, index: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed_sequence(master, index))


class UniformStream:
    """Uniform variates served from a numpy generator in blocks.

    Calling ``Generator.random()`` once per event costs far more than the
    event itself; buffering keeps runs reproducible while cutting that
    overhead. Values lie in [0, 1).
    """

    __slots__ = ("generator", "_buf", "_pos", "_block")

    def __init__(self, generator: np.random.Generator):
        self.generator = generator
        self._buf: list = []
        self._pos = 0
        self._block = 64  # doubles up to _BUFFER so short runs stay cheap

    def random(self) -> float:
        pos = self._pos
        if pos >= len(self._buf):
            self._buf = self.generator.random(self._block).tolist()
            self._block = min(2 * self._block, _BUFFER)
            pos = 0
        self._pos = pos + 1
        return self._buf[pos]

    def positive(self) -> float:
        """Uniform on (0, 1]."""
        return 1.0 - self.random()

    def exponential(self, rate: float) -> float:
        return -math.log(1.0 - self.random()) / rate

    def below(self, n: int) -> int:
        """Uniform integer in 0..n-1."""
        k = int(self.random() * n)
        return k if k < n else n - 1


def as_stream(rng: RngLike) -> UniformStream:
    if isinstance(rng, UniformStream):
        return rng
    if isinstance(rng, np.random.Generator):
        return UniformStream(rng)
    if rng is None or isinstance(rng, (int, np.integer)):
        return UniformStream(np.random.default_rng(rng))
    raise TypeError(f"cannot build a random stream from {type(rng).__name__}")


def as_generator(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, UniformStream):
        return rng.generator
    if rng is None or isinstance(rng, (int, np.integer)):
        return np.random.default_rng(rng)
    raise TypeError(f"cannot build a generator from {type(rng).__name__}")
