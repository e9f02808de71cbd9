"""Tree geometry, Ising parameters, boundary conditions and spin configurations.

Vertices of the b-ary tree of height h are numbered 0..n-1 in breadth-first order, so the
children of v are b*v+1 .. b*v+b and every subtree occupies one contiguous index range per
level.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

import numpy as np


def critical_beta(b: int) -> float:
    if b < 2:
        raise ValueError(f"branching factor must be >= 2, got {b!r}")
    x = 1.0 / math.sqrt(b)
    return 0.5 * math.log((1.0 + x) / (1.0 - x))


@dataclass(frozen=True)
class TreeShape:
    b: int
    h: int

    def __post_init__(self) -> None:
        if self.b < 2:
            raise ValueError(f"branching factor must be >= 2, got {self.b!r}")
        if self.h < 0:
            raise ValueError(f"height must be >= 0, got {self.h!r}")

    @property
    def n(self) -> int:
        return self.level_start(self.h + 1)

    @property
    def root(self) -> int:
        return 0

    def level_start(self, k: int) -> int:
        return (self.b**k - 1) // (self.b - 1)

    def level_size(self, k: int) -> int:
        return self.b**k

    def level_vertices(self, k: int) -> range:
        if not 0 <= k <= self.h:
            raise ValueError(f"level {k!r} outside 0..{self.h}")
        start = self.level_start(k)
        return range(start, start + self.b**k)

    @property
    def leaves(self) -> range:
        return self.level_vertices(self.h)

    @cached_property
    def levels(self) -> np.ndarray:
        out = np.empty(self.n, dtype=np.int64)
        for k in range(self.h + 1):
            r = self.level_vertices(k)
            out[r.start : r.stop] = k
        return out

    @cached_property
    def parents(self) -> np.ndarray:
        out = (np.arange(self.n, dtype=np.int64) - 1) // self.b
        out[0] = -1
        return out

    @cached_property
    def edges(self) -> tuple[tuple[int, int], ...]:
        """(parent, child) pairs, ordered by child index."""
        return tuple((int(self.parents[v]), v) for v in range(1, self.n))

    @cached_property
    def neighbor_lists(self) -> tuple[tuple[int, ...], ...]:
        return tuple(tuple(self.neighbors(v)) for v in range(self.n))

    def _check(self, v: int) -> None:
        if not 0 <= v < self.n:
            raise ValueError(f"vertex {v!r} outside 0..{self.n - 1}")

    def level(self, v: int) -> int:
        self._check(v)
        return int(self.levels[v])

    def parent(self, v: int) -> int | None:
        self._check(v)
        return None if v == 0 else (v - 1) // self.b

    def is_leaf(self, v: int) -> bool:
        return self.level(v) == self.h

    def child(self, v: int, i: int) -> int:
        if not 0 <= i < self.b:
            raise ValueError(f"child slot {i!r} outside 0..{self.b - 1}")
        if self.is_leaf(v):
            raise ValueError(f"vertex {v!r} is a leaf")
        return self.b * v + 1 + i

    def children(self, v: int) -> range:
        if self.is_leaf(v):
            return range(0)
        return range(self.b * v + 1, self.b * v + self.b + 1)

    def neighbors(self, v: int) -> list[int]:
        out = list(self.children(v))
        if v != 0:
            out.insert(0, (v - 1) // self.b)
        return out

    def descendants_at(self, v: int, depth: int) -> range:
        """Descendants of v exactly `depth` levels below it."""
        k = self.level(v)
        if depth < 0 or k + depth > self.h:
            raise ValueError(f"depth {depth!r} below vertex {v!r} leaves the tree")
        width = self.b**depth
        start = self.level_start(k + depth) + (v - self.level_start(k)) * width
        return range(start, start + width)

    def ball(self, v: int, k: int) -> list[int]:
        """Subtree of height k rooted at v, truncated at the leaves, in BFS order."""
        if k < 0:
            raise ValueError(f"ball height must be >= 0, got {k!r}")
        depth = min(k, self.h - self.level(v))
        out: list[int] = []
        for d in range(depth + 1):
            out.extend(self.descendants_at(v, d))
        return out

    def subtree(self, v: int) -> list[int]:
        return self.ball(v, self.h - self.level(v))

    def ancestors(self, v: int) -> list[int]:
        """Path from v up to the root, both included."""
        self._check(v)
        out = [v]
        while v != 0:
            v = (v - 1) // self.b
            out.append(v)
        return out

    def path_down(self, top: int, bottom: int) -> list[int]:
        path = self.ancestors(bottom)
        if top not in path:
            raise ValueError(f"vertex {bottom!r} is not a descendant of {top!r}")
        return path[: path.index(top) + 1][::-1]

    def meet(self, u: int, w: int) -> int:
        self._check(u)
        self._check(w)
        while self.levels[u] > self.levels[w]:
            u = (u - 1) // self.b
        while self.levels[w] > self.levels[u]:
            w = (w - 1) // self.b
        while u != w:
            u = (u - 1) // self.b
            w = (w - 1) // self.b
        return u

    def dist(self, u: int, w: int) -> int:
        m = self.meet(u, w)
        return int(self.levels[u] + self.levels[w] - 2 * self.levels[m])

    def leftmost_descendant(self, v: int, level: int) -> int:
        return self.descendants_at(v, level - self.level(v)).start


@dataclass(frozen=True)
class IsingParams:
    beta: float
    theta: float | None = None
    epsilon: float | None = None

    def __post_init__(self) -> None:
        if not math.isfinite(self.beta) or self.beta < 0:
            raise ValueError(f"beta must be finite and >= 0, got {self.beta!r}")
        theta = math.tanh(self.beta) if self.theta is None else float(self.theta)
        if not 0.0 <= theta < 1.0:
            raise ValueError(f"theta must lie in [0, 1), got {theta!r}")
        if abs(theta - math.tanh(self.beta)) > 1e-15:
            raise ValueError(f"theta {theta!r} inconsistent with beta {self.beta!r}")
        object.__setattr__(self, "theta", theta)

    @classmethod
    def critical(cls, b: int) -> IsingParams:
        beta = critical_beta(b)
        return cls(beta=beta, theta=math.tanh(beta), epsilon=0.0)

    @classmethod
    def near_critical(cls, b: int, epsilon: float) -> IsingParams:
        """theta = sqrt((1+epsilon)/b); theta is kept exactly and beta derived from it."""
        if epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {epsilon!r}")
        theta = math.sqrt((1.0 + epsilon) / b)
        if theta >= 1.0:
            raise ValueError(f"epsilon {epsilon!r} gives theta >= 1 for b={b!r}")
        beta = math.atanh(theta)
        if abs(math.tanh(beta) - theta) > 1e-15:
            theta = math.tanh(beta)
        return cls(beta=beta, theta=theta, epsilon=epsilon)


class BoundaryKind(str, Enum):
    FREE = "free"
    ALL_PLUS = "plus"
    ALL_MINUS = "minus"
    ARBITRARY = "tau"
    FROZEN = "frozen"


@dataclass(frozen=True)
class BoundaryCondition:
    kind: BoundaryKind = BoundaryKind.FREE
    spins: Mapping[int, int] = field(default_factory=dict)

    @classmethod
    def free(cls) -> BoundaryCondition:
        return cls(BoundaryKind.FREE)

    @classmethod
    def all_plus(cls) -> BoundaryCondition:
        return cls(BoundaryKind.ALL_PLUS)

    @classmethod
    def all_minus(cls) -> BoundaryCondition:
        return cls(BoundaryKind.ALL_MINUS)

    @classmethod
    def arbitrary(cls, shape: TreeShape, leaf_spins: Sequence[int] | Mapping[int, int]) -> (
        BoundaryCondition
    ):
        leaves = shape.leaves
        if isinstance(leaf_spins, Mapping):
            spins = {int(v): int(s) for v, s in leaf_spins.items()}
        else:
            if len(leaf_spins) != len(leaves):
                raise ValueError(
                    f"expected {len(leaves)} leaf spins, got {len(leaf_spins)}"
                )
            spins = {v: int(s) for v, s in zip(leaves, leaf_spins)}
        if set(spins) != set(leaves):
            raise ValueError("an arbitrary boundary must assign every leaf and only leaves")
        _check_spins(spins)
        return cls(BoundaryKind.ARBITRARY, spins)

    @classmethod
    def random_leaves(cls, shape: TreeShape, rng: np.random.Generator) -> BoundaryCondition:
        draws = rng.choice(np.array([-1, 1]), size=len(shape.leaves))
        return cls.arbitrary(shape, [int(s) for s in draws])

    @classmethod
    def frozen_set(cls, spins: Mapping[int, int]) -> BoundaryCondition:
        spins = {int(v): int(s) for v, s in spins.items()}
        _check_spins(spins)
        return cls(BoundaryKind.FROZEN, spins)

    def frozen_spins(self, shape: TreeShape) -> dict[int, int]:
        if self.kind is BoundaryKind.FREE:
            return {}
        if self.kind is BoundaryKind.ALL_PLUS:
            return {v: 1 for v in shape.leaves}
        if self.kind is BoundaryKind.ALL_MINUS:
            return {v: -1 for v in shape.leaves}
        for v in self.spins:
            shape._check(v)
        return dict(self.spins)

    def free_vertices(self, shape: TreeShape, support: Iterable[int] | None = None) -> list[int]:
        frozen = self.frozen_spins(shape)
        vertices = range(shape.n) if support is None else sorted(set(support))
        return [v for v in vertices if v not in frozen]

    def is_free(self) -> bool:
        return self.kind is BoundaryKind.FREE

    def flipped(self) -> BoundaryCondition:
        if self.kind is BoundaryKind.ALL_PLUS:
            return BoundaryCondition.all_minus()
        if self.kind is BoundaryKind.ALL_MINUS:
            return BoundaryCondition.all_plus()
        return BoundaryCondition(self.kind, {v: -s for v, s in self.spins.items()})

    def label(self) -> str:
        if self.kind is BoundaryKind.ARBITRARY:
            return "tau:" + "".join("+" if s > 0 else "-" for _, s in sorted(self.spins.items()))
        return self.kind.value


def _check_spins(spins: Mapping[int, int]) -> None:
    bad = {v: s for v, s in spins.items() if s not in (-1, 1)}
    if bad:
        raise ValueError(f"spins must be +1 or -1, got {bad!r}")


class SpinConfig:
    """A configuration sigma in {+1,-1}^V; bit v of the packed form is set iff sigma(v) = +1."""

    __slots__ = ("shape", "spins")

    def __init__(self, shape: TreeShape, spins: np.ndarray) -> None:
        spins = np.asarray(spins, dtype=np.int8)
        if spins.shape != (shape.n,):
            raise ValueError(f"expected {shape.n} spins, got shape {spins.shape!r}")
        if not np.all(np.abs(spins) == 1):
            raise ValueError("spins must be +1 or -1")
        self.shape = shape
        self.spins = spins

    @classmethod
    def constant(cls, shape: TreeShape, spin: int) -> SpinConfig:
        return cls(shape, np.full(shape.n, spin, dtype=np.int8))

    @classmethod
    def all_plus(cls, shape: TreeShape, boundary: BoundaryCondition | None = None) -> SpinConfig:
        return cls.constant(shape, 1).with_boundary(boundary)

    @classmethod
    def all_minus(cls, shape: TreeShape, boundary: BoundaryCondition | None = None) -> (
        SpinConfig
    ):
        return cls.constant(shape, -1).with_boundary(boundary)

    @classmethod
    def from_bits(cls, shape: TreeShape, bits: int) -> SpinConfig:
        raw = (bits >> np.arange(shape.n, dtype=object)) & 1
        return cls(shape, np.where(raw.astype(np.int64) == 1, 1, -1))

    def with_boundary(self, boundary: BoundaryCondition | None) -> SpinConfig:
        out = self.copy()
        if boundary is not None:
            for v, s in boundary.frozen_spins(self.shape).items():
                out.spins[v] = s
        return out

    def to_bits(self) -> int:
        return sum(1 << v for v in np.flatnonzero(self.spins == 1).tolist())

    def to_hex(self) -> str:
        width = (self.shape.n + 3) // 4
        return format(self.to_bits(), f"0{width}x")

    def copy(self) -> SpinConfig:
        return SpinConfig(self.shape, self.spins.copy())

    def flipped(self, v: int) -> SpinConfig:
        out = self.copy()
        out.spins[v] = -out.spins[v]
        return out

    def __getitem__(self, v: int) -> int:
        return int(self.spins[v])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SpinConfig):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.spins, other.spins))

    def __hash__(self) -> int:
        return hash((self.shape, self.to_bits()))

    def __le__(self, other: SpinConfig) -> bool:
        return bool(np.all(self.spins <= other.spins))

    def __repr__(self) -> str:
        return f"SpinConfig(b={self.shape.b}, h={self.shape.h}, hex={self.to_hex()})"
