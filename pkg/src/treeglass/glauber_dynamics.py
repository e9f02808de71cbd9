"""Glauber-type chains on the tree as step functions over spin configurations.

Every chain here is a block dynamics: a target block is picked uniformly from a fixed list and
its spins are redrawn from the Gibbs conditional given all other spins. Single-site heat bath
is the case of singleton blocks. Randomness enters only through one uniform per vertex, and a
spin is set to +1 iff its uniform falls below the conditional probability of +1, which makes
every update monotone under shared uniforms.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse

from src.logging_config import logger

from .errors import SizeGuardError
from .gibbs_engine import (
    FieldLike,
    GibbsTable,
    boundary_fields,
    conditional_resample_matrix,
    exact_gibbs,
    f_func,
    field_value,
)
from .settings import settings
from .tree_model import BoundaryCondition, IsingParams, SpinConfig, TreeShape


def resample_block(
    spins: np.ndarray,
    block: Iterable[int],
    shape: TreeShape,
    params: IsingParams,
    uniforms: np.ndarray,
    *,
    frozen: Mapping[int, int] | None = None,
    support: frozenset[int] | None = None,
    field: FieldLike = None,
    root: int | None = None,
) -> np.ndarray:
    """Redraw ``block`` from its Gibbs conditional on the forest it induces.

    Each component is rooted at ``root`` when it contains it, else at its topmost vertex. An
    upward pass collects log-odds x_u = 2 h_u + sum f(x_child), where h_u is the field from
    spins outside the block; a downward pass then samples the root with P(+) = (1 + tanh(x/2))/2
    and each child with P(+) = (1 + tanh(beta s_parent + x/2))/2.
    """
    frozen = frozen or {}
    members = {int(v) for v in block} - set(frozen)
    if support is not None and not members <= support:
        raise ValueError(f"block leaves the support: {sorted(members - support)!r}")
    out = spins.copy()
    beta, theta = params.beta, params.theta

    def neighbors(u: int) -> list[int]:
        nbrs = shape.neighbor_lists[u]
        return [y for y in nbrs if support is None or y in support]

    unvisited = set(members)
    while unvisited:
        start = root if root is not None and root in unvisited else min(unvisited)
        order = [start]
        up: dict[int, int | None] = {start: None}
        unvisited.discard(start)
        for u in order:
            for y in neighbors(u):
                if y in unvisited:
                    unvisited.discard(y)
                    up[y] = u
                    order.append(y)
        x: dict[int, float] = {}
        for u in reversed(order):
            h = field_value(field, u) + beta * sum(
                int(out[y]) for y in neighbors(u) if y not in members
            )
            x[u] = 2.0 * h + math.fsum(
                f_func(x[y], theta) for y in neighbors(u) if up.get(y) == u and y in x
            )
        for u in order:
            parent = up[u]
            drift = x[u] / 2.0 if parent is None else beta * int(out[parent]) + x[u] / 2.0
            out[u] = 1 if uniforms[u] < 0.5 * (1.0 + math.tanh(drift)) else -1
    return out


def heat_bath_step(
    config: SpinConfig,
    site: int,
    boundary: BoundaryCondition | None,
    params: IsingParams,
    u: float,
    field: float = 0.0,
    support: Iterable[int] | None = None,
) -> SpinConfig:
    """New spin at ``site`` is +1 iff u < (1 + tanh(beta S + field)) / 2, S the neighbour sum."""
    shape = config.shape
    frozen = boundary.frozen_spins(shape) if boundary is not None else {}
    if site in frozen:
        raise ValueError(f"site {site!r} is frozen by the boundary")
    inside = None if support is None else set(support)
    s = sum(
        int(config.spins[y])
        for y in shape.neighbor_lists[site]
        if inside is None or y in inside
    )
    out = config.copy()
    out.spins[site] = 1 if u < 0.5 * (1.0 + math.tanh(params.beta * s + field)) else -1
    return out


def block_update(
    config: SpinConfig,
    block: Iterable[int],
    boundary: BoundaryCondition | None,
    params: IsingParams,
    rng: np.random.Generator,
    root: int | None = None,
) -> SpinConfig:
    shape = config.shape
    frozen = boundary.frozen_spins(shape) if boundary is not None else {}
    uniforms = rng.random(shape.n)
    spins = resample_block(config.spins, block, shape, params, uniforms, frozen=frozen, root=root)
    return SpinConfig(shape, spins)


@dataclass(frozen=True)
class BlockCover:
    blocks: tuple[tuple[int, ...], ...]
    ell: int | None = None
    r: int | None = None

    def __post_init__(self) -> None:
        if not self.blocks:
            raise ValueError("a block cover needs at least one block")

    def __len__(self) -> int:
        return len(self.blocks)

    def multiplicities(self, n: int) -> np.ndarray:
        out = np.zeros(n, dtype=np.int64)
        for block in self.blocks:
            out[list(block)] += 1
        return out

    def max_multiplicity(self, n: int) -> int:
        return int(self.multiplicities(n).max())

    def covers(self, vertices: Iterable[int]) -> bool:
        union = set().union(*map(set, self.blocks))
        return set(vertices) <= union

    @classmethod
    def singletons(cls, vertices: Iterable[int]) -> BlockCover:
        return cls(tuple((int(v),) for v in vertices))


def block_levels(h: int, alpha: float) -> tuple[int, int]:
    """ell = floor(alpha h) and r = h - ell, with 0 < alpha <= 1/2."""
    if not 0.0 < alpha <= 0.5:
        raise ValueError(f"alpha must lie in (0, 1/2], got {alpha!r}")
    ell = math.floor(alpha * h + 1e-9)
    if ell < 1:
        raise ValueError(f"height {h!r} too small for alpha {alpha!r}: need h >= 1/alpha")
    return ell, h - ell


def block_cover_from_levels(shape: TreeShape, ell: int) -> BlockCover:
    r = shape.h - ell
    if not 1 <= ell <= r:
        raise ValueError(f"need 1 <= ell <= h - ell, got ell={ell!r}, h={shape.h!r}")
    blocks = [tuple(shape.ball(0, r))]
    blocks.extend(tuple(shape.ball(v, r)) for v in shape.level_vertices(ell))
    return BlockCover(tuple(blocks), ell=ell, r=r)


def level_block_cover(shape: TreeShape, alpha: float) -> BlockCover:
    """The distinguished block ball(root, r) plus ball(v, r) for every v on level ell."""
    ell, _ = block_levels(shape.h, alpha)
    return block_cover_from_levels(shape, ell)


@dataclass(frozen=True)
class SpeedupSpec:
    """Levels ell < r and one chosen level-r descendant w_v per level-ell vertex v."""

    shape: TreeShape
    ell: int
    r: int
    chosen: tuple[int, ...]

    def __post_init__(self) -> None:
        if not 0 <= self.ell < self.r <= self.shape.h:
            raise ValueError(
                f"need 0 <= ell < r <= h, got ell={self.ell!r}, r={self.r!r}, h={self.shape.h!r}"
            )
        tops = list(self.shape.level_vertices(self.ell))
        if len(self.chosen) != len(tops):
            raise ValueError(f"expected {len(tops)} chosen descendants, got {len(self.chosen)}")
        for v, w in zip(tops, self.chosen):
            if w not in self.shape.descendants_at(v, self.r - self.ell):
                raise ValueError(f"{w!r} is not a level-{self.r} descendant of {v!r}")

    @classmethod
    def leftmost(cls, shape: TreeShape, ell: int, r: int) -> SpeedupSpec:
        if not 0 <= ell < r <= shape.h:
            raise ValueError(f"need 0 <= ell < r <= h, got ell={ell!r}, r={r!r}, h={shape.h!r}")
        chosen = tuple(shape.leftmost_descendant(v, r) for v in shape.level_vertices(ell))
        return cls(shape, ell, r, chosen)

    @cached_property
    def owners(self) -> dict[int, int]:
        """w_v -> v."""
        return dict(zip(self.chosen, self.shape.level_vertices(self.ell)))

    @property
    def W(self) -> frozenset[int]:
        return frozenset(self.chosen)

    @cached_property
    def blocks(self) -> dict[int, tuple[int, ...]]:
        """w_v -> B_v = (T_v minus T_{w_v}) plus w_v."""
        out = {}
        for w, v in self.owners.items():
            below_w = set(self.shape.subtree(w))
            out[w] = tuple(u for u in self.shape.subtree(v) if u == w or u not in below_w)
        return out

    @cached_property
    def paths(self) -> dict[int, tuple[int, ...]]:
        """w_v -> L_v, the path from v down to w_v."""
        return {w: tuple(self.shape.path_down(v, w)) for w, v in self.owners.items()}

    @cached_property
    def forest(self) -> frozenset[int]:
        out: set[int] = set()
        for w in self.chosen:
            out.update(self.paths[w])
            out.update(self.shape.subtree(w))
        return frozenset(out)

    @cached_property
    def subforest(self) -> frozenset[int]:
        out: set[int] = set()
        for w in self.chosen:
            out.update(self.shape.subtree(w))
        return frozenset(out)


@dataclass(frozen=True)
class BlockDynamics:
    """Pick one of ``targets`` uniformly and redraw it from the Gibbs conditional."""

    shape: TreeShape
    params: IsingParams
    boundary: BoundaryCondition
    targets: tuple[tuple[int, ...], ...]
    roots: tuple[int | None, ...] | None = None
    support: frozenset[int] | None = None
    label: str = "block"

    @classmethod
    def single_site(
        cls,
        shape: TreeShape,
        params: IsingParams,
        boundary: BoundaryCondition | None = None,
    ) -> BlockDynamics:
        boundary = boundary or BoundaryCondition.free()
        free = boundary.free_vertices(shape)
        return cls(shape, params, boundary, tuple((v,) for v in free), label="single_site")

    @classmethod
    def from_cover(
        cls,
        cover: BlockCover,
        shape: TreeShape,
        params: IsingParams,
        boundary: BoundaryCondition | None = None,
    ) -> BlockDynamics:
        boundary = boundary or BoundaryCondition.free()
        frozen = boundary.frozen_spins(shape)
        targets = tuple(tuple(v for v in block if v not in frozen) for block in cover.blocks)
        return cls(shape, params, boundary, targets, label="block")

    @classmethod
    def speedup(cls, spec: SpeedupSpec, params: IsingParams) -> BlockDynamics:
        targets = []
        roots = []
        for u in range(spec.shape.n):
            if u in spec.W:
                targets.append(spec.blocks[u])
                roots.append(u)
            else:
                targets.append((u,))
                roots.append(None)
        return cls(
            spec.shape,
            params,
            BoundaryCondition.free(),
            tuple(targets),
            roots=tuple(roots),
            label="speedup",
        )

    @property
    def rate(self) -> int:
        """Number of targets; the continuous-time chain rings each at rate 1."""
        return len(self.targets)

    @cached_property
    def frozen(self) -> dict[int, int]:
        return self.boundary.frozen_spins(self.shape)

    def start(self, spin: int = 1) -> SpinConfig:
        return SpinConfig.constant(self.shape, spin).with_boundary(self.boundary)

    def step_with(self, config: SpinConfig, target: int, uniforms: np.ndarray) -> SpinConfig:
        root = self.roots[target] if self.roots is not None else None
        spins = resample_block(
            config.spins,
            self.targets[target],
            self.shape,
            self.params,
            uniforms,
            frozen=self.frozen,
            support=self.support,
            root=root,
        )
        return SpinConfig(self.shape, spins)

    def step(self, config: SpinConfig, rng: np.random.Generator) -> SpinConfig:
        target = int(rng.integers(self.rate))
        return self.step_with(config, target, rng.random(self.shape.n))

    def gibbs(self) -> GibbsTable:
        return exact_gibbs(
            self.shape,
            self.params,
            self.boundary,
            support=self.support,
            max_free=settings.max_kernel_free,
        )

    def target_matrices(self, table: GibbsTable | None = None) -> list[sparse.csr_matrix]:
        table = table or self.gibbs()
        cache: dict[tuple[int, ...], sparse.csr_matrix] = {}
        out = []
        for target in self.targets:
            key = tuple(sorted(target))
            if key not in cache:
                cache[key] = conditional_resample_matrix(table, target)
            out.append(cache[key])
        return out


def speedup_step(
    config: SpinConfig, spec: SpeedupSpec, params: IsingParams, rng: np.random.Generator
) -> SpinConfig:
    """Uniform site u; heat bath at u unless u = w_v, in which case B_v is redrawn."""
    return BlockDynamics.speedup(spec, params).step(config, rng)


def grand_coupling_step(
    configs: Sequence[SpinConfig],
    dynamics: BlockDynamics,
    target: int,
    uniforms: np.ndarray,
) -> list[SpinConfig]:
    """Apply the same target and uniforms to every configuration."""
    return [dynamics.step_with(c, target, uniforms) for c in configs]


def coalescence_steps(
    dynamics: BlockDynamics, rng: np.random.Generator, max_steps: int
) -> int | None:
    """Steps until the chains from all-plus and all-minus meet under the grand coupling."""
    top, bottom = dynamics.start(1), dynamics.start(-1)
    for step in range(1, max_steps + 1):
        target = int(rng.integers(dynamics.rate))
        top, bottom = grand_coupling_step([top, bottom], dynamics, target, rng.random(top.shape.n))
        if top == bottom:
            return step
    return None


@dataclass(frozen=True)
class Schedule:
    """Ordered update targets; ``slots`` index the randomness each update consumes."""

    targets: tuple[tuple[int, ...], ...]
    slots: tuple[int, ...] = ()
    times: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if not self.slots:
            object.__setattr__(self, "slots", tuple(range(len(self.targets))))
        if len(self.slots) != len(self.targets):
            raise ValueError("one randomness slot per target is required")
        if self.times and len(self.times) != len(self.targets):
            raise ValueError("one time per target is required")

    def __len__(self) -> int:
        return len(self.targets)

    @classmethod
    def sites(cls, sites: Iterable[int]) -> Schedule:
        return cls(tuple((int(v),) for v in sites))

    @classmethod
    def random_sites(
        cls, vertices: Sequence[int], length: int, rng: np.random.Generator
    ) -> Schedule:
        picks = rng.integers(len(vertices), size=length)
        return cls.sites(vertices[i] for i in picks)

    @classmethod
    def poisson(
        cls, targets: Sequence[tuple[int, ...]], t: float, rng: np.random.Generator
    ) -> Schedule:
        """Continuous-time clocks of rate 1 per target up to time t."""
        count = int(rng.poisson(len(targets) * t))
        times = np.sort(rng.uniform(0.0, t, size=count))
        picks = rng.integers(len(targets), size=count)
        return cls(tuple(targets[i] for i in picks), times=tuple(float(s) for s in times))

    def censored(self, censor_mask: Sequence[bool]) -> Schedule:
        """Subsequence dropping every update whose mask entry is True."""
        if len(censor_mask) != len(self.targets):
            raise ValueError("censor mask must match the schedule length")
        keep = [i for i, c in enumerate(censor_mask) if not c]
        return Schedule(
            tuple(self.targets[i] for i in keep),
            tuple(self.slots[i] for i in keep),
            tuple(self.times[i] for i in keep) if self.times else (),
        )


def run_schedule(
    config: SpinConfig,
    schedule: Schedule,
    boundary: BoundaryCondition | None,
    params: IsingParams,
    uniforms: np.ndarray,
) -> SpinConfig:
    """Sampled run; ``uniforms[slot]`` holds the per-vertex uniforms of that slot."""
    shape = config.shape
    frozen = boundary.frozen_spins(shape) if boundary is not None else {}
    spins = config.spins
    for target, slot in zip(schedule.targets, schedule.slots):
        spins = resample_block(spins, target, shape, params, uniforms[slot], frozen=frozen)
    return SpinConfig(shape, spins)


def censored_run(
    shape: TreeShape,
    params: IsingParams,
    boundary: BoundaryCondition,
    schedule: Schedule,
    censor_mask: Sequence[bool] | None = None,
    start: SpinConfig | None = None,
    table: GibbsTable | None = None,
) -> np.ndarray:
    """Exact law after the (censored) schedule, started from the top configuration."""
    top = SpinConfig.all_plus(shape, boundary)
    if start is not None and start != top:
        raise ValueError("censored runs must start from the all-plus configuration")
    if censor_mask is not None:
        schedule = schedule.censored(censor_mask)
    if table is None:
        table = exact_gibbs(shape, params, boundary, max_free=settings.max_kernel_free)
    dist = np.zeros(table.space.size)
    dist[table.space.index_of(top)] = 1.0
    cache: dict[tuple[int, ...], sparse.csr_matrix] = {}
    for target in schedule.targets:
        key = tuple(sorted(target))
        if key not in cache:
            cache[key] = conditional_resample_matrix(table, target)
        dist = cache[key].T @ dist
    return dist


def run_discrete(
    dynamics: BlockDynamics,
    config: SpinConfig,
    steps: int,
    rng: np.random.Generator,
    record_every: int | None = None,
) -> tuple[SpinConfig, list[str]]:
    """Run ``steps`` updates; optionally record a hex snapshot every ``record_every`` steps."""
    trajectory = []
    for step in range(1, steps + 1):
        config = dynamics.step(config, rng)
        if record_every and step % record_every == 0:
            trajectory.append(config.to_hex())
    return config, trajectory


def run_continuous(
    dynamics: BlockDynamics, config: SpinConfig, t: float, rng: np.random.Generator
) -> SpinConfig:
    """Continuous time by uniformization: Poisson(rate * t) uniformly chosen updates."""
    for _ in range(int(rng.poisson(dynamics.rate * t))):
        config = dynamics.step(config, rng)
    return config


def speedup_coupling_run(
    spec: SpeedupSpec,
    params: IsingParams,
    t_max: float,
    rng: np.random.Generator,
) -> float:
    """First time the speed-up chain on T and the forest chain on F disagree on G.

    Both start from all-plus. Blocks B_v and L_v are redrawn together from w_v downward with
    shared uniforms, so w_v's spin is maximally coupled; singletons of F minus W share their
    uniform; other singletons move only the chain on T. Returns inf if no disagreement
    happens before ``t_max``.
    """
    shape = spec.shape
    n = shape.n
    forest = spec.forest
    subforest = sorted(spec.subforest)
    x = np.ones(n, dtype=np.int8)
    y = np.ones(n, dtype=np.int8)
    t = 0.0
    while True:
        t += rng.exponential(1.0 / n)
        if t > t_max:
            return math.inf
        u = int(rng.integers(n))
        uniforms = rng.random(n)
        if u in spec.W:
            x = resample_block(x, spec.blocks[u], shape, params, uniforms, root=u)
            y = resample_block(y, spec.paths[u], shape, params, uniforms, support=forest, root=u)
        else:
            x = resample_block(x, (u,), shape, params, uniforms)
            if u in forest:
                y = resample_block(y, (u,), shape, params, uniforms, support=forest)
        if np.any(x[subforest] != y[subforest]):
            return t


def speedup_coupling_survival(
    spec: SpeedupSpec,
    params: IsingParams,
    times: Sequence[float],
    replicas: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Empirical P(tau > t) and its standard error on ``times``."""
    t_max = float(max(times))
    taus = np.array([speedup_coupling_run(spec, params, t_max, rng) for _ in range(replicas)])
    survival = np.array([(taus > t).mean() for t in times])
    stderr = np.sqrt(survival * (1.0 - survival) / replicas)
    logger.debug("speed-up coupling: %d replicas, survival at t_max %.4f", replicas, survival[-1])
    return survival, stderr


def sample_below(
    spins: np.ndarray,
    shape: TreeShape,
    params: IsingParams,
    x_star: np.ndarray,
    from_level: int,
    uniforms: np.ndarray,
) -> np.ndarray:
    """Redraw levels from_level..h top-down from the Gibbs law given the level above."""
    out = spins.copy()
    for k in range(from_level, shape.h + 1):
        level = shape.level_vertices(k)
        parents = shape.parents[level.start : level.stop]
        drift = params.beta * out[parents] + 0.5 * x_star[level.start : level.stop]
        p_plus = 0.5 * (1.0 + np.tanh(drift))
        out[level.start : level.stop] = np.where(
            uniforms[level.start : level.stop] < p_plus, 1, -1
        )
    return out


@dataclass(frozen=True)
class ProjectionChain:
    """The block dynamics of a level cover seen through the spins on level ell - 1.

    A move holds with probability 1 - 1/(b^ell + 1). Otherwise the levels below ell - 1 are
    drawn from the Gibbs law given the current level-(ell-1) spins, the distinguished block
    ball(root, r) is redrawn given the rest, and the new level-(ell-1) spins are read off.
    """

    shape: TreeShape
    params: IsingParams
    boundary: BoundaryCondition
    cover: BlockCover
    x_star: np.ndarray = field(repr=False, compare=False, default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.cover.ell is None or self.cover.ell < 1:
            raise ValueError("projection chain needs a level cover with ell >= 1")
        if self.x_star is None:
            object.__setattr__(
                self, "x_star", boundary_fields(self.shape, self.params, self.boundary)
            )

    @property
    def level(self) -> range:
        return self.shape.level_vertices(self.cover.ell - 1)

    @property
    def move_probability(self) -> float:
        return 1.0 / len(self.cover)

    def step_with(self, eta: np.ndarray, move: float, uniforms: np.ndarray) -> np.ndarray:
        if move >= self.move_probability:
            return eta.copy()
        shape = self.shape
        spins = np.ones(shape.n, dtype=np.int8)
        level = self.level
        spins[level.start : level.stop] = eta
        spins = sample_below(spins, shape, self.params, self.x_star, self.cover.ell, uniforms)
        spins = resample_block(
            spins,
            self.cover.blocks[0],
            shape,
            self.params,
            uniforms,
            frozen=self.boundary.frozen_spins(shape),
        )
        return spins[level.start : level.stop].copy()

    def step(self, eta: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return self.step_with(eta, float(rng.random()), rng.random(self.shape.n))

    def coupled_step(
        self, eta: np.ndarray, zeta: np.ndarray, rng: np.random.Generator
    ) -> tuple[np.ndarray, np.ndarray]:
        move = float(rng.random())
        uniforms = rng.random(self.shape.n)
        return self.step_with(eta, move, uniforms), self.step_with(zeta, move, uniforms)


def projection_chain_step(
    eta: np.ndarray, chain: ProjectionChain, rng: np.random.Generator
) -> np.ndarray:
    return chain.step(eta, rng)


def check_kernel_size(dynamics: BlockDynamics) -> int:
    free = len(dynamics.boundary.free_vertices(dynamics.shape, dynamics.support))
    if free > settings.max_kernel_free:
        raise SizeGuardError("kernel state space (free vertices)", free, settings.max_kernel_free)
    return free
