"""Exact Gibbs measures on (sub)trees, broadcast sampling and log-likelihood recursions."""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from functools import cached_property
from typing import TypeAlias

import numpy as np
from scipy import sparse
from scipy.special import logsumexp

from src.logging_config import logger

from .errors import SizeGuardError
from .settings import settings
from .tree_model import BoundaryCondition, IsingParams, SpinConfig, TreeShape

# Extended real: finite, +inf or -inf. Infinite values mark vertices with a forced spin.
LogLikRatio: TypeAlias = float

FieldLike: TypeAlias = "Mapping[int, float] | np.ndarray | None"


class StateSpace:
    """Enumeration of the free vertices of a (sub)tree.

    State index bit j is set iff ``free[j]`` carries spin +1. Frozen vertices keep the spin the
    boundary gives them; vertices outside ``support`` are not part of the space at all.
    """

    def __init__(
        self,
        shape: TreeShape,
        boundary: BoundaryCondition | None = None,
        support: Iterable[int] | None = None,
    ) -> None:
        self.shape = shape
        self.boundary = boundary or BoundaryCondition.free()
        if support is None:
            vertices: tuple[int, ...] = tuple(range(shape.n))
        else:
            vertices = tuple(sorted({int(v) for v in support}))
            for v in vertices:
                shape._check(v)
        self.vertices = vertices
        inside = set(vertices)
        self.frozen = {
            v: s for v, s in self.boundary.frozen_spins(shape).items() if v in inside
        }
        self.free = tuple(v for v in vertices if v not in self.frozen)
        self._position = {v: j for j, v in enumerate(self.free)}
        self._inside = inside

    @property
    def n_free(self) -> int:
        return len(self.free)

    @property
    def size(self) -> int:
        return 1 << len(self.free)

    def __contains__(self, v: int) -> bool:
        return v in self._inside

    def is_free(self, v: int) -> bool:
        return v in self._position

    def position(self, v: int) -> int:
        return self._position[v]

    @cached_property
    def indices(self) -> np.ndarray:
        return np.arange(self.size, dtype=np.int64)

    @cached_property
    def edges(self) -> tuple[tuple[int, int], ...]:
        return tuple(
            (p, c) for p, c in self.shape.edges if p in self._inside and c in self._inside
        )

    def spin_column(self, v: int) -> np.ndarray:
        """Spin of v in every state, as an int8 vector of length ``size``."""
        if v in self.frozen:
            return np.full(self.size, self.frozen[v], dtype=np.int8)
        if v not in self._position:
            raise ValueError(f"vertex {v!r} is not part of this state space")
        bits = (self.indices >> self._position[v]) & 1
        return (2 * bits - 1).astype(np.int8)

    def spin_matrix(self) -> np.ndarray:
        """(size, n) spins over the whole tree; vertices outside the support read +1."""
        out = np.ones((self.size, self.shape.n), dtype=np.int8)
        for v in self.vertices:
            out[:, v] = self.spin_column(v)
        return out

    def code(self, vertices: Sequence[int]) -> np.ndarray:
        """Per state, the integer whose bit j is set iff vertices[j] is +1."""
        out = np.zeros(self.size, dtype=np.int64)
        for j, v in enumerate(vertices):
            out |= (self.spin_column(v) == 1).astype(np.int64) << j
        return out

    def index_of(self, config: SpinConfig) -> int:
        for v, s in self.frozen.items():
            if config[v] != s:
                raise ValueError(f"configuration disagrees with the boundary at vertex {v!r}")
        return sum(1 << j for j, v in enumerate(self.free) if config[v] == 1)

    def config_at(self, index: int, fill: SpinConfig | None = None) -> SpinConfig:
        out = fill.copy() if fill is not None else SpinConfig.constant(self.shape, 1)
        for v, s in self.frozen.items():
            out.spins[v] = s
        for j, v in enumerate(self.free):
            out.spins[v] = 1 if (index >> j) & 1 else -1
        return out


class GibbsTable:
    """Normalised Gibbs weights over a :class:`StateSpace`."""

    def __init__(self, space: StateSpace, params: IsingParams, log_weights: np.ndarray) -> None:
        self.space = space
        self.params = params
        self.log_weights = log_weights
        self.log_z = float(logsumexp(log_weights))
        self.probs = np.exp(log_weights - self.log_z)

    @property
    def partition_function(self) -> float:
        return math.exp(self.log_z)

    def expectation(self, values: np.ndarray) -> float:
        return float(np.dot(self.probs, values))

    def marginal_plus(self, v: int) -> float:
        return float(self.probs[self.space.spin_column(v) == 1].sum())

    def log_odds(self, v: int) -> LogLikRatio:
        if v in self.space.frozen:
            return math.copysign(math.inf, self.space.frozen[v])
        plus = self.space.spin_column(v) == 1
        return float(logsumexp(self.log_weights[plus]) - logsumexp(self.log_weights[~plus]))

    def covariance(self, u: int, w: int) -> float:
        su = self.space.spin_column(u).astype(float)
        sw = self.space.spin_column(w).astype(float)
        return self.expectation(su * sw) - self.expectation(su) * self.expectation(sw)

    def marginal(self, vertices: Sequence[int]) -> np.ndarray:
        """Law of the spins on ``vertices``, indexed by :meth:`StateSpace.code`."""
        codes = self.space.code(vertices)
        return np.bincount(codes, weights=self.probs, minlength=1 << len(vertices))

    def conditional(self, given: Mapping[int, int]) -> np.ndarray:
        mask = np.ones(self.space.size, dtype=bool)
        for v, s in given.items():
            mask &= self.space.spin_column(v) == s
        weights = np.where(mask, self.probs, 0.0)
        total = weights.sum()
        if total <= 0.0:
            raise ValueError(f"conditioning event {dict(given)!r} has probability zero")
        return weights / total

    def conditional_marginal_plus(self, v: int, given: Mapping[int, int]) -> float:
        cond = self.conditional(given)
        return float(cond[self.space.spin_column(v) == 1].sum())


def field_value(field: FieldLike, v: int) -> float:
    if field is None:
        return 0.0
    if isinstance(field, Mapping):
        return float(field.get(v, 0.0))
    return float(field[v])


def exact_gibbs(
    shape: TreeShape,
    params: IsingParams,
    boundary: BoundaryCondition | None = None,
    *,
    support: Iterable[int] | None = None,
    field: FieldLike = None,
    max_free: int | None = None,
) -> GibbsTable:
    """Enumerate the Gibbs measure exp(beta * sum sigma_x sigma_y + sum H_v sigma_v) / Z.

    Only edges with both ends in ``support`` interact, so a support that is a subtree yields
    the Gibbs measure of that subtree in isolation.
    """
    space = StateSpace(shape, boundary, support)
    limit = settings.max_enum_free if max_free is None else max_free
    if space.n_free > limit:
        raise SizeGuardError("Gibbs enumeration", space.n_free, limit)

    log_weights = np.zeros(space.size, dtype=np.float64)
    if params.beta:
        for p, c in space.edges:
            log_weights += params.beta * (space.spin_column(p) * space.spin_column(c))
    for v in space.vertices:
        h = field_value(field, v)
        if h == 0.0:
            continue
        if not math.isfinite(h):
            raise ValueError(f"external field at vertex {v!r} must be finite, got {h!r}")
        log_weights += h * space.spin_column(v)
    logger.debug("exact_gibbs: %d free vertices, %d states", space.n_free, space.size)
    return GibbsTable(space, params, log_weights)


def conditional_resample_matrix(
    table: GibbsTable, block: Iterable[int], max_nonzeros: int | None = None
) -> sparse.csr_matrix:
    """Row-stochastic matrix that redraws the free spins of ``block`` from the Gibbs
    conditional given all other spins. Frozen block vertices are left alone."""
    space = table.space
    for v in block:
        if v not in space:
            raise ValueError(f"block vertex {v!r} lies outside the state space")
    positions = [space.position(v) for v in block if space.is_free(v)]
    k = len(positions)
    limit = settings.max_kernel_nonzeros if max_nonzeros is None else max_nonzeros
    if space.size << k > limit:
        raise SizeGuardError("block resampling matrix", space.size << k, limit)

    choices = np.arange(1 << k, dtype=np.int64)
    offsets = np.zeros(1 << k, dtype=np.int64)
    mask = 0
    for i, p in enumerate(positions):
        offsets |= ((choices >> i) & 1) << p
        mask |= 1 << p
    targets = (space.indices & ~mask)[:, None] | offsets[None, :]
    logw = table.log_weights[targets]
    weights = np.exp(logw - logw.max(axis=1, keepdims=True))
    weights /= weights.sum(axis=1, keepdims=True)
    rows = np.repeat(space.indices, 1 << k)
    return sparse.csr_matrix(
        (weights.ravel(), (rows, targets.ravel())), shape=(space.size, space.size)
    )


def broadcast_samples(
    shape: TreeShape,
    params: IsingParams,
    size: int,
    rng: np.random.Generator,
    root_spin: int | None = None,
) -> np.ndarray:
    """``size`` independent broadcast configurations as a (size, n) int8 array."""
    out = np.empty((size, shape.n), dtype=np.int8)
    if root_spin is None:
        out[:, 0] = rng.choice(np.array([-1, 1], dtype=np.int8), size=size)
    elif root_spin in (-1, 1):
        out[:, 0] = root_spin
    else:
        raise ValueError(f"root spin must be +1 or -1, got {root_spin!r}")
    keep = (1.0 + params.theta) / 2.0
    for k in range(1, shape.h + 1):
        level = shape.level_vertices(k)
        parents = shape.parents[level.start : level.stop]
        agree = rng.random((size, len(level))) < keep
        out[:, level.start : level.stop] = np.where(agree, out[:, parents], -out[:, parents])
    return out


def broadcast_sample(
    shape: TreeShape,
    params: IsingParams,
    rng: np.random.Generator,
    boundary: BoundaryCondition | None = None,
    root_spin: int | None = None,
) -> SpinConfig:
    if boundary is not None and not boundary.is_free():
        raise ValueError(f"broadcast sampling needs a free boundary, got {boundary.label()!r}")
    return SpinConfig(shape, broadcast_samples(shape, params, 1, rng, root_spin)[0])


def pairwise_cov(u: int, w: int, shape: TreeShape, params: IsingParams) -> float:
    """Free-boundary covariance of sigma(u) and sigma(w)."""
    return params.theta ** shape.dist(u, w)


def f_func(x: float | np.ndarray, theta: float) -> float | np.ndarray:
    """log((cosh(x/2) + theta sinh(x/2)) / (cosh(x/2) - theta sinh(x/2))), written as
    2 artanh(theta tanh(x/2)) so that x = +-inf maps to +-2 beta."""
    out = 2.0 * np.arctanh(theta * np.tanh(np.asarray(x, dtype=np.float64) / 2.0))
    return float(out) if np.ndim(out) == 0 else out


def loglik_field(
    shape: TreeShape,
    params: IsingParams,
    v: int,
    fixed: Mapping[int, int],
    depth: int | None = None,
) -> dict[int, LogLikRatio]:
    """Log-likelihood ratios on ball(v, depth) given fixed spins.

    Fixed vertices get +-inf, unfixed vertices on the bottom of the ball get 0 and every other
    vertex gets the sum of f over its children.
    """
    if depth is None:
        depth = shape.h - shape.level(v)
    vertices = shape.ball(v, depth)
    bottom = min(shape.level(v) + depth, shape.h)
    x: dict[int, LogLikRatio] = {}
    for u in reversed(vertices):
        if u in fixed:
            x[u] = math.copysign(math.inf, fixed[u])
        elif shape.level(u) == bottom:
            x[u] = 0.0
        else:
            x[u] = math.fsum(f_func(x[c], params.theta) for c in shape.children(u))
    return x


def loglik_recursion(
    shape: TreeShape,
    params: IsingParams,
    v: int,
    xi: Mapping[int, int],
    depth: int | None = None,
) -> LogLikRatio:
    return loglik_field(shape, params, v, xi, depth)[v]


def boundary_fields(
    shape: TreeShape, params: IsingParams, boundary: BoundaryCondition
) -> np.ndarray:
    """x_v^* for every vertex: the log-odds at v under the Gibbs measure on T_v given the
    boundary."""
    frozen = boundary.frozen_spins(shape)
    x = np.zeros(shape.n, dtype=np.float64)
    for k in range(shape.h, -1, -1):
        level = shape.level_vertices(k)
        if k < shape.h:
            below = shape.level_vertices(k + 1)
            fx = np.asarray(f_func(x[below.start : below.stop], params.theta))
            x[level.start : level.stop] = fx.reshape(-1, shape.b).sum(axis=1)
        for u in level:
            if u in frozen:
                x[u] = math.copysign(math.inf, frozen[u])
    return x


def boundary_field(
    shape: TreeShape, params: IsingParams, boundary: BoundaryCondition, v: int
) -> LogLikRatio:
    return float(boundary_fields(shape, params, boundary)[v])


def propagation_coeff(x_star: float | np.ndarray, params: IsingParams) -> float | np.ndarray:
    """cosh^2(beta) / (cosh^2(beta) + cosh^2(x/2) - 1); equals 1 at x = 0 and 0 at +-inf."""
    c2 = math.cosh(params.beta) ** 2
    with np.errstate(over="ignore"):
        out = c2 / (c2 + np.cosh(np.asarray(x_star, dtype=np.float64) / 2.0) ** 2 - 1.0)
    return float(out) if np.ndim(out) == 0 else out


def concentration_coeff(x_star: float | np.ndarray) -> float | np.ndarray:
    """2 cosh^2(x/2)."""
    with np.errstate(over="ignore"):
        out = 2.0 * np.cosh(np.asarray(x_star, dtype=np.float64) / 2.0) ** 2
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class FInequalityReport:
    points: int
    violations: int
    first_violation: dict[str, float] | None
    max_ratio: float
    delta_points: int
    delta_violations: int
    first_delta_violation: dict[str, float] | None

    @property
    def holds(self) -> bool:
        return self.violations == 0 and self.delta_violations == 0


def f_inequality_scan(
    theta_grid: Sequence[float],
    delta_grid: Sequence[float],
    c1_grid: Sequence[float],
    *,
    xy_grid: Sequence[float] | None = None,
    kappa: float | None = None,
    rtol: float = 1e-12,
) -> FInequalityReport:
    """Check f(d)(1 + 4 kappa (1-theta) C1 d tanh(d/2)) <= C2 theta d pointwise, with
    C2 = max(1 + (C1/2 - 1)(1 - theta^2), 1), together with
    |f(x) - f(y)| <= 2 f(|x - y| / 2) on an (x, y) grid per theta."""
    kappa = settings.kappa if kappa is None else kappa
    theta = np.asarray(theta_grid, dtype=np.float64)
    delta = np.asarray(delta_grid, dtype=np.float64)
    c1 = np.asarray(c1_grid, dtype=np.float64)
    if np.any(theta > 0.75) or np.any(theta <= 0.0):
        raise ValueError("theta grid must lie in (0, 3/4]")
    if np.any(c1 < 1.0):
        raise ValueError("C1 grid must be >= 1")
    if np.any(delta <= 0.0):
        raise ValueError("delta grid must be positive")

    t = theta[:, None, None]
    d = delta[None, :, None]
    c = c1[None, None, :]
    c2 = np.maximum(1.0 + (0.5 * c - 1.0) * (1.0 - t**2), 1.0)
    lhs = 2.0 * np.arctanh(t * np.tanh(d / 2.0)) * (
        1.0 + 4.0 * kappa * (1.0 - t) * c * d * np.tanh(d / 2.0)
    )
    rhs = c2 * t * d
    bad = lhs > rhs * (1.0 + rtol)
    first = None
    if bad.any():
        i, j, k = (int(a[0]) for a in np.nonzero(bad))
        first = {
            "theta": float(theta[i]),
            "delta": float(delta[j]),
            "c1": float(c1[k]),
            "lhs": float(lhs[i, j, k]),
            "rhs": float(rhs[i, j, k]),
        }

    xs = np.linspace(-20.0, 20.0, 81) if xy_grid is None else np.asarray(xy_grid, float)
    x = xs[None, :, None]
    y = xs[None, None, :]
    tt = theta[:, None, None]
    gap = np.abs(2.0 * np.arctanh(tt * np.tanh(x / 2.0)) - 2.0 * np.arctanh(tt * np.tanh(y / 2.0)))
    cap = 2.0 * 2.0 * np.arctanh(tt * np.tanh(np.abs(x - y) / 4.0))
    dbad = gap > cap * (1.0 + rtol) + 1e-15
    first_delta = None
    if dbad.any():
        i, j, k = (int(a[0]) for a in np.nonzero(dbad))
        first_delta = {"theta": float(theta[i]), "x": float(xs[j]), "y": float(xs[k])}

    report = FInequalityReport(
        points=int(bad.size),
        violations=int(bad.sum()),
        first_violation=first,
        max_ratio=float(np.max(lhs / rhs)),
        delta_points=int(dbad.size),
        delta_violations=int(dbad.sum()),
        first_delta_violation=first_delta,
    )
    logger.debug(
        "f inequality scan: %d points, %d violations, max ratio %.6f",
        report.points,
        report.violations,
        report.max_ratio,
    )
    return report
