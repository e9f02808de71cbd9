"""Distances between distributions, mixing times and stochastic domination."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Literal, NamedTuple

import networkx as nx
import numpy as np
from scipy import stats

from src.logging_config import logger

from .errors import ConvergenceError, SizeGuardError
from .gibbs_engine import GibbsTable, StateSpace, exact_gibbs
from .glauber_dynamics import BlockDynamics, SpeedupSpec
from .settings import settings
from .spectral_toolkit import DistVector, MarkovKernel
from .tree_model import IsingParams, SpinConfig, TreeShape

TmixMode = Literal["discrete", "continuous"]


def _same_space(p: DistVector, q: DistVector) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"distributions live on different spaces: {p.shape!r} vs {q.shape!r}")
    return p, q


def tv_distance(p: DistVector, q: DistVector) -> float:
    """||p - q||_TV = 1/2 sum |p(x) - q(x)|."""
    p, q = _same_space(p, q)
    return float(0.5 * np.abs(p - q).sum())


def tv_distance_sup(p: DistVector, q: DistVector) -> float:
    """sup_A |p(A) - q(A)|, attained on A = {p > q}."""
    p, q = _same_space(p, q)
    return float(np.clip(p - q, 0.0, None).sum())


class Hellinger(NamedTuple):
    affinity: float
    distance: float


def hellinger(p: DistVector, q: DistVector) -> Hellinger:
    """(I_H, d_H) with I_H = sum sqrt(p q) and d_H = sqrt(2 - 2 I_H)."""
    p, q = _same_space(p, q)
    affinity = float(np.sqrt(np.clip(p, 0.0, None) * np.clip(q, 0.0, None)).sum())
    return Hellinger(affinity, math.sqrt(max(2.0 - 2.0 * affinity, 0.0)))


def product_distribution(factors: Sequence[DistVector]) -> np.ndarray:
    """Law of independent coordinates; the first factor varies slowest."""
    out = np.ones(1)
    for f in factors:
        out = np.multiply.outer(out, np.asarray(f, dtype=np.float64)).ravel()
    return out


# Mixing times.


@dataclass
class MixingReport:
    times: np.ndarray
    tv: np.ndarray
    band: np.ndarray
    tmix: dict[float, float | None]
    mode: str
    monotone: bool = True

    def tmix_or_raise(self, epsilon: float) -> float:
        value = self.tmix.get(epsilon)
        if value is None:
            raise ConvergenceError(
                f"TV never dropped below {epsilon!r} within t <= {self.times[-1]!r}",
                float(self.tv[-1]),
            )
        return value

    def rows(self) -> list[dict[str, float]]:
        return [
            {"t": float(t), "tv": float(d), "band": float(e)}
            for t, d, e in zip(self.times, self.tv, self.band)
        ]


def _start_distribution(kernel: MarkovKernel, start: int | SpinConfig | DistVector) -> np.ndarray:
    if isinstance(start, SpinConfig):
        if kernel.space is None:
            raise ValueError("kernel carries no state space to place a configuration in")
        start = kernel.space.index_of(start)
    if isinstance(start, (int, np.integer)):
        dist = np.zeros(kernel.size)
        dist[int(start)] = 1.0
        return dist
    dist = np.asarray(start, dtype=np.float64)
    if dist.shape != (kernel.size,):
        raise ValueError(f"start distribution has shape {dist.shape!r}, expected {kernel.size}")
    return dist


def _first_crossing(times: np.ndarray, tv: np.ndarray, epsilon: float) -> float | None:
    hits = np.flatnonzero(tv <= epsilon)
    return float(times[hits[0]]) if hits.size else None


def exact_tmix(
    kernel: MarkovKernel,
    start: int | SpinConfig | DistVector | None,
    epsilons: Sequence[float] = (1.0 / math.e,),
    t_max: float = 1000,
    mode: TmixMode = "discrete",
    dt: float = 1.0,
) -> MixingReport:
    """TV to pi along the exact evolution from ``start``; ``None`` takes the worst start.

    Discrete time advances one kernel step per unit. Continuous time rings each target at
    rate 1 and is evaluated on the grid 0, dt, 2 dt, ... by uniformization, truncating the
    Poisson mixture at tail mass ``settings.uniformization_tail``; the dropped mass goes into
    the band.
    """
    if kernel.size > 1 << settings.max_kernel_free:
        raise SizeGuardError("mixing-time state space", kernel.size, 1 << settings.max_kernel_free)
    if start is None:
        if kernel.size > settings.dense_max_states:
            raise SizeGuardError("worst-start evolution", kernel.size, settings.dense_max_states)
        dist = np.eye(kernel.size)
    else:
        dist = _start_distribution(kernel, start)[None, :]
    pi = kernel.pi

    def worst_tv(rows: np.ndarray) -> float:
        return float(np.max(0.5 * np.abs(rows - pi).sum(axis=1)))

    if mode == "discrete":
        steps = int(t_max)
        times = np.arange(steps + 1, dtype=np.float64)
        tv = np.empty(steps + 1)
        tv[0] = worst_tv(dist)
        for t in range(1, steps + 1):
            dist = (kernel.matrix.T @ dist.T).T
            tv[t] = worst_tv(dist)
        band = np.zeros_like(tv)
    elif mode == "continuous":
        times = np.arange(0.0, t_max + 0.5 * dt, dt)
        means = kernel.rate * times
        k_max = int(stats.poisson.ppf(1.0 - settings.uniformization_tail, means[-1])) + 1
        cells = times.size * dist.size
        if cells > settings.max_kernel_nonzeros:
            raise SizeGuardError("uniformization grid", cells, settings.max_kernel_nonzeros)
        acc = np.zeros((times.size,) + dist.shape)
        kept = np.zeros(times.size)
        current = dist
        for k in range(k_max + 1):
            weights = stats.poisson.pmf(k, means)
            acc += weights[:, None, None] * current[None, :, :]
            kept += weights
            current = (kernel.matrix.T @ current.T).T
        tv = np.array([worst_tv(a / max(m, 1e-300)) for a, m in zip(acc, kept)])
        band = 1.0 - kept
        logger.debug("uniformization: %d Poisson terms, max dropped mass %.3e", k_max + 1,
                     float(band.max()))
    else:
        raise ValueError(f"unknown mode {mode!r}")

    monotone = bool(np.all(np.diff(tv) <= 1e-12 + band[1:]))
    tmix: dict[float, float | None] = {}
    for eps in epsilons:
        tmix[eps] = _first_crossing(times, tv, eps)
        if tmix[eps] is None:
            logger.warning("t_mix(%g) not reached within t <= %g (TV %.4g)", eps, times[-1], tv[-1])
    return MixingReport(times, tv, band, tmix, mode=f"exact-{mode}", monotone=monotone)


def tv_decay_rate(times: np.ndarray, tv: np.ndarray, tail: float = 0.5, floor: float = 1e-13) -> (
    float
):
    """-slope of log TV over the last ``tail`` fraction of points above ``floor``."""
    mask = tv > floor
    t, d = np.asarray(times)[mask], np.asarray(tv)[mask]
    start = int(len(t) * (1.0 - tail))
    if len(t) - start < 2:
        raise ValueError("not enough points above the floor to fit a decay rate")
    slope = np.polyfit(t[start:], np.log(d[start:]), 1)[0]
    return float(-slope)


# Monte Carlo.


@dataclass(frozen=True)
class MonteCarloTV:
    estimate: float
    low: float
    high: float
    statistic: str
    replicas: int


def replica_rng(seed: int, replica: int) -> np.random.Generator:
    """Independent stream for (seed, replica)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(replica,)))


def level_sums(spins: np.ndarray, shape: TreeShape) -> np.ndarray:
    """(N, h+1) sums of the spins on each level."""
    spins = np.atleast_2d(spins)
    return np.stack(
        [spins[:, r.start : r.stop].sum(axis=1) for r in map(shape.level_vertices,
                                                               range(shape.h + 1))],
        axis=1,
    )


def _statistic_codes(spins: np.ndarray, shape: TreeShape, statistic: str) -> np.ndarray:
    if statistic == "magnetization":
        return np.atleast_2d(spins).sum(axis=1).astype(np.int64) + shape.n
    if statistic == "level_sums":
        sums = level_sums(spins, shape)
        code = np.zeros(sums.shape[0], dtype=np.int64)
        for k in range(shape.h + 1):
            width = 2 * shape.level_size(k) + 1
            code = code * width + (sums[:, k] + shape.level_size(k))
        return code
    raise ValueError(f"unknown statistic {statistic!r}")


def mc_tv_estimate(
    dynamics: BlockDynamics,
    start: SpinConfig,
    steps: int,
    replicas: int,
    seed: int,
    reference: GibbsTable | np.ndarray,
    statistic: str = "level_sums",
    bootstrap: int = 200,
) -> MonteCarloTV:
    """TV between the law of a statistic after ``steps`` updates and its law under pi.

    The reference is an exact table or an (N, n) array of equilibrium samples. Projecting onto
    a statistic can only lower TV, so the estimate is a lower bound up to sampling noise.
    """
    shape = dynamics.shape
    finals = np.empty((replicas, shape.n), dtype=np.int8)
    for i in range(replicas):
        rng = replica_rng(seed, i)
        config = start
        for _ in range(steps):
            config = dynamics.step(config, rng)
        finals[i] = config.spins

    codes = _statistic_codes(finals, shape, statistic)
    if isinstance(reference, GibbsTable):
        ref_codes = _statistic_codes(reference.space.spin_matrix(), shape, statistic)
        ref_weights = reference.probs
    else:
        ref_codes = _statistic_codes(reference, shape, statistic)
        ref_weights = np.full(ref_codes.size, 1.0 / ref_codes.size)
    support, ref_codes = np.unique(ref_codes, return_inverse=True)
    ref_law = np.bincount(ref_codes, weights=ref_weights, minlength=support.size)
    ref_law = np.append(ref_law, 0.0)

    def law(sample: np.ndarray) -> np.ndarray:
        pos = np.searchsorted(support, sample)
        pos = np.where((pos < support.size) & (support[np.minimum(pos, support.size - 1)]
                                               == sample), pos, support.size)
        return np.bincount(pos, minlength=support.size + 1) / sample.size

    estimate = tv_distance(law(codes), ref_law)
    boot_rng = replica_rng(seed, replicas)
    draws = [
        tv_distance(law(codes[boot_rng.integers(replicas, size=replicas)]), ref_law)
        for _ in range(bootstrap)
    ]
    low, high = np.percentile(draws, [2.5, 97.5]) if draws else (estimate, estimate)
    logger.debug("mc_tv_estimate(%s): %d replicas, estimate %.4g", statistic, replicas, estimate)
    return MonteCarloTV(estimate, float(low), float(high), statistic, replicas)


# Stochastic domination.


@dataclass(frozen=True)
class DominationVerdict:
    dominates: bool
    definitive: bool
    method: str
    worst_gap: float = 0.0
    details: dict[str, float] = field(default_factory=dict)

    def __bool__(self) -> bool:
        return self.dominates


def _spin_rows(states: StateSpace | np.ndarray) -> np.ndarray:
    if isinstance(states, StateSpace):
        return np.stack([states.spin_column(v) for v in states.free], axis=1)
    return np.atleast_2d(np.asarray(states, dtype=np.int8))


def stochastic_domination_check(
    upper: DistVector,
    lower: DistVector,
    states: StateSpace | np.ndarray,
    tol: float = 1e-9,
) -> DominationVerdict:
    """Whether ``upper`` stochastically dominates ``lower`` for the pointwise order.

    Up to ``settings.flow_max_states`` states a monotone coupling is sought as a max-flow:
    domination holds iff the flow saturates. Beyond that every principal up-set
    {sigma >= eta} and every single-coordinate event is compared, which is necessary but not
    sufficient, and the verdict is marked non-definitive.
    """
    upper, lower = _same_space(upper, lower)
    spins = _spin_rows(states)
    if spins.shape[0] != upper.size:
        raise ValueError("one row of spins per state is required")

    if upper.size <= settings.flow_max_states:
        le = np.all(spins[:, None, :] <= spins[None, :, :], axis=2)
        g = nx.DiGraph()
        src, dst = ("s",), ("t",)
        low_states = np.flatnonzero(lower > 0)
        up_states = np.flatnonzero(upper > 0)
        for x in low_states:
            g.add_edge(src, ("x", int(x)), capacity=float(lower[x]))
        for y in up_states:
            g.add_edge(("y", int(y)), dst, capacity=float(upper[y]))
        for x in low_states:
            for y in up_states[le[x, up_states]]:
                g.add_edge(("x", int(x)), ("y", int(y)))
        value = nx.maximum_flow_value(g, src, dst) if g.number_of_edges() else 0.0
        deficit = float(lower.sum() - value)
        return DominationVerdict(deficit <= tol, True, "max_flow", deficit, {"flow": value})

    m = spins.shape[1]
    if m > settings.max_enum_free:
        raise SizeGuardError("domination cube", m, settings.max_enum_free)
    bits = ((spins == 1).astype(np.int64) << np.arange(m)).sum(axis=1)
    up_mass = [np.bincount(bits, weights=w, minlength=1 << m) for w in (upper, lower)]
    for j in range(m):
        for mass in up_mass:
            view = mass.reshape(-1, 2, 1 << j)
            view[:, 0, :] += view[:, 1, :]
    diff = up_mass[1] - up_mass[0]
    worst = float(diff.max())
    single = [
        float(lower[spins[:, j] == 1].sum() - upper[spins[:, j] == 1].sum()) for j in range(m)
    ]
    worst = max(worst, max(single, default=0.0))
    logger.warning("domination over %d states checked on principal up-sets only", upper.size)
    return DominationVerdict(worst <= tol, False, "up_sets", worst)


# Projected Gibbs measure and the all-plus lower bound.


def projected_gibbs_tv(shape: TreeShape, params: IsingParams, spec: SpeedupSpec) -> float:
    """TV between the free Gibbs law of the forest G on its own and the marginal on G of the
    free Gibbs law of the whole tree."""
    if spec.shape != shape:
        raise ValueError("speed-up spec was built for another tree")
    g = sorted(spec.subforest)
    on_tree = exact_gibbs(shape, params).marginal(g)
    on_forest = exact_gibbs(shape, params, support=g).marginal(g)
    return tv_distance(on_forest, on_tree)


def projected_gibbs_tv_bound(b: int, ell: int, r: int, theta: float) -> float:
    """b^(2 ell) theta^(2 (r - ell))."""
    return b ** (2 * ell) * theta ** (2 * (r - ell))


def hellinger_product_tv_bound(gap_prime: float, t: float, copies: int) -> float:
    """1 - (1 - e^(-2 gap' t)/8)^copies: TV lower bound for a product of ``copies``
    identical chains from the top, each with continuous gap gap'."""
    return 1.0 - (1.0 - math.exp(-2.0 * gap_prime * t) / 8.0) ** copies


def allplus_tv_lower_bound(
    b: int, ell: int, r: int, theta: float, gap_prime: float, t: float
) -> float:
    """Product-chain bound minus the coupling failure 1 - exp(-theta^(r-ell) b^ell t) minus the
    projection error b^(2 ell) theta^(2(r-ell))."""
    product = hellinger_product_tv_bound(gap_prime, t, b**ell)
    failure = 1.0 - math.exp(-(theta ** (r - ell)) * b**ell * t)
    return product - failure - projected_gibbs_tv_bound(b, ell, r, theta)


def coupling_survival_bound(b: int, ell: int, r: int, theta: float, t: float) -> float:
    """exp(-theta^(r-ell) b^ell t)."""
    return math.exp(-(theta ** (r - ell)) * b**ell * t)
