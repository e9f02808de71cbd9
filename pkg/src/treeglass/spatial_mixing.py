"""Reconstruction from an inner subtree: boundary laws Q_v, Q_v^+-, the quantities Delta and
m_v, and the inequalities tying them to the L2-capacity of the subtree.

Throughout, the inner subtree is ``T_hat = ball(root, hat_depth)`` with
``1 <= hat_depth <= h - 1``, and ``T_hat_v`` is its part below v. The boundary of ``T_hat_v`` is
its bottom level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from src.logging_config import logger

from .capacity_networks import l2_capacity, level_resistances
from .errors import SizeGuardError
from .gibbs_engine import (
    FieldLike,
    GibbsTable,
    boundary_fields,
    concentration_coeff,
    exact_gibbs,
    f_func,
    propagation_coeff,
)
from .settings import settings
from .tree_model import BoundaryCondition, IsingParams, TreeShape

DeltaMode = Literal["exact", "monte_carlo"]


def hat_ball(
    shape: TreeShape, boundary: BoundaryCondition, v: int, hat_depth: int
) -> list[int]:
    if not 1 <= hat_depth <= shape.h - 1:
        raise ValueError(f"hat_depth must lie in 1..{shape.h - 1}, got {hat_depth!r}")
    if shape.level(v) > hat_depth:
        raise ValueError(f"vertex {v!r} lies below the inner subtree of depth {hat_depth!r}")
    vertices = shape.ball(v, hat_depth - shape.level(v))
    frozen = boundary.frozen_spins(shape)
    inside = [u for u in vertices if u in frozen]
    if inside:
        raise ValueError(f"boundary fixes vertices inside the inner subtree: {inside!r}")
    return vertices


def hat_boundary(shape: TreeShape, v: int, hat_depth: int) -> list[int]:
    return list(shape.descendants_at(v, hat_depth - shape.level(v)))


def hat_gibbs(
    shape: TreeShape,
    params: IsingParams,
    boundary: BoundaryCondition,
    v: int,
    hat_depth: int,
    x_star: np.ndarray | None = None,
) -> GibbsTable:
    """The law of mu_v^tau on T_hat_v: the subtrees hanging below the bottom level are
    summed out into external fields x_u^* / 2."""
    support = hat_ball(shape, boundary, v, hat_depth)
    if x_star is None:
        x_star = boundary_fields(shape, params, boundary)
    field = {u: 0.5 * float(x_star[u]) for u in hat_boundary(shape, v, hat_depth)}
    return exact_gibbs(shape, params, boundary, support=support, field=field)


def hat_loglik(bottom_spins: np.ndarray, b: int, theta: float) -> np.ndarray:
    """x_v^xi for each row of bottom-level spins (BFS order) of a complete b-ary subtree."""
    x = np.where(np.asarray(bottom_spins) > 0, np.inf, -np.inf).astype(np.float64)
    while x.shape[1] > 1:
        x = np.asarray(f_func(x, theta)).reshape(x.shape[0], -1, b).sum(axis=2)
    return x[:, 0]


@dataclass(frozen=True)
class BoundaryLaw:
    """Q_v, Q_v^+ and Q_v^- on the boundary of T_hat_v, indexed by boundary code
    (bit j set iff ``boundary_vertices[j]`` is +1), with x_v^xi per code."""

    vertex: int
    boundary_vertices: tuple[int, ...]
    q: np.ndarray
    q_plus: np.ndarray
    q_minus: np.ndarray
    x_xi: np.ndarray
    x_star: float

    def integrate(self, values: np.ndarray) -> tuple[float, float]:
        return float(np.dot(self.q_plus, values)), float(np.dot(self.q_minus, values))


def _code_spins(n_codes: int, width: int) -> np.ndarray:
    codes = np.arange(n_codes, dtype=np.int64)[:, None]
    return (2 * ((codes >> np.arange(width)) & 1) - 1).astype(np.int8)


def boundary_law(
    shape: TreeShape,
    params: IsingParams,
    boundary: BoundaryCondition,
    v: int,
    hat_depth: int,
    x_star: np.ndarray | None = None,
) -> BoundaryLaw:
    if x_star is None:
        x_star = boundary_fields(shape, params, boundary)
    bottom = hat_boundary(shape, v, hat_depth)
    if len(bottom) > settings.max_enum_free:
        raise SizeGuardError("inner-subtree boundary", len(bottom), settings.max_enum_free)
    table = hat_gibbs(shape, params, boundary, v, hat_depth, x_star)
    n_codes = 1 << len(bottom)
    codes = table.space.code(bottom)
    plus = table.space.spin_column(v) == 1
    p_plus = float(table.probs[plus].sum())
    q = np.bincount(codes, weights=table.probs, minlength=n_codes)
    q_plus = np.bincount(codes[plus], weights=table.probs[plus], minlength=n_codes) / p_plus
    q_minus = np.bincount(codes[~plus], weights=table.probs[~plus], minlength=n_codes) / (
        1.0 - p_plus
    )
    x_xi = hat_loglik(_code_spins(n_codes, len(bottom)), shape.b, params.theta)
    return BoundaryLaw(
        vertex=v,
        boundary_vertices=tuple(bottom),
        q=q,
        q_plus=q_plus,
        q_minus=q_minus,
        x_xi=x_xi,
        x_star=float(x_star[v]),
    )


def root_reconstruction(x_xi: np.ndarray, root_field: float = 0.0) -> np.ndarray:
    """mu_hat^xi(sigma(root) = +1) with an extra external field on the root."""
    return 0.5 * (1.0 + np.tanh(x_xi / 2.0 + root_field))


@dataclass(frozen=True)
class MonteCarloEstimate:
    value: float
    stderr: float
    samples: int

    def band(self, width: float = 3.0) -> tuple[float, float]:
        return self.value - width * self.stderr, self.value + width * self.stderr


def reconstruction_delta_estimate(
    shape: TreeShape,
    params: IsingParams,
    boundary: BoundaryCondition,
    hat_depth: int,
    rng: np.random.Generator,
    samples: int = 100_000,
    root_field: float = 0.0,
) -> MonteCarloEstimate:
    """Delta by sampling the + and - downward passes with shared uniforms."""
    hat_ball(shape, boundary, 0, hat_depth)
    x_star = boundary_fields(shape, params, boundary)
    m = shape.level_start(hat_depth + 1)
    uniforms = rng.random((samples, m))
    runs = []
    for root_spin in (1, -1):
        spins = np.empty((samples, m), dtype=np.int8)
        spins[:, 0] = root_spin
        for k in range(1, hat_depth + 1):
            level = shape.level_vertices(k)
            parents = shape.parents[level.start : level.stop]
            drift = params.beta * spins[:, parents] + 0.5 * x_star[level.start : level.stop]
            p_plus = 0.5 * (1.0 + np.tanh(drift))
            spins[:, level.start : level.stop] = np.where(
                uniforms[:, level.start : level.stop] < p_plus, 1, -1
            )
        bottom = shape.level_vertices(hat_depth)
        x_xi = hat_loglik(spins[:, bottom.start : bottom.stop], shape.b, params.theta)
        runs.append(root_reconstruction(x_xi, root_field))
    diffs = runs[0] - runs[1]
    value = float(diffs.mean())
    stderr = float(diffs.std(ddof=1) / math.sqrt(samples)) if samples > 1 else math.inf
    logger.debug("MC delta: %.6g +- %.2g over %d samples", value, stderr, samples)
    return MonteCarloEstimate(value=value, stderr=stderr, samples=samples)


def reconstruction_delta(
    shape: TreeShape,
    params: IsingParams,
    boundary: BoundaryCondition,
    hat_depth: int,
    root_field: float = 0.0,
    mode: DeltaMode = "exact",
    rng: np.random.Generator | None = None,
    samples: int = 100_000,
) -> float:
    """Delta = int mu_hat^xi(sigma(root)=1) dQ_root^+ - int mu_hat^xi(sigma(root)=1) dQ_root^-."""
    if mode == "monte_carlo":
        if rng is None:
            raise ValueError("monte_carlo mode needs an rng")
        return reconstruction_delta_estimate(
            shape, params, boundary, hat_depth, rng, samples, root_field
        ).value
    if mode != "exact":
        raise ValueError(f"unknown mode {mode!r}")
    law = boundary_law(shape, params, boundary, 0, hat_depth)
    plus, minus = law.integrate(root_reconstruction(law.x_xi, root_field))
    return plus - minus


def m_from_law(law: BoundaryLaw) -> float:
    if not np.all(np.isfinite(law.x_xi)):
        return math.inf
    plus, minus = law.integrate(law.x_xi)
    return plus - minus


def m_quantity(
    shape: TreeShape,
    params: IsingParams,
    boundary: BoundaryCondition,
    v: int,
    hat_depth: int,
    x_star: np.ndarray | None = None,
) -> float:
    """m_v = int x_v^xi dQ_v^+ - int x_v^xi dQ_v^-; infinite on the boundary of T_hat."""
    if shape.level(v) == hat_depth:
        hat_ball(shape, boundary, v, hat_depth)
        return math.inf
    return m_from_law(boundary_law(shape, params, boundary, v, hat_depth, x_star))


def recursion_constant(params: IsingParams, kappa: float | None = None) -> float:
    """K = kappa (1 - theta) / 4."""
    kappa = settings.kappa if kappa is None else kappa
    return kappa * (1.0 - params.theta) / 4.0


def recursion_term(m_w: float, params: IsingParams, kappa: float | None = None) -> float:
    """theta^2 m / (1 + K m), continued to theta^2 / K at m = inf."""
    k = recursion_constant(params, kappa)
    theta2 = params.theta**2
    if math.isinf(m_w):
        return theta2 / k
    return theta2 * m_w / (1.0 + k * m_w)


@dataclass(frozen=True)
class RecursionRow:
    vertex: int
    m_v: float
    bound: float
    holds: bool


def m_recursion_terms(
    shape: TreeShape,
    params: IsingParams,
    boundary: BoundaryCondition,
    hat_depth: int,
    kappa: float | None = None,
    tol: float = 1e-10,
) -> list[RecursionRow]:
    """m_v against sum_w theta^2 m_w / (1 + K m_w) at every non-bottom vertex of T_hat."""
    x_star = boundary_fields(shape, params, boundary)
    m = {
        v: m_quantity(shape, params, boundary, v, hat_depth, x_star)
        for v in range(shape.level_start(hat_depth + 1))
    }
    rows = []
    for v in range(shape.level_start(hat_depth)):
        bound = math.fsum(recursion_term(m[w], params, kappa) for w in shape.children(v))
        rows.append(RecursionRow(v, m[v], bound, m[v] <= bound + tol))
    return rows


@dataclass(frozen=True)
class PropagationRow:
    parent: int
    child: int
    f_gap: float
    bound: float
    d_star: float
    holds: bool


def propagation_rows(
    shape: TreeShape,
    params: IsingParams,
    boundary: BoundaryCondition,
    v: int,
    hat_depth: int,
    kappa: float | None = None,
    tol: float = 1e-10,
) -> list[PropagationRow]:
    """For each child w of v: int f(x_w^xi) dQ_w^+ - int f(x_w^xi) dQ_w^- against
    theta m_w / (D_w^* (1 + K m_w))."""
    if shape.level(v) >= hat_depth:
        raise ValueError(f"vertex {v!r} has no children inside the inner subtree")
    x_star = boundary_fields(shape, params, boundary)
    k = recursion_constant(params, kappa)
    rows = []
    for w in shape.children(v):
        law = boundary_law(shape, params, boundary, w, hat_depth, x_star)
        plus, minus = law.integrate(np.asarray(f_func(law.x_xi, params.theta)))
        m_w = m_from_law(law)
        d_star = float(propagation_coeff(law.x_star, params))
        if math.isinf(m_w):
            bound = params.theta / (d_star * k)
        else:
            bound = params.theta * m_w / (d_star * (1.0 + k * m_w))
        gap = plus - minus
        rows.append(PropagationRow(v, w, gap, bound, d_star, gap <= bound + tol))
    return rows


def m_identity_residual(
    shape: TreeShape,
    params: IsingParams,
    boundary: BoundaryCondition,
    v: int,
    hat_depth: int,
) -> float:
    """|m_v - theta sum_w D_w^* (int f dQ_w^+ - int f dQ_w^-)|."""
    rows = propagation_rows(shape, params, boundary, v, hat_depth)
    m_v = m_quantity(shape, params, boundary, v, hat_depth)
    return abs(m_v - params.theta * math.fsum(r.d_star * r.f_gap for r in rows))


def q_identity_residual(law: BoundaryLaw) -> float:
    """max |Q^+ - Q^- - C^* (tanh(x^xi/2) - tanh(x^*/2)) Q| over boundary codes."""
    c_star = concentration_coeff(law.x_star)
    predicted = c_star * (np.tanh(law.x_xi / 2.0) - math.tanh(law.x_star / 2.0)) * law.q
    return float(np.max(np.abs(law.q_plus - law.q_minus - predicted)))


def d_identity_residual(x_star: float, params: IsingParams) -> float:
    """|1/D^* - (1 + (C^*/2 - 1)(1 - theta^2))|."""
    d = propagation_coeff(x_star, params)
    c = concentration_coeff(x_star)
    return abs(1.0 / d - (1.0 + (0.5 * c - 1.0) * (1.0 - params.theta**2)))


def external_field_influence(
    shape: TreeShape, params: IsingParams, v: int, w: int, field: FieldLike = None
) -> float:
    """E[sigma(w) | sigma(v)=+1] - E[sigma(w) | sigma(v)=-1] under the free-boundary measure
    with external field ``field``."""
    if v == w:
        raise ValueError("v and w must differ")
    table = exact_gibbs(shape, params, BoundaryCondition.free(), field=field)
    sw = table.space.spin_column(w).astype(np.float64)
    plus = float(np.dot(table.conditional({v: 1}), sw))
    minus = float(np.dot(table.conditional({v: -1}), sw))
    return plus - minus


def hat_capacity(shape: TreeShape, params: IsingParams, v: int, hat_depth: int) -> float:
    """cap_2 of T_hat_v with resistances theta^(-2 dist(v, .)); zero at theta = 0."""
    if params.theta == 0.0:
        return 0.0
    depth = hat_depth - shape.level(v)
    return l2_capacity(level_resistances(shape, params.theta, v, depth))


@dataclass(frozen=True)
class SpatialMixingRow:
    vertex: int
    hat_depth: int
    delta: float | None
    m_v: float
    cap2: float
    delta_bound: float | None
    m_bound: float
    delta_holds: bool | None
    m_holds: bool

    @property
    def holds(self) -> bool:
        return self.m_holds and self.delta_holds is not False


def spatial_mixing_report(
    shape: TreeShape,
    params: IsingParams,
    boundary: BoundaryCondition,
    hat_depth: int,
    kappa: float | None = None,
    root_field: float = 0.0,
    tol: float = 1e-12,
) -> list[SpatialMixingRow]:
    """Delta <= cap_2/(kappa(1-theta)) at the root and m_v <= cap_2/(kappa(1-theta)/4) at every
    non-bottom vertex of T_hat, each against the capacity of its own T_hat_v."""
    kappa = settings.kappa if kappa is None else kappa
    x_star = boundary_fields(shape, params, boundary)
    scale = kappa * (1.0 - params.theta)
    rows = []
    for v in range(shape.level_start(hat_depth)):
        cap = hat_capacity(shape, params, v, hat_depth)
        m_v = m_quantity(shape, params, boundary, v, hat_depth, x_star)
        m_bound = cap / (scale / 4.0)
        delta = delta_bound = delta_holds = None
        if v == 0:
            delta = reconstruction_delta(shape, params, boundary, hat_depth, root_field)
            delta_bound = cap / scale
            delta_holds = delta <= delta_bound + tol
        rows.append(
            SpatialMixingRow(
                vertex=v,
                hat_depth=hat_depth,
                delta=delta,
                m_v=m_v,
                cap2=cap,
                delta_bound=delta_bound,
                m_bound=m_bound,
                delta_holds=delta_holds,
                m_holds=m_v <= m_bound + tol,
            )
        )
    return rows
