import math

import numpy as np
import pytest

from src.treeglass.gibbs_engine import boundary_fields
from src.treeglass.spatial_mixing import (
    boundary_law,
    d_identity_residual,
    external_field_influence,
    hat_ball,
    hat_capacity,
    m_identity_residual,
    m_quantity,
    m_recursion_terms,
    propagation_rows,
    q_identity_residual,
    reconstruction_delta,
    reconstruction_delta_estimate,
    recursion_constant,
    recursion_term,
    spatial_mixing_report,
)
from src.treeglass.tree_model import BoundaryCondition, IsingParams, TreeShape


def test_hat_ball_rejects_depths_and_frozen_vertices_inside() -> None:
    shape = TreeShape(2, 3)

    assert hat_ball(shape, BoundaryCondition.all_plus(), 0, 2) == list(range(7))
    with pytest.raises(ValueError, match="hat_depth"):
        hat_ball(shape, BoundaryCondition.free(), 0, 3)
    with pytest.raises(ValueError, match="inside"):
        hat_ball(shape, BoundaryCondition.frozen_set({4: 1}), 0, 2)


def test_boundary_law_is_a_mixture_of_its_conditional_laws() -> None:
    shape = TreeShape(2, 3)
    params = IsingParams.critical(2)
    boundary = BoundaryCondition.arbitrary(shape, [1, 1, -1, 1, -1, -1, 1, -1])

    law = boundary_law(shape, params, boundary, 0, 2)
    p_plus = 0.5 * (1.0 + math.tanh(law.x_star / 2.0))

    assert law.q.sum() == pytest.approx(1.0)
    assert np.allclose(law.q, p_plus * law.q_plus + (1.0 - p_plus) * law.q_minus)
    assert q_identity_residual(law) < 1e-12


def test_d_identity_holds_on_a_range_of_fields() -> None:
    params = IsingParams.near_critical(3, 0.4)

    for x in (-5.0, -0.3, 0.0, 1.2, 7.0):
        assert d_identity_residual(x, params) < 1e-12


@pytest.mark.parametrize("boundary", [BoundaryCondition.free(), BoundaryCondition.all_minus()])
def test_m_identity_links_m_to_its_children(boundary: BoundaryCondition) -> None:
    shape = TreeShape(2, 4)
    params = IsingParams.critical(2)

    assert m_identity_residual(shape, params, boundary, 0, 2) < 1e-10
    assert m_identity_residual(shape, params, boundary, 1, 3) < 1e-10


def test_m_is_infinite_on_the_inner_boundary() -> None:
    shape = TreeShape(2, 3)

    assert m_quantity(shape, IsingParams.critical(2), BoundaryCondition.free(), 3, 2) == math.inf


def test_recursion_term_continues_to_infinity() -> None:
    params = IsingParams.critical(2)
    k = recursion_constant(params, 1.0 / 96.0)

    assert recursion_term(math.inf, params, 1.0 / 96.0) == pytest.approx(params.theta**2 / k)
    assert recursion_term(0.0, params) == 0.0


def test_m_recursion_holds_with_the_plus_boundary() -> None:
    shape = TreeShape(2, 4)
    rows = m_recursion_terms(shape, IsingParams.critical(2), BoundaryCondition.all_plus(), 3)

    assert len(rows) == shape.level_start(3)
    assert all(row.holds for row in rows)


def test_propagation_rows_hold_and_need_interior_vertices() -> None:
    shape = TreeShape(2, 3)
    params = IsingParams.near_critical(2, 0.1)

    rows = propagation_rows(shape, params, BoundaryCondition.free(), 0, 2)

    assert [row.child for row in rows] == [1, 2]
    assert all(row.holds for row in rows)
    with pytest.raises(ValueError, match="no children"):
        propagation_rows(shape, params, BoundaryCondition.free(), 3, 2)


def test_external_field_influence_without_field_is_twice_the_correlation() -> None:
    shape = TreeShape(2, 2)
    params = IsingParams.critical(2)

    assert external_field_influence(shape, params, 0, 5) == pytest.approx(2.0 * params.theta**2)
    tilted = external_field_influence(shape, params, 0, 5, field={2: 3.0})
    assert tilted < 2.0 * params.theta**2


def test_monte_carlo_delta_brackets_the_exact_value() -> None:
    shape = TreeShape(2, 4)
    params = IsingParams.critical(2)
    boundary = BoundaryCondition.all_plus()

    exact = reconstruction_delta(shape, params, boundary, 2)
    estimate = reconstruction_delta_estimate(
        shape, params, boundary, 2, np.random.default_rng(3), samples=40_000
    )

    low, high = estimate.band(4.0)
    assert low <= exact <= high
    with pytest.raises(ValueError, match="rng"):
        reconstruction_delta(shape, params, boundary, 2, mode="monte_carlo")


@pytest.mark.parametrize(
    "boundary",
    [BoundaryCondition.free(), BoundaryCondition.all_plus(), BoundaryCondition.all_minus()],
)
def test_spatial_mixing_report_holds_at_criticality(boundary: BoundaryCondition) -> None:
    shape = TreeShape(2, 4)

    rows = spatial_mixing_report(shape, IsingParams.critical(2), boundary, 2)

    assert [row.vertex for row in rows] == [0, 1, 2]
    assert rows[0].delta is not None and rows[1].delta is None
    assert all(row.holds for row in rows)
    assert rows[0].cap2 == pytest.approx(hat_capacity(shape, IsingParams.critical(2), 0, 2))


def test_spatial_mixing_report_random_boundaries_hold() -> None:
    shape = TreeShape(3, 3)
    params = IsingParams.near_critical(3, 0.2)

    for seed in range(5):
        boundary = BoundaryCondition.random_leaves(shape, np.random.default_rng(seed))
        assert all(row.holds for row in spatial_mixing_report(shape, params, boundary, 2))


def test_zero_coupling_gives_zero_capacity_and_zero_delta() -> None:
    shape = TreeShape(2, 3)
    params = IsingParams(beta=0.0)

    rows = spatial_mixing_report(shape, params, BoundaryCondition.all_plus(), 2)

    assert rows[0].cap2 == 0.0
    assert rows[0].delta == pytest.approx(0.0)
    assert all(row.holds for row in rows)


def test_external_field_influence_is_largest_without_a_field() -> None:
    shape = TreeShape(2, 2)
    params = IsingParams.near_critical(2, 0.3)
    rng = np.random.default_rng(9)
    untilted = external_field_influence(shape, params, 1, 6)

    for _ in range(10):
        field = {v: float(x) for v, x in enumerate(rng.uniform(-2.0, 2.0, shape.n))}
        assert external_field_influence(shape, params, 1, 6, field) <= untilted + 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_flipping_the_boundary_negates_x_star_and_keeps_m_and_delta(seed: int) -> None:
    shape = TreeShape(2, 3)
    params = IsingParams.near_critical(2, 0.1)
    tau = BoundaryCondition.random_leaves(shape, np.random.default_rng(seed))
    flipped = tau.flipped()

    assert np.allclose(
        boundary_fields(shape, params, flipped), -boundary_fields(shape, params, tau), atol=1e-12
    )
    for v in (0, 1, 2):
        assert m_quantity(shape, params, flipped, v, 2) == pytest.approx(
            m_quantity(shape, params, tau, v, 2), rel=1e-9
        )
    assert reconstruction_delta(shape, params, flipped, 2) == pytest.approx(
        reconstruction_delta(shape, params, tau, 2), rel=1e-9, abs=1e-12
    )
