import math

import numpy as np
import pytest

from src.treeglass.capacity_networks import (
    ResistorTree,
    effective_resistance,
    effective_resistance_kirchhoff,
    l2_capacity,
    level_cutsets,
    level_resistances,
    log_effective_resistance,
    nash_williams_bound,
    uniform_split_flow,
    validate_flow,
)
from src.treeglass.spectral_toolkit import near_critical_capacity_bound
from src.treeglass.tree_model import IsingParams, TreeShape


def _small_tree() -> ResistorTree:
    return ResistorTree.from_resistances([-1, 0, 0, 1], [0.0, 1.0, 2.0, 3.0])


def test_series_and_parallel_reduction() -> None:
    rt = _small_tree()

    assert rt.leaves == [2, 3]
    assert effective_resistance(rt) == pytest.approx(4.0 / 3.0)
    assert effective_resistance_kirchhoff(rt) == pytest.approx(4.0 / 3.0)
    assert l2_capacity(rt) == pytest.approx(0.75)


def test_critical_level_resistances_grow_linearly_with_depth() -> None:
    params = IsingParams.critical(2)

    for m in (1, 3, 6):
        rt = level_resistances(TreeShape(2, m), params.theta)
        assert effective_resistance(rt) == pytest.approx(float(m))
        assert l2_capacity(rt) == pytest.approx(1.0 / m)


def test_level_resistances_of_an_inner_ball_restart_at_its_root() -> None:
    shape = TreeShape(3, 4)
    theta = IsingParams.near_critical(3, 0.5).theta

    inner = level_resistances(shape, theta, root=2, depth=2)

    assert inner.n == 1 + 3 + 9
    assert inner.resistances[1] == pytest.approx(theta**-2)
    assert inner.resistances[4] == pytest.approx(theta**-4)


@pytest.mark.parametrize("epsilon", [0.01, 0.1, 0.5])
def test_capacity_closed_form_matches_reduction(epsilon: float) -> None:
    params = IsingParams.near_critical(2, epsilon)

    for m in (1, 4, 10):
        rt = level_resistances(TreeShape(2, m), params.theta)
        assert l2_capacity(rt) == pytest.approx(near_critical_capacity_bound(epsilon, m), rel=1e-10)


def test_kirchhoff_agrees_with_reduction_on_random_trees() -> None:
    rng = np.random.default_rng(5)
    for _ in range(5):
        n = 12
        parents = [-1] + [int(rng.integers(0, i)) for i in range(1, n)]
        resistances = np.concatenate([[0.0], rng.uniform(0.1, 5.0, n - 1)])
        rt = ResistorTree.from_resistances(parents, resistances)
        assert effective_resistance_kirchhoff(rt) == pytest.approx(effective_resistance(rt))


def test_log_domain_reduction_handles_huge_resistances() -> None:
    rt = ResistorTree([-1, 0, 0], [0.0, 700.0, 700.0])

    assert log_effective_resistance(rt) == pytest.approx(700.0 - math.log(2.0))
    assert math.isfinite(effective_resistance(rt))


def test_nash_williams_is_exact_on_symmetric_level_networks() -> None:
    rt = level_resistances(TreeShape(2, 5), IsingParams.near_critical(2, 0.2).theta)

    cutsets = level_cutsets(rt)

    assert len(cutsets) == 5
    assert nash_williams_bound(rt, cutsets) == pytest.approx(effective_resistance(rt))


def test_nash_williams_is_a_lower_bound_and_validates_cutsets() -> None:
    rt = _small_tree()

    assert nash_williams_bound(rt, level_cutsets(rt)) == pytest.approx(2.0 / 3.0)
    with pytest.raises(ValueError, match="does not separate"):
        nash_williams_bound(rt, [[1]])
    with pytest.raises(ValueError, match="overlaps"):
        nash_williams_bound(rt, [[1, 2], [2, 3]])
    with pytest.raises(ValueError, match="empty"):
        nash_williams_bound(rt, [[]])


def test_uniform_flow_has_unit_strength_and_respects_capacity() -> None:
    rt = level_resistances(TreeShape(3, 3), IsingParams.critical(3).theta)

    report = validate_flow(rt, uniform_split_flow(rt))

    assert report.strength == pytest.approx(1.0)
    assert report.voltage == pytest.approx(effective_resistance(rt))
    assert report.feasible
    assert report.within_capacity


def test_validate_flow_reports_conservation_violations() -> None:
    rt = _small_tree()

    report = validate_flow(rt, {1: 1.0, 2: 0.0, 3: 0.5})

    assert not report.feasible
    assert report.conservation_violations == {1: pytest.approx(0.5)}


def test_resistor_tree_validation() -> None:
    with pytest.raises(ValueError, match="root"):
        ResistorTree([0, 0], [0.0, 1.0])
    with pytest.raises(ValueError, match="smaller index"):
        ResistorTree([-1, 2, 0], [0.0, 1.0, 1.0])
    with pytest.raises(ValueError, match="positive"):
        ResistorTree.from_resistances([-1, 0], [0.0, 0.0])
    with pytest.raises(ValueError, match="theta"):
        level_resistances(TreeShape(2, 2), 0.0)


@pytest.mark.parametrize("seed", range(50))
def test_raising_one_resistance_never_lowers_the_effective_resistance(seed: int) -> None:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 13))
    parents = [-1] + [int(rng.integers(0, i)) for i in range(1, n)]
    rt = ResistorTree.from_resistances(parents, [0.0, *rng.uniform(0.1, 5.0, size=n - 1)])
    edge = int(rng.integers(1, n))

    raised = rt.with_resistance(edge, rt.resistances[edge] * (1.0 + rng.exponential()))

    assert effective_resistance(raised) >= effective_resistance(rt) * (1.0 - 1e-12)
    assert effective_resistance_kirchhoff(raised) >= effective_resistance_kirchhoff(rt) * (
        1.0 - 1e-9
    )
