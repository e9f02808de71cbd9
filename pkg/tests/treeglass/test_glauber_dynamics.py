import numpy as np
import pytest

from src.treeglass.errors import SizeGuardError
from src.treeglass.gibbs_engine import StateSpace, conditional_resample_matrix, exact_gibbs
from src.treeglass.glauber_dynamics import (
    BlockCover,
    BlockDynamics,
    ProjectionChain,
    Schedule,
    SpeedupSpec,
    block_cover_from_levels,
    block_levels,
    censored_run,
    check_kernel_size,
    coalescence_steps,
    grand_coupling_step,
    heat_bath_step,
    level_block_cover,
    resample_block,
    run_continuous,
    run_discrete,
    run_schedule,
    speedup_coupling_survival,
)
from src.treeglass.tree_model import BoundaryCondition, IsingParams, SpinConfig, TreeShape


def test_block_levels_follow_alpha() -> None:
    assert block_levels(10, 0.3) == (3, 7)
    assert block_levels(4, 0.5) == (2, 2)
    with pytest.raises(ValueError, match="alpha"):
        block_levels(10, 0.6)
    with pytest.raises(ValueError, match="too small"):
        block_levels(3, 0.25)


def test_level_block_cover_covers_the_tree() -> None:
    shape = TreeShape(2, 4)

    cover = level_block_cover(shape, 0.25)

    assert (cover.ell, cover.r) == (1, 3)
    assert len(cover) == 1 + 2
    assert cover.blocks[0] == tuple(shape.ball(0, 3))
    assert cover.covers(range(shape.n))
    assert cover.max_multiplicity(shape.n) == 2
    with pytest.raises(ValueError, match="ell"):
        block_cover_from_levels(shape, 3)


def test_speedup_spec_sets() -> None:
    shape = TreeShape(2, 3)

    spec = SpeedupSpec.leftmost(shape, 1, 2)

    assert spec.chosen == (3, 5)
    assert set(spec.blocks[3]) == {1, 3, 4, 9, 10}
    assert spec.paths[3] == (1, 3)
    assert spec.forest == frozenset({1, 2, 3, 5, 7, 8, 11, 12})
    assert spec.subforest == frozenset({3, 5, 7, 8, 11, 12})
    with pytest.raises(ValueError, match="descendant"):
        SpeedupSpec(shape, 1, 2, (3, 4))
    with pytest.raises(ValueError, match="ell < r"):
        SpeedupSpec.leftmost(shape, 2, 2)


def test_single_site_resample_matches_heat_bath() -> None:
    shape = TreeShape(2, 2)
    params = IsingParams.critical(2)
    config = SpinConfig(shape, np.array([1, -1, 1, 1, 1, -1, 1]))

    for u in (0.05, 0.3, 0.5, 0.7, 0.95):
        uniforms = np.full(shape.n, u)
        for site in range(shape.n):
            by_block = resample_block(config.spins, (site,), shape, params, uniforms)
            by_site = heat_bath_step(config, site, None, params, u)
            assert by_block.tolist() == by_site.spins.tolist()


@pytest.mark.parametrize(
    "field",
    [{0: 0.3, 4: -0.7, 5: 1.1}, np.array([0.2, -0.4, 0.0, 0.9, -1.3, 0.5, 0.1])],
    ids=["mapping", "array"],
)
def test_block_resample_root_threshold_is_the_exact_marginal_under_a_field(field) -> None:
    shape = TreeShape(2, 2)
    params = IsingParams.near_critical(2, 0.2)
    p_plus = exact_gibbs(shape, params, field=field).marginal_plus(0)
    start = np.ones(shape.n, dtype=np.int8)

    below = np.full(shape.n, 0.5)
    below[0] = p_plus - 1e-9
    above = below.copy()
    above[0] = p_plus + 1e-9

    block = tuple(range(shape.n))
    assert resample_block(start, block, shape, params, below, field=field)[0] == 1
    assert resample_block(start, block, shape, params, above, field=field)[0] == -1


def test_single_site_resample_uses_the_external_field() -> None:
    shape = TreeShape(2, 2)
    params = IsingParams.critical(2)
    config = SpinConfig(shape, np.array([1, -1, 1, 1, 1, -1, 1]))
    field = {1: 0.8, 2: -0.4}

    for u in (0.1, 0.4, 0.6, 0.9):
        uniforms = np.full(shape.n, u)
        for site in (1, 2):
            by_block = resample_block(config.spins, (site,), shape, params, uniforms, field=field)
            by_site = heat_bath_step(config, site, None, params, u, field=field[site])
            assert by_block.tolist() == by_site.spins.tolist()


def test_block_resample_draws_from_the_gibbs_conditional() -> None:
    shape = TreeShape(2, 2)
    params = IsingParams.near_critical(2, 0.3)
    boundary = BoundaryCondition.arbitrary(shape, [1, -1, -1, -1])
    table = exact_gibbs(shape, params, boundary)
    block = (0, 1, 2)
    start = SpinConfig.all_plus(shape, boundary)

    row = conditional_resample_matrix(table, block).toarray()[table.space.index_of(start)]
    rng = np.random.default_rng(2)
    counts = np.zeros(table.space.size)
    for _ in range(20_000):
        spins = resample_block(start.spins, block, shape, params, rng.random(shape.n),
                               frozen=boundary.frozen_spins(shape))
        counts[table.space.index_of(SpinConfig(shape, spins))] += 1

    assert np.allclose(counts / counts.sum(), row, atol=0.015)


def test_resample_block_rejects_vertices_outside_the_support() -> None:
    shape = TreeShape(2, 2)
    with pytest.raises(ValueError, match="support"):
        resample_block(
            np.ones(shape.n, dtype=np.int8), (0, 3), shape, IsingParams.critical(2),
            np.zeros(shape.n), support=frozenset({0, 1, 2}),
        )


def test_grand_coupling_preserves_order_and_coalesces() -> None:
    shape = TreeShape(2, 3)
    dynamics = BlockDynamics.from_cover(
        block_cover_from_levels(shape, 1), shape, IsingParams.critical(2)
    )
    rng = np.random.default_rng(4)
    top, bottom = dynamics.start(1), dynamics.start(-1)

    for _ in range(200):
        target = int(rng.integers(dynamics.rate))
        top, bottom = grand_coupling_step([top, bottom], dynamics, target, rng.random(shape.n))
        assert bottom <= top

    single = BlockDynamics.single_site(TreeShape(2, 2), IsingParams.critical(2))
    assert coalescence_steps(single, np.random.default_rng(0), 10_000) is not None


def test_block_dynamics_respects_the_boundary() -> None:
    shape = TreeShape(2, 2)
    boundary = BoundaryCondition.all_minus()
    dynamics = BlockDynamics.single_site(shape, IsingParams.critical(2), boundary)

    config, trajectory = run_discrete(dynamics, dynamics.start(1), 30, np.random.default_rng(0), 10)

    assert dynamics.rate == 3
    assert config.spins[3:].tolist() == [-1, -1, -1, -1]
    assert len(trajectory) == 3
    assert all(len(line) == 2 for line in trajectory)


def test_run_continuous_keeps_configurations_valid() -> None:
    shape = TreeShape(3, 2)
    boundary = BoundaryCondition.all_plus()
    dynamics = BlockDynamics.single_site(shape, IsingParams.critical(3), boundary)

    config = run_continuous(dynamics, dynamics.start(-1), 2.0, np.random.default_rng(1))

    assert config.spins[list(shape.leaves)].tolist() == [1] * 9


def test_speedup_dynamics_targets() -> None:
    shape = TreeShape(2, 3)
    spec = SpeedupSpec.leftmost(shape, 1, 2)

    dynamics = BlockDynamics.speedup(spec, IsingParams.critical(2))

    assert dynamics.rate == shape.n
    assert set(dynamics.targets[3]) == set(spec.blocks[3])
    assert dynamics.roots[3] == 3
    assert dynamics.targets[0] == (0,)


def test_schedule_censoring_and_validation() -> None:
    schedule = Schedule.sites([0, 1, 2, 0])

    kept = schedule.censored([False, True, False, True])

    assert kept.targets == ((0,), (2,))
    assert kept.slots == (0, 2)
    with pytest.raises(ValueError, match="mask"):
        schedule.censored([True])
    with pytest.raises(ValueError, match="slot"):
        Schedule(((0,), (1,)), slots=(0,))


def test_poisson_schedule_is_sorted() -> None:
    schedule = Schedule.poisson([(0,), (1,), (2,)], 5.0, np.random.default_rng(8))

    assert len(schedule.times) == len(schedule)
    assert list(schedule.times) == sorted(schedule.times)


def test_censored_run_without_censoring_is_the_full_run() -> None:
    shape = TreeShape(2, 2)
    params = IsingParams.critical(2)
    boundary = BoundaryCondition.free()
    schedule = Schedule.sites([0, 3, 1, 4, 2, 5, 6, 0])

    full = censored_run(shape, params, boundary, schedule)
    same = censored_run(shape, params, boundary, schedule, [False] * len(schedule))

    assert full.sum() == pytest.approx(1.0)
    assert np.allclose(full, same)
    with pytest.raises(ValueError, match="all-plus"):
        censored_run(shape, params, boundary, schedule, start=SpinConfig.all_minus(shape))


def test_censored_run_approaches_gibbs_on_long_schedules() -> None:
    shape = TreeShape(2, 2)
    params = IsingParams.critical(2)
    table = exact_gibbs(shape, params)
    schedule = Schedule.sites(list(range(shape.n)) * 60)

    dist = censored_run(shape, params, BoundaryCondition.free(), schedule, table=table)

    assert np.abs(dist - table.probs).sum() / 2.0 < 1e-6


def test_run_schedule_uses_its_slots() -> None:
    shape = TreeShape(2, 1)
    params = IsingParams.critical(2)
    uniforms = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
    schedule = Schedule(((0,), (1,)), slots=(1, 0))

    out = run_schedule(SpinConfig.all_plus(shape), schedule, None, params, uniforms)

    assert out.spins.tolist() == [-1, 1, 1]


def test_projection_chain_moves_rarely_and_couples() -> None:
    shape = TreeShape(2, 4)
    params = IsingParams.critical(2)
    cover = level_block_cover(shape, 0.5)
    chain = ProjectionChain(shape, params, BoundaryCondition.all_plus(), cover)
    eta = np.ones(len(chain.level), dtype=np.int8)

    assert chain.move_probability == pytest.approx(1.0 / 5.0)
    assert np.array_equal(chain.step_with(eta, 0.9, np.zeros(shape.n)), eta)
    a, b = chain.coupled_step(eta, eta.copy(), np.random.default_rng(0))
    assert np.array_equal(a, b)
    with pytest.raises(ValueError, match="ell"):
        ProjectionChain(shape, params, BoundaryCondition.free(), BlockCover.singletons(range(31)))


def test_check_kernel_size_guards_large_trees() -> None:
    dynamics = BlockDynamics.single_site(TreeShape(2, 4), IsingParams.critical(2))

    with pytest.raises(SizeGuardError):
        check_kernel_size(dynamics)
    small = BlockDynamics.single_site(TreeShape(2, 2), IsingParams.critical(2))
    assert check_kernel_size(small) == 7


def test_speedup_coupling_survival_decreases_from_one() -> None:
    spec = SpeedupSpec.leftmost(TreeShape(2, 3), 1, 2)

    survival, stderr = speedup_coupling_survival(
        spec, IsingParams.critical(2), [0.0, 0.5, 2.0], 300, np.random.default_rng(6)
    )

    assert survival[0] == 1.0
    assert np.all(np.diff(survival) <= 0.0)
    assert stderr.shape == (3,)


def test_state_space_of_a_forest_support() -> None:
    shape = TreeShape(2, 3)
    spec = SpeedupSpec.leftmost(shape, 1, 2)

    space = StateSpace(shape, support=spec.subforest)

    assert space.n_free == 6
    assert space.edges == ((3, 7), (3, 8), (5, 11), (5, 12))
