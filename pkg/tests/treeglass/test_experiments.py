import math

import pytest

from src.treeglass.config import build_config
from src.treeglass.constants import COMMANDS
from src.treeglass.errors import ConfigError, InequalityViolation
from src.treeglass.experiments import (
    COMMAND_HANDLERS,
    cmd_blockdyn,
    cmd_capacity,
    cmd_censoring,
    cmd_exact_gap,
    cmd_lemma_scan,
    cmd_spatial_mixing,
    cmd_speedup,
    cmd_sweep_beta,
    cmd_sweep_height,
    cmd_tmix,
    run_experiment,
    transition_slope,
)


def test_every_command_has_a_handler() -> None:
    assert set(COMMAND_HANDLERS) == set(COMMANDS)


def test_exact_gap_over_boundaries() -> None:
    config = build_config("exact-gap", {"h": 1, "boundaries": ["free", "plus"]})

    frame = cmd_exact_gap(config).frame

    assert frame["boundary"].tolist() == ["free", "plus"]
    assert frame["states"].tolist() == [8, 2]
    assert (frame["gap_discrete"] > 0.0).all()
    assert frame["method"].tolist() == ["exact-dense", "exact-dense"]


def test_sweep_height_slope_of_the_closed_form_is_two() -> None:
    config = build_config("sweep-height", {"heights": [1, 2, 3, 4, 6], "exact_max_h": 2})

    result = cmd_sweep_height(config)

    assert result.summary["slope_closed_form"] == pytest.approx(2.0)
    assert result.frame["method"].tolist() == ["exact", "exact"] + ["variational"] * 3
    exact = result.frame[result.frame["method"] == "exact"]
    assert exact["gap_holds"].all()
    assert exact["var_g"].to_numpy() == pytest.approx(exact["var_g_enumerated"].to_numpy())


def test_sweep_beta_fits_c1_on_the_first_exact_row() -> None:
    config = build_config("sweep-beta", {"h": 2, "epsilons": [0.0, 0.2]})

    result = cmd_sweep_beta(config)

    assert result.summary["c1"] > 0.0
    assert result.frame["gap_holds"].all()
    assert bool(result.frame["lower_formula_holds"].iloc[0])
    assert result.frame["upper_branch"].tolist() == ["small", "small"]
    assert result.summary["transition_slope"] == pytest.approx(transition_slope())
    assert result.summary["lower_formula_holds"] == bool(
        result.frame["lower_formula_holds"].all()
    )


def test_sweep_beta_marks_the_fitted_check_on_every_row() -> None:
    config = build_config("sweep-beta", {"h": 3, "epsilons": [0.0, 0.3], "exact_max_h": 2})

    result = cmd_sweep_beta(config)

    assert result.frame["lower_formula_holds"].isna().all()
    assert result.frame["method"].tolist() == ["variational", "variational"]
    assert result.summary["c1"] is None
    assert result.summary["lower_formula_holds"] is None


def test_transition_slope_approaches_log_one_plus_epsilon_over_epsilon() -> None:
    slope = transition_slope()

    assert slope == pytest.approx(math.log(1.05) / 0.05, rel=1e-9)


def test_spatial_mixing_rows_per_boundary() -> None:
    config = build_config(
        "spatial-mixing", {"h": 4, "boundaries": ["free", "plus"], "hat_depth": 2}
    )

    frame = cmd_spatial_mixing(config).frame

    assert len(frame) == 6
    assert frame["delta_holds"].dropna().all()
    assert frame["m_holds"].dropna().all()


def test_spatial_mixing_needs_a_hat_depth() -> None:
    with pytest.raises(ConfigError, match="hat depth"):
        cmd_spatial_mixing(build_config("spatial-mixing", {"h": 1}))


def test_censoring_never_helps() -> None:
    config = build_config("censoring", {"h": 2, "samples": 3, "seed": 5})

    frame = cmd_censoring(config).frame

    assert len(frame) == 3
    assert frame["tv_full"].iloc[0] == pytest.approx(frame["tv_censored"].iloc[0])
    assert frame["tv_holds"].all()
    assert frame["dominates"].all() and frame["definitive"].all()
    with pytest.raises(ConfigError, match="all-plus"):
        cmd_censoring(build_config("censoring", {"start": "minus"}))


def test_blockdyn_bounds_hold_on_a_small_tree() -> None:
    config = build_config("blockdyn", {"h": 2, "ell": 1, "replicas": 20})

    row = cmd_blockdyn(config).frame.iloc[0]

    assert (row["ell"], row["r"], row["blocks"]) == (1, 1, 3)
    assert row["decomposition_holds"] and row["assembled_holds"]
    assert math.isnan(row["contraction_iota_formula"])
    assert row["stationarity_residual"] < 1e-10


def test_capacity_matches_the_closed_form() -> None:
    config = build_config("capacity", {"h": 5, "beta_mode": "epsilon", "epsilon": 0.1})

    frame = cmd_capacity(config).frame

    assert frame["depth"].tolist() == [1, 2, 3, 4, 5]
    assert frame["closed_form_holds"].all()
    assert frame["uniform_flow_within_capacity"].all()
    assert frame["effective_resistance"].to_numpy() == pytest.approx(
        frame["kirchhoff_resistance"].to_numpy()
    )


def test_speedup_survival_and_projection_rows() -> None:
    config = build_config(
        "speedup", {"h": 3, "ell": 1, "r": 2, "replicas": 200, "times": [0.25, 0.5], "seed": 3}
    )

    result = cmd_speedup(config)

    assert result.frame["kind"].tolist() == ["survival", "survival", "projection"]
    assert result.frame["holds"].all()
    assert result.summary["gap_prime"] > 0.0


def test_tmix_exact_reports_thresholds() -> None:
    config = build_config(
        "tmix", {"h": 2, "boundary": "plus", "t_max": 150, "epsilons": [0.25]}
    )

    result = cmd_tmix(config)

    assert result.summary["tmix_0.25"] is not None
    assert result.summary["monotone"]
    assert result.summary["gap"] > 0.0
    assert result.frame["t"].iloc[-1] == 150.0


def test_tmix_monte_carlo_lower_bound() -> None:
    config = build_config(
        "tmix", {"h": 2, "mode": "mc", "replicas": 100, "times": [0, 60], "trajectory": "x.txt",
                 "t_max": 14}
    )

    result = cmd_tmix(config)

    assert result.frame["method"].tolist() == ["mc", "mc"]
    assert result.frame["tv_lower"].iloc[0] > result.frame["tv_lower"].iloc[1]
    assert len(result.trajectory) == 2


def test_lemma_scan_holds_by_default_and_raises_for_a_large_kappa() -> None:
    frame = cmd_lemma_scan(build_config("lemma-scan")).frame

    assert frame["holds"].all()
    assert frame["c1"].tolist() == [1.0, 2.0, 5.0, 20.0, 100.0]
    with pytest.raises(InequalityViolation) as info:
        cmd_lemma_scan(build_config("lemma-scan", {"kappa": 5.0}))
    assert info.value.row["c1"] == 1.0


def test_run_experiment_dispatches() -> None:
    result = run_experiment(build_config("capacity", {"h": 2}))

    assert len(result.frame) == 2
