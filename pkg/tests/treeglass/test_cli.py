import json

import pytest

from src.treeglass.cli import main, parse_args, read_csv, sidecar_path
from src.treeglass.constants import (
    EXIT_CONFIG,
    EXIT_INEQUALITY,
    EXIT_OK,
    EXIT_SIZE_GUARD,
    SCHEMA_HEADER,
)


def test_capacity_run_writes_csv_and_sidecar(tmp_path) -> None:
    out = tmp_path / "results" / "capacity.csv"

    code = main(["capacity", "--h", "3", "--epsilon", "0.1", "--out", str(out)])

    assert code == EXIT_OK
    assert out.read_text(encoding="utf-8").splitlines()[0] == SCHEMA_HEADER
    frame = read_csv(out)
    assert frame["depth"].tolist() == [1, 2, 3]
    meta = json.loads(sidecar_path(out).read_text(encoding="utf-8"))
    assert meta["rows"] == 3
    assert meta["seed"] == 0
    assert meta["config"]["beta_mode"] == "epsilon"
    assert set(meta["versions"]) == {"numpy", "scipy", "pandas", "networkx"}


def test_flags_override_the_config_file(tmp_path) -> None:
    config = tmp_path / "exact.json"
    config.write_text(
        json.dumps({"command": "exact-gap", "h": 1, "boundaries": ["free"], "seed": 1}),
        encoding="utf-8",
    )
    out = tmp_path / "exact.csv"

    code = main(["exact-gap", "--config", str(config), "--seed", "3", "--out", str(out)])

    assert code == EXIT_OK
    assert json.loads(sidecar_path(out).read_text(encoding="utf-8"))["seed"] == 3
    assert read_csv(out)["states"].tolist() == [8]


def test_tau_file_flag_selects_the_boundary(tmp_path) -> None:
    tau = tmp_path / "tau.txt"
    tau.write_text("+\n-\n", encoding="utf-8")
    out = tmp_path / "tau.csv"

    code = main(["exact-gap", "--h", "1", "--tau-file", str(tau), "--out", str(out)])

    assert code == EXIT_OK
    assert read_csv(out)["boundary"].tolist() == ["tau:+-"]


def test_trajectory_file_for_monte_carlo_tmix(tmp_path) -> None:
    out = tmp_path / "tmix.csv"
    trajectory = tmp_path / "traj.txt"

    code = main(
        [
            "tmix", "--h", "2", "--mode", "mc", "--replicas", "5", "--t-max", "14",
            "--trajectory", str(trajectory), "--out", str(out),
        ]
    )

    assert code == EXIT_OK
    lines = trajectory.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 2
    assert all(int(line, 16) >= 0 for line in lines)
    assert len(read_csv(out)) == 15


@pytest.mark.parametrize(
    ("argv", "expected"),
    [
        (["exact-gap", "--b", "1"], EXIT_CONFIG),
        (["exact-gap", "--config", "missing.json"], EXIT_CONFIG),
        (["exact-gap", "--h", "4"], EXIT_SIZE_GUARD),
        (["lemma-scan", "--kappa", "5"], EXIT_INEQUALITY),
    ],
)
def test_exit_codes(tmp_path, argv: list[str], expected: int) -> None:
    out = tmp_path / "out.csv"

    assert main(argv + ["--out", str(out)]) == expected
    assert not out.exists()


def test_argument_errors_exit_through_argparse() -> None:
    with pytest.raises(SystemExit):
        parse_args([])
    with pytest.raises(SystemExit):
        parse_args(["exact-gap", "--beta", "0.3", "--critical"])


@pytest.mark.parametrize(
    "argv",
    [
        ["tmix", "--h", "2", "--mode", "mc", "--replicas", "20", "--t-max", "6", "--seed", "9"],
        ["censoring", "--h", "2", "--samples", "3", "--seed", "4"],
        ["speedup", "--h", "3", "--ell", "1", "--r", "2", "--replicas", "50", "--seed", "2"],
    ],
    ids=["tmix-mc", "censoring", "speedup"],
)
def test_same_config_and_seed_give_identical_csv_bytes(tmp_path, argv: list[str]) -> None:
    first = tmp_path / "first.csv"
    second = tmp_path / "second.csv"

    assert main(argv + ["--out", str(first)]) == EXIT_OK
    assert main(argv + ["--out", str(second)]) == EXIT_OK

    assert first.read_bytes() == second.read_bytes()
