import json
import math

import numpy as np
import pytest

from orbitprivacy.orbital import OrbitalElements, kepler_to_cartesian
from orbitprivacy.scenario import (
    FIXTURES,
    ScenarioError,
    StageError,
    fixture_path,
    load_scenario,
    main,
    parse_scenario,
    run,
    with_overrides,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

TOY = """
name = "toy"
mode = "utility"

[orbit]
gravity = "two_body"
[orbit.elements]
a = 7000.0
e = 0.001
i = 45.0
raan = 10.0
argp = 20.0
f = 30.0

[init_uncertainty]
parameter = "a"
sigma_fraction = 0.01

[filter.ukf]

[window]
horizon = 0.0

[sensors]
times = [0]
components = [0, 1, 2]
noise_variance = 0.01

[[utility]]
time = 0
components = [0, 1, 2]
gamma = GAMMA
"""


def _toy(tmp_path, gamma="1e9", **edits):
    text = TOY.replace("GAMMA", gamma)
    for old, new in edits.items():
        text = text.replace(old, new)
    path = tmp_path / "toy.toml"
    path.write_text(text)
    return path


def _raw(name):
    with open(fixture_path(name), "rb") as fh:
        return tomllib.load(fh)


# --- loading ----------------------------------------------------------------

def test_fixture_1orbit_sites():
    s = load_scenario("iss_1orbit")
    assert s.sites == (0.0, 1600.0, 1900.0, 3400.0, 5100.0)
    assert s.orbit_period == 6000.0
    assert s.filter_kind == "ukf"
    assert [c.time for c in s.utility] == [900.0, 2400.0]


def test_fixture_5orbit_sites():
    s = load_scenario("iss_5orbit")
    T = s.orbit_period
    fracs = (0.0, 0.15, 0.82, 1.65, 3.32, 4.15, 4.98)
    assert len(s.sites) == 7
    assert s.sites == pytest.approx([f * T for f in fracs], abs=1e-9)
    assert [c.time for c in s.utility] == pytest.approx([0.48 * T, 4.82 * T])
    assert [c.time for c in s.privacy] == pytest.approx([2.48 * T])


def test_fixture_listing():
    assert set(FIXTURES) == {"iss_1orbit", "iss_5orbit"}
    with pytest.raises(KeyError):
        fixture_path("nope")


def test_missing_mode_rejected():
    raw = _raw("iss_1orbit")
    del raw["mode"]
    with pytest.raises(ScenarioError) as exc:
        parse_scenario(raw)
    assert exc.value.field == "mode"


def test_unknown_key_rejected():
    raw = _raw("iss_1orbit")
    raw["window"]["horizn"] = 10.0
    with pytest.raises(ScenarioError) as exc:
        parse_scenario(raw)
    assert exc.value.field == "window.horizn"


def test_bad_value_names_field():
    raw = _raw("iss_1orbit")
    raw["utility"][0]["gamma"] = -1.0
    with pytest.raises(ScenarioError) as exc:
        parse_scenario(raw)
    assert exc.value.field == "utility[0].gamma"


def test_mode_needs_constraints():
    raw = _raw("iss_1orbit")
    raw["mode"] = "privacy_aware"
    del raw["privacy"][0]["fraction_of_prior"]
    with pytest.raises(ScenarioError):
        parse_scenario(raw)


def test_off_grid_time_lists_neighbours():
    raw = _raw("iss_1orbit")
    raw["utility"][0] = {"time": 950.5, "components": [0, 1, 2], "gamma": 1.0}
    with pytest.raises(ScenarioError) as exc:
        parse_scenario(raw)
    assert "950.0" in str(exc.value) and "951.0" in str(exc.value)


def test_defaults_recorded(tmp_path):
    s = load_scenario(_toy(tmp_path))
    assert "filter.ukf.alpha" in s.defaults_applied
    assert "window.dt" in s.defaults_applied
    assert s.ukf.alpha == 1e-3 and s.ukf.beta == 2.0 and s.ukf.kappa == 0.0


def test_overrides():
    s = with_overrides(load_scenario("iss_1orbit"), mode="utility", filter_kind="enkf", seed=7, tol=1e-7)
    assert (s.mode, s.filter_kind, s.seed, s.tol) == ("utility", "enkf", 7, 1e-7)
    assert s.enkf.n == 100
    with pytest.raises(ScenarioError):
        with_overrides(s, mode="bogus")


# --- pipeline ---------------------------------------------------------------

def test_zero_horizon_echoes_initial_traces(tmp_path):
    s = load_scenario(_toy(tmp_path))
    report = run(s, tmp_path / "out")
    assert report.status == "optimal"
    # position is linear in a, so its spread is exactly 1 % of |r|
    r0 = kepler_to_cartesian(OrbitalElements(7000.0, 0.001, *np.radians([45.0, 10.0, 20.0, 30.0]))).position
    assert report.grid.tolist() == [0.0]
    assert report.prior_sqrt[0] == pytest.approx(0.01 * np.linalg.norm(r0), rel=1e-6)
    # the bound is slack, so nothing is shared and the posterior is the prior
    assert report.posterior_sqrt[0] == pytest.approx(report.prior_sqrt[0], rel=1e-9)
    assert report.utility_traces[0] == pytest.approx(report.prior_sqrt[0] ** 2, rel=1e-9)


def test_infeasible_run_still_reports(tmp_path):
    s = load_scenario(_toy(tmp_path, gamma="1e-12", **{"noise_variance = 0.01": "noise_variance = 1.0"}))
    report = run(s, tmp_path / "out")
    assert report.status == "infeasible"
    assert report.exit_code == 2
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["status"] == "infeasible"
    assert "floor" in summary["message"]


def test_privacy_report_matches_result(tmp_path):
    block = '\n[[privacy]]\ntime = 0\ncomponents = [0, 1, 2]\nfraction_of_prior = 0.5\n'
    path = _toy(tmp_path, **{'mode = "utility"': 'mode = "privacy"'})
    path.write_text(path.read_text() + block)
    report = run(load_scenario(path))
    assert report.status == "optimal"
    assert report.utility_gammas == (None,)
    # designs are polished onto the bound itself, leaving the tolerance as headroom
    (t,), (g,) = report.privacy_traces, report.privacy_gammas
    assert t >= g
    assert t == pytest.approx(report.result.achieved_privacy[0], rel=1e-12)


def test_stage_error_is_tagged(tmp_path, monkeypatch):
    import orbitprivacy.scenario as sc

    def boom(*a, **k):
        raise RuntimeError("solver exploded")

    monkeypatch.setattr(sc, "max_noise_for_utility", boom)
    with pytest.raises(StageError) as exc:
        run(load_scenario(_toy(tmp_path)))
    assert exc.value.stage == "synthesis"


def test_report_files_and_columns(tmp_path):
    out = tmp_path / "out"
    report = run(load_scenario("iss_1orbit"), out, dump_problem=True)
    assert report.status == "optimal"
    prec = (out / "precisions.csv").read_text().splitlines()
    assert prec[0] == "site,axis,precision,noise_variance"
    assert len(prec) == 1 + 5 * 3
    post = (out / "posterior_trace.csv").read_text().splitlines()
    assert post[0] == "time_s,sqrt_trace_km,prior_sqrt_trace_km"
    assert len(post) == 1 + len(report.grid)
    assert (out / "convergence.csv").read_text().splitlines()[0] == "iter,gamma,delta"
    assert (out / "problem_dump.txt").stat().st_size > 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["metadata"]["versions"]["numpy"] == np.__version__
    # 17 significant digits round-trip exactly
    row = prec[-1].split(",")
    assert float(row[2]) == report.site_precision[-1, -1]
    for u, g in zip(summary["utility"], report.utility_gammas):
        assert u["trace"] <= g + 1e-6
        assert u["sqrt_trace"] == pytest.approx(math.sqrt(u["trace"]))


def test_same_seed_gives_identical_csv(tmp_path):
    s = with_overrides(load_scenario("iss_1orbit"), filter_kind="enkf", seed=11)
    run(s, tmp_path / "a")
    run(s, tmp_path / "b")
    for name in ("precisions.csv", "posterior_trace.csv", "convergence.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_different_seed_changes_prior():
    s = load_scenario("iss_1orbit")
    a = run(with_overrides(s, filter_kind="enkf", seed=1))
    b = run(with_overrides(s, filter_kind="enkf", seed=2))
    assert not np.array_equal(a.prior_sqrt, b.prior_sqrt)


# --- command line -----------------------------------------------------------

def test_cli_exit_ok(tmp_path, capsys):
    assert main(["run", "--scenario", str(_toy(tmp_path)), "--out", str(tmp_path / "o")]) == 0
    assert "status: optimal" in capsys.readouterr().out


def test_cli_exit_infeasible(tmp_path):
    path = _toy(tmp_path, gamma="1e-12", **{"noise_variance = 0.01": "noise_variance = 1.0"})
    assert main(["run", "--scenario", str(path), "--out", str(tmp_path / "o")]) == 2


def test_cli_exit_error(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text('mode = "utility"\n')
    assert main(["run", "--scenario", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "error:" in capsys.readouterr().err
    assert main(["run", "--scenario", str(tmp_path / "missing.toml"), "--out", str(tmp_path / "o")]) == 1


def test_cli_mode_override(tmp_path):
    path = _toy(tmp_path)
    assert main(["run", "--scenario", str(path), "--out", str(tmp_path / "o"), "--mode", "precision"]) == 0
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["scenario"]["mode"] == "precision"


def test_cli_rejects_unknown_flag(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["run", "--scenario", "x", "--out", "y", "--bogus"])
    assert exc.value.code == 1
