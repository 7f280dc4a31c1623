import numpy as np
import pytest
import yaml

from autoscvx.discretize import discretize
from autoscvx.ocp import (
    ConfigError, GuessError, MissionConfig, TerminalSpec, build_reentry_problem, config_from_dict,
    config_to_dict, evaluate_nonconvex_residuals, initial_guess, nfz_tolerance,
)
from autoscvx.vehicle import DEG, ControlMode


def test_example_a_census(spec_a):
    assert spec_a.n_z == 319
    assert spec_a.n_eq == 5
    assert spec_a.n_ineq == (3 + 2) * 40
    labels = spec_a.partition.labels_h
    assert "terminal_speed" not in labels
    assert set(labels) == {f"terminal_{n}" for n in ("altitude", "longitude", "latitude", "flight_path", "heading")}


def test_example_b_altitude_becomes_interval(spec_a, spec_b):
    assert spec_b.n_eq == 4
    assert "terminal_altitude" not in spec_b.partition.labels_h
    assert spec_b.partition.labels_g[:2] == ("terminal_altitude_lo", "terminal_altitude_hi")
    assert spec_b.n_ineq == 2 + (3 + 2) * 40 + 2 * 40
    assert spec_b.n_z == (6 + 2) * 40 + 39
    scale = spec_b.model.scales.length_scale
    (i, lo, hi), = spec_b.terminal_int
    assert i == 0
    assert lo == pytest.approx(1 + 15e3 / scale)
    assert hi == pytest.approx(1 + 35e3 / scale)


def test_partition_is_complete_and_disjoint(spec_a, spec_b):
    for spec in (spec_a, spec_b):
        part = spec.partition
        masks = part.masks()
        total = masks["eq"].astype(int) + masks["ineq"] + masks["direct"]
        assert np.all(total == 1)
        N, nu = spec.N, spec.n_u
        direct = 6 + 1 + 6 * (N - 1) + nu * N + nu * (N - 1) + (N - 1) + 1 + 4 * (N - 1)
        assert part.n_direct == direct
        assert part.n_rows == direct + spec.n_eq + spec.n_ineq
        assert len(part.labels_h) == spec.n_eq and len(part.labels_g) == spec.n_ineq
        blocks = {b.name: b.target for b in part.blocks}
        assert blocks["dynamics"] == "direct"
        assert blocks["terminal_equality"] == "eq"
        assert blocks["path"] == "ineq"


def test_terminal_kind_only_moves_rows(config_a):
    base = build_reentry_problem(config_a)
    term = list(config_a.terminal)
    term[4] = TerminalSpec("interval", lo=-12.0, hi=-8.0)
    moved = build_reentry_problem(config_a.with_updates(terminal=tuple(term)))
    assert moved.n_eq == base.n_eq - 1
    assert moved.n_ineq == base.n_ineq + 2
    assert moved.n_z == base.n_z
    term[4] = TerminalSpec("free")
    freed = build_reentry_problem(config_a.with_updates(terminal=tuple(term)))
    assert (freed.n_eq, freed.n_ineq) == (base.n_eq - 1, base.n_ineq)


def test_row_targets_default_to_feasibility_tolerances(spec_a):
    part = spec_a.partition
    sc = spec_a.model.scales
    assert part.tol_h[0] == pytest.approx(2000.0 / sc.length_scale)
    assert part.tol_h[1] == pytest.approx(2.0 * DEG)
    assert np.all(part.eps_h == part.tol_h) and np.all(part.eps_g == part.tol_g)
    heat = [j for j, lb in enumerate(part.labels_g) if lb.startswith("heat_rate")]
    assert np.allclose(part.tol_g[heat], 0.01)


def test_nfz_tolerance():
    r = 5 * DEG
    assert nfz_tolerance(r, 0.1 * DEG) == pytest.approx(r**2 - (4.9 * DEG) ** 2)
    assert nfz_tolerance(r, 0.0) == 0.0


def test_terminal_spec_parsing():
    assert TerminalSpec.parse("free").kind == "free"
    assert TerminalSpec.parse(None).kind == "free"
    assert TerminalSpec.parse(3.0) == TerminalSpec("equal", 3.0)
    assert TerminalSpec.parse({"equal": 4}) == TerminalSpec("equal", 4.0)
    assert TerminalSpec.parse({"interval": [1, 2]}) == TerminalSpec("interval", lo=1.0, hi=2.0)
    assert TerminalSpec.parse([1, 2]) == TerminalSpec("interval", lo=1.0, hi=2.0)
    for spec in (TerminalSpec("equal", 2.0), TerminalSpec("interval", lo=0.0, hi=1.0), TerminalSpec()):
        assert TerminalSpec.parse(spec.to_raw()) == spec
    with pytest.raises(ConfigError):
        TerminalSpec.parse({"interval": [2, 1]})
    with pytest.raises(ConfigError):
        TerminalSpec.parse("somewhere")
    with pytest.raises(ConfigError):
        TerminalSpec("equal")


def test_config_round_trip(config_a, config_b):
    for cfg in (config_a, config_b):
        again = config_from_dict(yaml.safe_load(yaml.safe_dump(config_to_dict(cfg))))
        assert again == cfg


@pytest.mark.parametrize("patch, match", [
    ({"time": {"final_min_s": 5000.0}}, "tf_min"),
    ({"terminal": {"altitude": {"interval": [35000.0, 15000.0]}}}, "lo > hi"),
    ({"surprise": 1}, "unknown"),
    ({"initial": {"altitude": 1.0, "spin": 2.0}}, "unknown"),
    ({"mode": "rocket"}, "rocket"),
    ({"nodes": 1}, "two nodes"),
    ({"initial": {"speed": -1.0}}, "speed"),
    ({"tolerances": {"feas_path": 0.0}}, "positive"),
    ({"state_bounds": {"speed": [2.0, 1.0]}}, "lo > hi"),
    ({"state_bounds": {"mood": [0.0, 1.0]}}, "unknown state"),
])
def test_config_errors(config_a, patch, match):
    raw = config_to_dict(config_a)
    for key, val in patch.items():
        if isinstance(val, dict) and isinstance(raw.get(key), dict):
            raw[key] = raw[key] | val
        else:
            raw[key] = val
    with pytest.raises(ConfigError, match=match):
        config_from_dict(raw)


def test_config_root_must_be_mapping():
    with pytest.raises(ConfigError):
        config_from_dict([1, 2])


def test_state_bounds_add_buffered_rows(config_a):
    cfg = config_a.with_updates(state_bounds=(("speed", (0.0, 8000.0)),))
    spec = build_reentry_problem(cfg)
    assert spec.n_ineq == 200 + 2 * 39
    assert spec.partition.labels_g[0] == "bound_speed_lo@1"


def test_initial_guess(spec_a, spec_b):
    for spec in (spec_a, spec_b):
        guess = initial_guess(spec)
        assert np.array_equal(guess.x[0], spec.x0)
        assert np.all(guess.u[:, 0] == spec.sigma0)
        assert guess.T == pytest.approx(np.full(39, 1700.0 / spec.model.scales.time_scale / 39))
        disc = discretize(spec.model, guess)
        assert np.max(np.abs(disc.x_prop - guess.x[1:])) <= 1e-12
    guess = initial_guess(spec_b)
    alpha = spec_b.model.alpha_profile(guess.x[:, 3])
    # a few fixed-point sweeps per interval, not an exact solve
    assert np.max(np.abs(guess.u[1:, 1] - alpha[1:])) < 1e-5


def test_guess_misses_the_target(spec_a):
    guess = initial_guess(spec_a)
    res = evaluate_nonconvex_residuals(spec_a, guess)
    miss = np.abs(res.eq) / spec_a.partition.tol_h
    assert miss[0] > 5 and miss[4] > 5


def test_guess_failure_is_reported(config_a):
    cfg = config_a.with_updates(tf_guess_s=3900.0, initial=(40e3, 0.0, 0.0, 2000.0, -30.0, 0.0))
    with pytest.raises(GuessError):
        initial_guess(cfg)


def test_residuals_at_guess(spec_a):
    guess = initial_guess(spec_a)
    res = evaluate_nonconvex_residuals(spec_a, guess)
    assert res.direct["dynamics"] <= 1e-12
    assert res.direct["initial_state"] == 0.0
    assert res.direct["time_horizon"] == 0.0
    moved = guess.copy()
    moved.x[-1, 0] = spec_a.terminal_eq[0][1] + 1000.0 / spec_a.model.scales.length_scale
    eq = spec_a.buffered_rows(moved.x, moved.u).eq
    assert eq[0] == pytest.approx(1000.0 / spec_a.model.scales.length_scale, rel=1e-12)


def test_default_config_is_bank_only():
    cfg = MissionConfig()
    assert cfg.mode is ControlMode.BANK_ONLY
    with pytest.raises(ConfigError):
        MissionConfig(step_min_s=10.0, step_max_s=5.0)
