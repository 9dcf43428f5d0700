import numpy as np
import pytest

from odemerge.dynamics import FieldContext, rectified_velocity
from odemerge.errors import ArgumentError, NumericError
from odemerge.integrator import (IntegrationConfig, Trajectory, _step_times, dump_snapshots, integrate,
                                 integrate_with_gamma_override)
from odemerge.params import ArchDescriptor, load_checkpoint
from odemerge.tasks import FunctionOracle, QuadraticOracle


def _quad(seed=0, d=6):
    rng = np.random.default_rng(seed)
    q = QuadraticOracle(rng.standard_normal(d), rng.uniform(0.5, 4, d))
    return FieldContext.build(2 * rng.standard_normal(d), 2 * rng.standard_normal(d), q)


def test_config_validation():
    for h in (0.0, -0.1, 0.6):
        with pytest.raises(ArgumentError):
            IntegrationConfig(h)
    with pytest.raises(ArgumentError):
        IntegrationConfig(0.1, (0.5, 0.2))
    with pytest.raises(ArgumentError):
        IntegrationConfig(0.1, (0.0, 1.5))
    assert IntegrationConfig(0.1, [0, 0.5]).record_grid == (0.0, 0.5)


@pytest.mark.parametrize("t_target,h,expect", [
    (0.5, 0.25, [0.25, 0.5]),
    (0.3, 0.25, [0.25, 0.3]),
    (1 / 3, 0.05, [0.05 * i for i in range(1, 7)] + [1 / 3]),
    (0.05, 0.05, [0.05]),
    (0.01, 0.05, [0.01]),
])
def test_step_times(t_target, h, expect):
    got = _step_times(t_target, h)
    assert len(got) == len(expect) and np.allclose(got, expect, rtol=0, atol=1e-15)
    assert got[-1] == t_target


def test_scalar_linear_path_is_exact():
    q = QuadraticOracle(np.array([5.0]))
    ctx = FieldContext.build(np.zeros(1), np.ones(1), q)
    traj = integrate(ctx, 0.5, IntegrationConfig(0.25), gamma_override=1.0)
    assert traj.final[0] == 0.5 and traj.final_t == 0.5


def test_single_step_equals_one_euler_update():
    ctx = _quad(1)
    traj = integrate(ctx, 0.05, IntegrationConfig(0.05))
    v, _ = rectified_velocity(ctx, ctx.theta0, 0.0)
    assert np.array_equal(traj.final, ctx.theta0 + 0.05 * v)
    assert len(traj.diagnostics) == 1 and traj.times.tolist() == [0.0, 0.05]


@pytest.mark.parametrize("seed", range(5))
def test_terminal_jump_is_bit_exact(seed):
    ctx = _quad(seed)
    for h in (0.5, 0.3, 0.05, 0.01):
        assert np.array_equal(integrate(ctx, 1.0, IntegrationConfig(h)).final, ctx.theta1)


def test_override_one_tracks_chord():
    ctx = _quad(2)
    d = ctx.theta1 - ctx.theta0
    traj = integrate_with_gamma_override(ctx, 1.0, IntegrationConfig(0.01), 1.0)
    for t, theta in traj.snapshots:
        assert np.linalg.norm(theta - (ctx.theta0 + t * d)) <= 1e-9 * np.linalg.norm(d)


def test_override_zero_does_not_climb():
    ctx = _quad(3)
    traj = integrate_with_gamma_override(ctx, 0.5, IntegrationConfig(0.001), 0.0)
    # Euler drift along curved level sets is second order in h
    assert ctx.oracle.loss(traj.final) <= ctx.loss0 + 1e-2 * ctx.loss0


def test_rectification_is_noop_when_descending():
    q = QuadraticOracle(np.array([1.0, -1.0]))
    ctx = FieldContext.build(np.array([4.0, 3.0]), q.center, q)
    a = integrate(ctx, 0.7, IntegrationConfig(0.05))
    b = integrate(ctx, 0.7, IntegrationConfig(0.05), gamma_override=1.0)
    assert all(np.array_equal(x, y) for (_, x), (_, y) in zip(a.snapshots, b.snapshots))


def test_record_grid_interpolates_inside_step():
    ctx = _quad(4)
    full = integrate(ctx, 1.0, IntegrationConfig(0.1))
    grid = integrate(ctx, 1.0, IntegrationConfig(0.1, (0.0, 0.15, 0.5, 1.0)))
    assert grid.times.tolist() == [0.0, 0.15, 0.5, 1.0]
    snaps = dict(full.snapshots)
    assert np.allclose(grid.at(0.15), 0.5 * (snaps[0.1] + full.at(0.2)), rtol=0, atol=1e-12)
    assert np.array_equal(grid.snapshots[-1][1], ctx.theta1)
    short = integrate(ctx, 0.4, IntegrationConfig(0.1, (0.0, 0.15, 0.5, 1.0)))
    assert short.times.tolist() == [0.0, 0.15]


def test_trajectory_at_bounds():
    traj = integrate(_quad(5), 0.5, IntegrationConfig(0.25))
    with pytest.raises(ArgumentError):
        traj.at(0.75)


def test_target_validation():
    for bad in (0.0, 1.2):
        with pytest.raises(ArgumentError):
            integrate(_quad(), bad)
    with pytest.raises(ArgumentError):
        integrate(_quad(), 0.5, gamma_override=1.5)


def test_numeric_error_names_step():
    calls = {"n": 0}

    def grad(x):
        calls["n"] += 1
        return np.array([np.nan]) if calls["n"] > 3 else np.array([1.0])

    f = FunctionOracle(1, lambda x: float(x[0]), grad)
    ctx = FieldContext.build(np.zeros(1), np.ones(1), f)
    with pytest.raises(NumericError, match="step 3"):
        integrate(ctx, 0.5, IntegrationConfig(0.05))


def test_csv_and_snapshot_dump(tmp_path):
    arch = ArchDescriptor(((6,),), "tanh", 2)
    traj = integrate(_quad(6), 0.1, IntegrationConfig(0.05))
    traj.to_csv(tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "t,loss,gamma,dot_gu,align_ratio" and len(lines) == 3
    paths = dump_snapshots(traj, arch, tmp_path / "snaps")
    assert len(paths) == 3
    assert np.array_equal(load_checkpoint(paths[-1]).params, traj.final)
    assert isinstance(Trajectory().snapshots, list)
