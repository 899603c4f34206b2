from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swimctl.driver import (
    ClosedLoopProblem,
    CoupledTrajectory,
    apply_N,
    boundary_condition_residual,
    decay_fit,
    recover_physical,
    remark4_residuals,
    solve_nonlinear,
    trajectory_norm,
    zero_trajectory,
)
from swimctl.errors import FixedPointDiverged, SmallDataError
from swimctl.feedback import solve_nonhomogeneous_linear


def _scaled(traj: CoupledTrajectory, s: float) -> CoupledTrajectory:
    lt = traj.linear
    return CoupledTrajectory(linear=dataclasses.replace(lt, q=s * lt.q, p=s * lt.p, b=s * lt.b, c=s * lt.c, w=s * lt.w))


def test_zero_map_of_zero(problem):
    out = apply_N(problem, zero_trajectory(problem), np.zeros(problem.ops.nq))
    assert trajectory_norm(problem, out) == 0.0


def test_first_sweep_is_linear_response(problem):
    q0 = 1e-5 * problem.unstable_mode()
    out = apply_N(problem, zero_trajectory(problem), q0)
    ref = solve_nonhomogeneous_linear(problem.sys, problem.gain, None, q0, problem.grid.dt, problem.grid.n_steps)
    assert np.max(np.abs(out.linear.q - ref.q)) < 1e-14
    assert np.max(np.abs(out.linear.b - ref.b)) < 1e-14


def test_map_contracts_nearby_trajectories(problem, default_cfg):
    q0 = default_cfg.data_fraction * problem.smallness_threshold() * problem.unstable_mode()
    base = apply_N(problem, zero_trajectory(problem), q0)
    near = _scaled(base, 1.05)
    a, b = apply_N(problem, base, q0), apply_N(problem, near, q0)
    ratio = trajectory_norm(problem, a, b) / trajectory_norm(problem, base, near)
    assert ratio < 1


def test_ball_violation_raises(problem):
    params = dataclasses.replace(problem.params, ball_radius=1e-12)
    small = ClosedLoopProblem(problem.mesh, params, gain=problem.gain)
    q0 = 1e-6 * problem.unstable_mode()
    first = apply_N(small, zero_trajectory(small), q0)
    with pytest.raises(SmallDataError) as exc:
        apply_N(small, first, q0)
    assert exc.value.stage == "apply_N"


def test_zero_data_converges_in_one_sweep(problem):
    traj, rep = solve_nonlinear(problem, np.zeros(problem.ops.nq))
    assert rep.converged and rep.sweeps == 1
    assert rep.differences == [0.0]
    assert trajectory_norm(problem, traj) == 0.0


def test_small_data_converges(converged):
    _, _, rep = converged
    assert rep.converged
    assert rep.sweeps <= 10
    assert all(r < 1 for r in rep.ratios)
    assert all(b < a for a, b in zip(rep.differences, rep.differences[1:]))
    # ratios are the literal quotients of the recorded differences
    for i, r in enumerate(rep.ratios):
        assert r == rep.differences[i + 1] / rep.differences[i]


def test_converged_boundary_conditions(problem, converged):
    _, traj, _ = converged
    assert boundary_condition_residual(problem, traj) < 1e-7
    assert np.max(np.abs(remark4_residuals(problem, traj))) < 1e-8
    # no-slip on the container wall holds by construction of the coordinates
    u = traj.velocity(problem.ops, len(traj.linear.q) - 1)
    assert not np.any(u[problem.ops.ob])


def test_overload_is_reported(problem):
    q0 = 30 * problem.smallness_threshold() * problem.unstable_mode()
    with pytest.raises(FixedPointDiverged) as exc:
        solve_nonlinear(problem, q0, max_sweeps=6)
    assert exc.value.stage == "fixed_point"


def test_trajectory_norm_properties(problem, converged):
    _, traj, _ = converged
    n = trajectory_norm(problem, traj)
    assert n > 0
    assert trajectory_norm(problem, _scaled(traj, -2.0)) == pytest.approx(2 * n, rel=1e-12)
    assert trajectory_norm(problem, traj, traj) == 0.0
    other = _scaled(traj, 0.5)
    assert trajectory_norm(problem, traj, other) == pytest.approx(trajectory_norm(problem, other, traj), rel=1e-12)


def test_recover_zero_trajectory(problem):
    ph = recover_physical(problem, zero_trajectory(problem))
    assert not np.any(ph.h) and not np.any(ph.h_prime) and not np.any(ph.energy)
    assert np.allclose(ph.R, np.eye(2))
    assert np.allclose(ph.positions, problem.space.nodes)
    assert not np.any(ph.velocities)


def test_recovered_energy_decays(problem, converged):
    _, traj, _ = converged
    ph = recover_physical(problem, traj, with_fields=False)
    lam = problem.params.lam
    assert ph.fit["slope"] <= -2 * lam * 0.8
    assert np.allclose(ph.energy, np.exp(-2 * lam * ph.t) * ph.weighted_energy)
    for R in ph.R:
        assert np.allclose(R @ R.T, np.eye(2), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 5.0), st.floats(0.5, 3.0), st.floats(1e-3, 1e3))
def test_decay_fit_recovers_rate(rate, lam, scale):
    t = np.linspace(0, 10 / lam, 201)
    fit = decay_fit(t, scale * np.exp(-2 * rate * t), lam)
    assert fit["lam_fit"] == pytest.approx(rate, rel=1e-9)
    assert fit["relative_deviation"] == pytest.approx((rate - lam) / lam, rel=1e-8, abs=1e-9)


def test_decay_fit_without_samples_is_nan():
    fit = decay_fit(np.array([0.0, 0.1]), np.array([1.0, 0.5]), 1.0)
    assert np.isnan(fit["slope"])
