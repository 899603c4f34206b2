from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swimctl.errors import CompatibilityError, SmallDataError
from swimctl.kinematics import rotation2
from swimctl.solid import (
    DisplacementField,
    LameSolver,
    SolidModel,
    TimeGrid,
    constraint_functional,
    lame_extend,
    lame_extend_with_targets,
    linearized_constraints,
    make_admissible_from_boundary,
    project_admissible,
    smooth_boundary_data,
)

LAM = 0.9


@pytest.fixture(scope="module")
def model(coarse_mesh):
    return SolidModel(coarse_mesh, 2.0)


@pytest.fixture(scope="module")
def lame(model):
    return LameSolver(model)


@pytest.fixture(scope="module")
def grid():
    return TimeGrid(0.1, 30)


def boundary_angle(model):
    y = model.space.nodes[model.boundary_nodes]
    return np.arctan2(y[:, 1], y[:, 0])


def moments(model, phi):
    flat = np.concatenate([phi[..., 0], phi[..., 1]], axis=-1)
    return flat @ model.moments.T, flat @ model.flux


def from_displacements(model, grid, Z):
    """Weighted interval velocities reproducing nodal displacements Z (N+1, n, 2)."""
    v = np.diff(Z, axis=0) / grid.dt
    return DisplacementField(model, grid, LAM, v * np.exp(LAM * grid.t_intervals)[:, None, None])


def test_lame_zero(model, lame):
    assert np.array_equal(lame_extend(model, np.zeros((1, len(model.boundary_nodes), 2)), solver=lame), np.zeros((1, model.n, 2)))


def test_lame_tangential_side_conditions(model, lame):
    th = boundary_angle(model)
    tau = np.stack([-np.sin(th), np.cos(th)], axis=1)
    zeta = (np.sin(2 * th)[:, None] * tau)[None]
    phi = lame_extend(model, zeta, solver=lame)
    mom, flux = moments(model, phi)
    assert np.abs(mom).max() < 1e-8
    assert np.abs(flux).max() < 1e-8
    assert np.allclose(model.trace(phi), zeta)


def test_lame_rejects_flux(model, lame):
    th = boundary_angle(model)
    with pytest.raises(CompatibilityError):
        lame_extend(model, np.stack([np.cos(th), np.sin(th)], axis=1)[None], solver=lame)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**16), s=st.floats(-3, 3))
def test_lame_linear_and_conditions(seed, s, model, lame):
    r = np.random.default_rng(seed)
    nb = len(model.boundary_nodes)
    z1 = model.remove_flux(r.normal(size=(1, nb, 2)))
    z2 = model.remove_flux(r.normal(size=(1, nb, 2)))
    assert abs(model.boundary_flux(z1)[0]) < 1e-12
    p1 = lame_extend(model, z1, solver=lame)
    p2 = lame_extend(model, z2, solver=lame)
    p = lame_extend(model, z1 + s * z2, solver=lame)
    assert np.allclose(p, p1 + s * p2, atol=1e-10)
    assert np.abs(moments(model, p)[0]).max() < 1e-8


def test_lame_targets(model, lame, grid):
    N = grid.n_steps
    zero = lame_extend_with_targets(model, np.zeros((N, 2)), np.zeros(N), np.zeros(N), grid, LAM, solver=lame)
    assert np.array_equal(zero, np.zeros_like(zero))
    c = np.full(N, 0.3)
    phi = lame_extend_with_targets(model, np.zeros((N, 2)), np.zeros(N), c, grid, LAM, solver=lame)
    lin = linearized_constraints(DisplacementField(model, grid, LAM, phi))
    assert np.allclose(lin.c, c, atol=1e-8)
    assert np.abs(lin.a).max() < 1e-8 and np.abs(lin.b).max() < 1e-8
    a = np.column_stack([np.linspace(0, 1, N), np.ones(N)])
    phi = lame_extend_with_targets(model, a, np.zeros(N), np.zeros(N), grid, LAM, solver=lame)
    lin = linearized_constraints(DisplacementField(model, grid, LAM, phi))
    assert np.allclose(lin.a, a, atol=1e-8)


def test_constraints_of_zero(model, grid):
    z = DisplacementField(model, grid, LAM, np.zeros((grid.n_steps, model.n, 2)))
    assert constraint_functional(z).max_abs() == 0.0
    assert linearized_constraints(z).max_abs() == 0.0


def test_constraints_of_rotation(model, grid):
    y = model.space.nodes
    alpha = 0.3 * np.sin(grid.t)
    Z = np.stack([y @ rotation2(a).T - y for a in alpha])
    cr = constraint_functional(from_displacements(model, grid, Z))
    polar = model.inertia0 / model.rho_s
    # midpoint rule on a rotation: b_k = sin(alpha_k - alpha_{k-1}) / dt times the polar moment
    expect = np.sin(np.diff(alpha)) / grid.dt * polar
    assert np.allclose(cr.b, expect, rtol=1e-10, atol=1e-12)
    assert np.abs(cr.a).max() < 1e-12 and np.abs(cr.c).max() < 1e-12
    assert np.abs(expect).max() > 0.01


def test_constraints_of_dilation(model, grid):
    y = model.space.nodes
    eps = 0.05 * grid.t**2
    Z = eps[:, None, None] * y[None]
    cr = constraint_functional(from_displacements(model, grid, Z))
    mid = 0.5 * (eps[1:] + eps[:-1])
    expect = np.diff(eps) / grid.dt * (1 + mid) * 2 * model.area
    assert np.allclose(cr.c, expect, rtol=1e-10)
    assert np.abs(cr.a).max() < 1e-12 and np.abs(cr.b).max() < 1e-12


def test_linearization_is_first_order(model, grid):
    zeta = smooth_boundary_data(model, grid, np.random.default_rng(3))
    z = DisplacementField(model, grid, LAM, lame_extend(model, zeta))
    lin = linearized_constraints(z)
    assert lin.max_abs() < 1e-8  # extension output satisfies the linear conditions
    errs = []
    for e in (1e-2, 1e-3, 1e-4):
        ze = DisplacementField(model, grid, LAM, e * z.phi)
        fd = constraint_functional(ze)
        errs.append(np.abs(fd.per_step() / e).max())
    assert errs[0] / errs[1] == pytest.approx(10, rel=0.05)
    assert errs[1] / errs[2] == pytest.approx(10, rel=0.05)


def test_project_zero(model, grid):
    z = DisplacementField(model, grid, LAM, np.zeros((grid.n_steps, model.n, 2)))
    p, rep = project_admissible(z)
    assert np.array_equal(p.phi, z.phi)
    assert rep.kkt_residual == 0.0


def test_project_admissible_and_idempotent(model, grid):
    zeta = 1e-3 * smooth_boundary_data(model, grid, np.random.default_rng(5))
    z = DisplacementField(model, grid, LAM, lame_extend(model, zeta))
    p, rep = project_admissible(z, tol=1e-12)
    assert constraint_functional(p).max_abs() < 1e-8
    assert rep.kkt_residual < 1e-8
    again, _ = project_admissible(p, tol=1e-12)
    assert DisplacementField(model, grid, LAM, again.phi - p.phi).norm() < 2e-8
    assert np.abs(p.volume_drift()).max() < 1e-10


def test_projection_correction_is_quadratic(model, grid):
    zeta = smooth_boundary_data(model, grid, np.random.default_rng(6))
    phi0 = lame_extend(model, zeta)
    corr = []
    for s in (1e-2, 5e-3, 2.5e-3):
        z = DisplacementField(model, grid, LAM, s * phi0)
        p, _ = project_admissible(z, threshold=np.inf)
        corr.append(DisplacementField(model, grid, LAM, p.phi - z.phi).norm())
    assert corr[0] / corr[1] >= 3.5 and corr[1] / corr[2] >= 3.5


def test_threshold(model, grid):
    zeta = smooth_boundary_data(model, grid, np.random.default_rng(7))
    z = DisplacementField(model, grid, LAM, lame_extend(model, zeta))
    with pytest.raises(SmallDataError):
        project_admissible(z, threshold=0.5 * z.norm())


def test_make_admissible(model, grid):
    nb = len(model.boundary_nodes)
    X, resid, rep = make_admissible_from_boundary(model, np.zeros((grid.n_steps, nb, 2)), grid, LAM)
    assert np.array_equal(X.Z, np.zeros_like(X.Z)) and np.array_equal(resid, np.zeros_like(resid))
    th = boundary_angle(model)
    tau = np.stack([-np.sin(th), np.cos(th)], axis=1)
    prof = np.sin(np.pi * grid.t_intervals / grid.horizon)
    zeta = 2e-3 * prof[:, None, None] * (np.cos(3 * th)[:, None] * tau)[None]
    runs = [make_admissible_from_boundary(model, s * zeta, grid, LAM, threshold=np.inf) for s in (1.0, 0.5)]
    for X, _, _ in runs:
        assert np.abs(X.volume_drift()).max() < 1e-6
    disp = [np.abs(X.Z).max() for X, _, _ in runs]
    res = [np.abs(r).max() for _, r, _ in runs]
    assert disp[0] / disp[1] == pytest.approx(2, rel=0.1)
    assert res[0] / res[1] > 3.0
