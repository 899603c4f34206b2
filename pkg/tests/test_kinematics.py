from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from swimctl.checks import swirl_map
from swimctl.errors import VolumeError
from swimctl.kinematics import (
    RigidState,
    _expm_skew,
    assemble_bundle,
    cofactor,
    identity_bundle,
    integrate_rotation,
    piola_residual,
    rotation2,
    skew,
)
from swimctl.mesh import Space, build_disk_in_disk_mesh

finite = st.floats(-3, 3, allow_nan=False)


def minors_cofactor(a):
    """Signed minors, straight from the definition."""
    d = len(a)
    out = np.empty_like(a)
    for i in range(d):
        for j in range(d):
            m = np.delete(np.delete(a, i, 0), j, 1)
            out[i, j] = (-1) ** (i + j) * np.linalg.det(m)
    return out


def test_cofactor_examples():
    assert np.array_equal(cofactor(np.eye(2)), np.eye(2))
    a, b, c, d = 1.5, -2.0, 0.25, 3.0
    assert np.array_equal(cofactor(np.array([[a, b], [c, d]])), np.array([[d, -c], [-b, a]]))
    assert np.allclose(cofactor(np.diag([2.0, 3.0, 4.0])), np.diag([12.0, 8.0, 6.0]), atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(arrays(float, (3, 3), elements=finite))
def test_cofactor_matches_minors(a):
    assert np.allclose(cofactor(a), minors_cofactor(a), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(arrays(float, (2, 2), elements=finite), arrays(float, (3, 3), elements=finite))
def test_cofactor_transpose_is_adjugate(a2, a3):
    for a in (a2, a3):
        det = np.linalg.det(a)
        if abs(det) < 1e-3:
            continue
        assert np.allclose(cofactor(a).T, det * np.linalg.inv(a), atol=1e-8 * max(1, np.abs(a).max() ** 2))


@settings(max_examples=50, deadline=None)
@given(arrays(float, (3, 3), elements=finite), arrays(float, (3, 3), elements=finite))
def test_cofactor_multiplicative(a, b):
    scale = max(1.0, np.abs(a).max() ** 2 * np.abs(b).max() ** 2)
    assert np.allclose(cofactor(a @ b), cofactor(a) @ cofactor(b), atol=1e-10 * scale)


def test_skew_examples():
    # displayed matrix of the rotation generator
    assert np.array_equal(skew([0.0, 0.0, 1.0]), np.array([[0, -1, 0], [1, 0, 0], [0, 0, 0]], dtype=float))
    assert np.array_equal(skew([0.0, 0.0, 0.0]), np.zeros((3, 3)))


@settings(max_examples=50, deadline=None)
@given(arrays(float, 3, elements=finite), arrays(float, 3, elements=finite))
def test_skew_is_cross_product(w, v):
    cross = np.array([w[1] * v[2] - w[2] * v[1], w[2] * v[0] - w[0] * v[2], w[0] * v[1] - w[1] * v[0]])
    assert np.allclose(skew(w) @ v, cross, atol=1e-12)
    assert np.array_equal(skew(w), -skew(w).T)


def test_zero_rate_gives_identity():
    assert np.array_equal(integrate_rotation(np.zeros(50), 0.7, 0.1), np.broadcast_to(np.eye(2), (50, 2, 2)))
    assert np.allclose(integrate_rotation(np.zeros((50, 3)), 0.7, 0.1), np.eye(3), atol=0)


@pytest.mark.parametrize("dim", [2, 3])
def test_quarter_turn(dim):
    lam, n = 0.4, 400
    dt = (np.pi / 2) / n
    t = dt * np.arange(n + 1)
    w = np.exp(lam * t)  # physical rate 1 about e3
    R = integrate_rotation(w if dim == 2 else np.outer(w, [0, 0, 1.0]), lam, dt)[-1]
    exact = rotation2(np.pi / 2)
    got = R if dim == 2 else R[:2, :2]
    assert np.max(np.abs(got - exact)) < dt**2


def test_rotation_error_is_second_order():
    lam, T = 0.5, 1.0
    errs = []
    for n in (20, 40, 80):
        dt = T / n
        t = dt * np.arange(n + 1)
        w = np.cos(3 * t) * np.exp(lam * t)  # physical rate cos 3t, angle sin(3T)/3
        errs.append(abs(np.arctan2(*integrate_rotation(w, lam, dt)[-1][[1, 0], 0]) - np.sin(3 * T) / 3))
    assert errs[0] / errs[1] == pytest.approx(4, rel=0.05)
    assert errs[1] / errs[2] == pytest.approx(4, rel=0.05)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**16), lam=st.floats(0, 2))
def test_rotations_stay_orthogonal(seed, lam):
    w = np.random.default_rng(seed).normal(size=(2000, 3)) * 5
    R = integrate_rotation(w, lam, 0.01)
    assert np.max(np.abs(np.einsum("kji,kjl->kil", R, R) - np.eye(3))) < 1e-10
    assert np.max(np.abs(np.linalg.det(R) - 1)) < 1e-10


def test_expm_skew_matches_series():
    from scipy.linalg import expm

    for w in ([0.3, -0.2, 1.1], [1e-10, 0, 0], [0, 0, 0]):
        assert np.allclose(_expm_skew(np.array(w)), expm(skew(w)), atol=1e-14)


def test_rigid_state_validates():
    RigidState(np.zeros(2), 0.0, np.zeros(2), rotation2(0.3))
    with pytest.raises(ValueError):
        RigidState(np.zeros(2), 0.0, np.zeros(2), 1.01 * np.eye(2))


def test_identity_bundle(fluid_space):
    b = identity_bundle(fluid_space)
    assert np.allclose(b.grad_X, np.eye(2), atol=1e-13)
    assert np.allclose(b.grad_Y, np.eye(2), atol=1e-13)
    assert np.abs(b.lap_Y).max() < 1e-12
    assert piola_residual(b) < 1e-12


def test_rigid_map_is_gradient_trivial(fluid_space):
    h, R = np.array([0.3, -0.1]), rotation2(0.7)
    X = fluid_space.nodes @ R.T + h
    b = assemble_bundle(fluid_space, X, h=h, R=R)
    assert np.allclose(b.X_tilde, fluid_space.nodes, atol=1e-14)
    assert np.allclose(b.grad_X, np.eye(2), atol=1e-12)
    assert np.allclose(b.grad_Y, np.eye(2), atol=1e-12)


def test_swirl_inverse(fluid_space):
    X = swirl_map(fluid_space.nodes, 0.2, 1.5)
    exact = assemble_bundle(fluid_space, X, inverse="exact", vol_tol=1.0)
    assert exact.inverse_error < 1e-8
    cof = assemble_bundle(fluid_space, X, vol_tol=1.0)
    # the cofactor inverse is off by exactly the determinant defect
    assert cof.inverse_error == pytest.approx(cof.det_error, rel=1e-6)


def test_non_unimodular_raises(fluid_space):
    with pytest.raises(VolumeError):
        assemble_bundle(fluid_space, 1.1 * fluid_space.nodes)


def test_affine_piola(fluid_space):
    A = np.array([[1.0, 0.3], [0.0, 1.0]])
    b = assemble_bundle(fluid_space, fluid_space.nodes @ A.T + [0.05, 0.0])
    assert piola_residual(b) < 1e-12


def test_piola_converges():
    vals = []
    for h in (0.3, 0.15, 0.075):
        sp_ = Space(build_disk_in_disk_mesh(0.5, 1.5, h))
        vals.append(piola_residual(assemble_bundle(sp_, swirl_map(sp_.nodes, 0.2, 1.5), vol_tol=1.0)))
    assert vals[0] / vals[1] >= 2 and vals[1] / vals[2] >= 2
