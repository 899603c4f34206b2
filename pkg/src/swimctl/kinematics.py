"""Cofactors, rotations and the per-step geometric bundle of the fluid map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from . import fem
from .errors import VolumeError
from .mesh import Space


def cofactor(a: np.ndarray) -> np.ndarray:
    """Cofactor matrix, batched over leading axes; com(A)^T = det(A) A^{-1}."""
    a = np.asarray(a, dtype=float)
    d = a.shape[-1]
    if a.shape[-2:] != (d, d) or d not in (2, 3):
        raise ValueError(f"cofactor needs 2x2 or 3x3 matrices, got {a.shape[-2:]}")
    if d == 2:
        out = np.empty_like(a)
        out[..., 0, 0] = a[..., 1, 1]
        out[..., 0, 1] = -a[..., 1, 0]
        out[..., 1, 0] = -a[..., 0, 1]
        out[..., 1, 1] = a[..., 0, 0]
        return out
    # rows of com A are cross products of the other two rows
    out = np.empty_like(a)
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        out[..., i, :] = np.cross(a[..., j, :], a[..., k, :])
    return out


def det2(a: np.ndarray) -> np.ndarray:
    return a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]


def skew(omega) -> np.ndarray:
    """Antisymmetric matrix with skew(w) v = w x v."""
    w = np.asarray(omega, dtype=float)
    z = np.zeros(w.shape[:-1])
    return np.stack(
        [
            np.stack([z, -w[..., 2], w[..., 1]], axis=-1),
            np.stack([w[..., 2], z, -w[..., 0]], axis=-1),
            np.stack([-w[..., 1], w[..., 0], z], axis=-1),
        ],
        axis=-2,
    )


def rotation2(theta) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], axis=-1), np.stack([s, c], axis=-1)], axis=-2)


def _expm_skew(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula for exp(skew(w))."""
    th = float(np.linalg.norm(w))
    k = skew(w)
    if th < 1e-8:
        return np.eye(3) + k + 0.5 * k @ k
    return np.eye(3) + np.sin(th) / th * k + (1 - np.cos(th)) / th**2 * (k @ k)


def integrate_rotation(omega_hat, lam: float, dt: float, t0: float = 0.0) -> np.ndarray:
    """Integrate dR/dt = e^{-lam t} R skew(omega_hat) from R(t0) = I.

    ``omega_hat`` holds samples at ``t0 + k dt``; a scalar series gives planar
    2x2 rotations, a (N, 3) series gives 3x3 rotations.  Each step multiplies
    by the exact exponential of the trapezoidal increment, so every iterate is
    orthogonal up to roundoff.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    w = np.asarray(omega_hat, dtype=float)
    t = t0 + dt * np.arange(len(w))
    phys = w * np.exp(-lam * t).reshape((-1,) + (1,) * (w.ndim - 1))
    inc = 0.5 * dt * (phys[1:] + phys[:-1])
    if w.ndim == 1:
        theta = np.concatenate([[0.0], np.cumsum(inc)])
        return rotation2(theta)
    out = np.empty((len(w), 3, 3))
    out[0] = np.eye(3)
    for k, dw in enumerate(inc):
        r = out[k] @ _expm_skew(dw)
        out[k + 1] = r
    return out


@dataclass(frozen=True)
class RigidState:
    """Weighted rigid velocities and the integrated pose at one time."""

    h_prime_hat: np.ndarray
    omega_hat: float
    h: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.R)
        if np.max(np.abs(r.T @ r - np.eye(len(r)))) > 1e-10 or abs(np.linalg.det(r) - 1) > 1e-10:
            raise ValueError("R is not a rotation")


@dataclass(frozen=True, eq=False)
class TransformBundle:
    """Geometry of the map conjugated to the solid frame, at quadrature points.

    Volume fields have shape (nc, nq, ...); ``boundary`` holds the same
    quantities at the solid-boundary edge quadrature points.
    """

    t: float
    space: Space
    X_tilde: np.ndarray  # nodal (n, 2)
    dX_dt: np.ndarray  # nodal (n, 2)
    values: np.ndarray
    grad_X: np.ndarray
    cof_grad_X: np.ndarray
    grad_Y: np.ndarray
    lap_Y: np.ndarray
    velocity: np.ndarray
    det_error: float
    boundary: dict

    @property
    def inverse_error(self) -> float:
        prod = np.einsum("...ij,...jk->...ik", self.grad_Y, self.grad_X)
        return float(np.max(np.abs(prod - np.eye(2))))


def _geometry(grad, hess, inverse):
    """grad_Y, lap_Y at points from grad (.., 2, 2) and cell Hessian (.., 2, 2, 2)."""
    cof = cofactor(grad)
    if inverse == "cofactor":
        gy = np.swapaxes(cof, -1, -2)
        # d_m of com(F)^T, linear in F: F=[[a,b],[c,d]] -> [[d,-b],[-c,a]]
        dgy = np.empty(hess.shape)
        dgy[..., 0, 0, :] = hess[..., 1, 1, :]
        dgy[..., 0, 1, :] = -hess[..., 0, 1, :]
        dgy[..., 1, 0, :] = -hess[..., 1, 0, :]
        dgy[..., 1, 1, :] = hess[..., 0, 0, :]
    elif inverse == "exact":
        gy = np.linalg.inv(grad)
        dgy = -np.einsum("...ij,...jlm,...lk->...ikm", gy, hess, gy)
    else:
        raise ValueError(f"unknown inverse mode {inverse!r}")
    # lap Y_k = sum_{j,m} d_m B_kj B_mj
    lap = np.einsum("...kjm,...mj->...k", dgy, gy)
    return cof, gy, lap


def assemble_bundle(
    space: Space,
    X_full: np.ndarray,
    h=(0.0, 0.0),
    R=None,
    t: float = 0.0,
    dX_dt: np.ndarray | None = None,
    vol_tol: float = 1e-2,
    inverse: str = "cofactor",
) -> TransformBundle:
    """Build the bundle of X~ = R^T (X - h) from nodal map values on the fluid space.

    ``dX_dt`` is the time derivative of X~ itself (already in the solid frame).
    With ``inverse="cofactor"`` the inverse gradient is com(grad X~)^T, which
    equals the inverse exactly when det = 1; ``"exact"`` uses the matrix inverse.
    """
    R = np.eye(2) if R is None else np.asarray(R, dtype=float)
    xt = (np.asarray(X_full, dtype=float) - np.asarray(h, dtype=float)) @ R
    vel = np.zeros_like(xt) if dX_dt is None else np.asarray(dX_dt, dtype=float)
    grad = space.grad_at_quad(xt)
    hess = space.hess(xt)  # (nc, k, d, e) = d_d d_e X_k
    det = det2(grad)
    det_err = float(np.max(np.abs(det - 1.0)))
    if det_err > vol_tol or np.any(det <= 0):
        raise VolumeError(f"map is not unimodular: max |det - 1| = {det_err:.3e}", det_error=det_err)
    hq = np.broadcast_to(hess[:, None], grad.shape[:2] + (2, 2, 2))
    cof, gy, lap = _geometry(grad, hq, inverse)
    bnd = {}
    for tag, b in space.boundary.items():
        bg = space.trace_grad(xt, tag)
        bh = np.broadcast_to(hess[b["cell"]][:, None], bg.shape[:2] + (2, 2, 2))
        bc, by, bl = _geometry(bg, bh, inverse)
        bnd[tag] = dict(
            values=space.trace(xt, tag),
            grad_X=bg,
            cof_grad_X=bc,
            grad_Y=by,
            lap_Y=bl,
            velocity=space.trace(vel, tag),
        )
    return TransformBundle(
        t=t,
        space=space,
        X_tilde=xt,
        dX_dt=vel,
        values=space.at_quad(xt),
        grad_X=grad,
        cof_grad_X=cof,
        grad_Y=gy,
        lap_Y=lap,
        velocity=space.at_quad(vel),
        det_error=det_err,
        boundary=bnd,
    )


def identity_bundle(space: Space, t: float = 0.0) -> TransformBundle:
    return assemble_bundle(space, space.nodes.copy(), t=t)


def nodal_gradient(space: Space, values: np.ndarray) -> np.ndarray:
    """Continuous recovery of the gradient: average of cell gradients at each P2 node."""
    from .mesh import p2_shape

    ref = np.array([[0, 0], [1, 0], [0, 1], [0.5, 0], [0.5, 0.5], [0, 0.5]], dtype=float)
    _, dval = p2_shape(ref)
    g = np.einsum("niv,cvd->cnid", dval, space.grad_lambda)  # (nc, node, basis, 2)
    loc = np.einsum("cnid,cik->cnkd", g, values[space.cell_dofs])
    acc = np.zeros((space.n, 2, 2))
    cnt = np.zeros(space.n)
    np.add.at(acc, space.cell_dofs, loc)
    np.add.at(cnt, space.cell_dofs, 1.0)
    return acc / cnt[:, None, None]


_stiff_cache: dict = {}


def _interior_stiffness(space: Space):
    key = id(space)
    hit = _stiff_cache.get(key)
    if hit is not None and hit[0] is space:
        return hit[1], hit[2]
    bnd = np.unique(np.concatenate([space.boundary_nodes(t) for t in space.boundary]))
    interior = np.setdiff1d(np.arange(space.n), bnd)
    k = fem.stiffness(space)[interior][:, interior].tocsc()
    lu = spla.splu(k)
    _stiff_cache.clear()
    _stiff_cache[key] = (space, interior, lu)
    return interior, lu


def piola_residual(bundle: TransformBundle) -> float:
    """Dual H^1_0 norm of the row-wise divergence of the recovered cofactor field.

    The cofactor of the nodally recovered gradient is a continuous P2 matrix
    field; its weak divergence is tested against every interior P2 function
    and measured in the norm induced by the inverse stiffness matrix.
    """
    space = bundle.space
    cof_nodes = cofactor(nodal_gradient(space, bundle.X_tilde))
    interior, lu = _interior_stiffness(space)
    total = 0.0
    for i in range(2):
        # int sum_j C_ij d_j phi  with C interpolated in P2
        cq = np.einsum("qa,caj->cqj", space.qval, cof_nodes[space.cell_dofs][:, :, i, :])
        loc = np.einsum("cq,cqaj,cqj->ca", space.qweight, space.qgrad, cq)
        r = np.bincount(space.cell_dofs.ravel(), loc.ravel(), minlength=space.n)[interior]
        total += float(r @ lu.solve(r))
    return float(np.sqrt(max(total, 0.0)))
