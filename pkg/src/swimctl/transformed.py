"""Operators of the flow system rewritten on the fixed fluid domain, and its sources.

Fields: velocities are P2 nodal arrays (n, 2) on the fluid space, pressures
are P1 nodal arrays.  Operators are evaluated at quadrature points from the
cellwise P2 derivatives (``*_q`` functions) and the public operators return
the weak-form load vector ``int op(u) . phi_i``.

The boundary integrals on the solid boundary use the normal exterior to the
fluid, i.e. pointing into the solid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kinematics import TransformBundle
from .mesh import SOLID_BOUNDARY, Space, cross, perp

EYE = np.eye(2)


def _grad(space: Space, u):
    return space.grad_at_quad(u)  # [..., i, j] = d_j u_i


def _hess(space: Space, u):
    h = space.hess(u)  # (nc, i, d, e)
    return h


# ----- quadrature-point operators ---------------------------------------------


def L_q(u: np.ndarray, bundle: TransformBundle) -> np.ndarray:
    """[L u]_i = [grad u lap_Y]_i + hess(u_i) : (B B^T) with B = grad Y(X~)."""
    space = bundle.space
    gu = _grad(space, u)
    hu = _hess(space, u)
    B = bundle.grad_Y
    A = np.einsum("cqij,cqkj->cqik", B, B)
    first = np.einsum("cqij,cqj->cqi", gu, bundle.lap_Y)
    second = np.einsum("cide,cqde->cqi", hu, A)
    return first + second


def laplacian_q(u: np.ndarray, space: Space) -> np.ndarray:
    hu = _hess(space, u)
    lap = hu[:, :, 0, 0] + hu[:, :, 1, 1]
    return np.broadcast_to(lap[:, None, :], space.qweight.shape + (2,))


def M_q(u, hp, om, bundle: TransformBundle, lam: float = 0.0, t: float = 0.0) -> np.ndarray:
    """-grad u B (h' + om ^ X~ + e^{lam t} dX~/dt).

    With weighted rigid velocities the frame velocity of the map carries the
    factor e^{lam t}, so that e^{-lam t} M is the transport term of the
    weighted system.
    """
    space = bundle.space
    gu = _grad(space, u)
    w = np.asarray(hp, dtype=float) + om * perp(bundle.values) + np.exp(lam * t) * bundle.velocity
    return -np.einsum("cqij,cqjk,cqk->cqi", gu, bundle.grad_Y, w)


def N_q(u, bundle: TransformBundle, w=None) -> np.ndarray:
    """grad u B w, with w = u by default (bilinear in (w, u))."""
    space = bundle.space
    gu = _grad(space, u)
    wq = space.at_quad(u if w is None else w)
    return np.einsum("cqij,cqjk,cqk->cqi", gu, bundle.grad_Y, wq)


def G_grad_q(p, bundle: TransformBundle) -> np.ndarray:
    """B^T grad p for a P1 pressure."""
    gp = bundle.space.p1_grad(p)  # (nc, 2)
    return np.einsum("cqji,cj->cqi", bundle.grad_Y, gp)


def stress_q(u, p, bundle: TransformBundle, nu: float) -> np.ndarray:
    """nu (grad u B + B^T grad u^T) - p I at quadrature points."""
    space = bundle.space
    gu = _grad(space, u)
    B = bundle.grad_Y
    gb = np.einsum("cqij,cqjk->cqik", gu, B)
    pq = space.p1_at_quad(p)
    return nu * (gb + np.swapaxes(gb, -1, -2)) - pq[..., None, None] * EYE


# ----- public weak-form operators ---------------------------------------------


def op_L(u, bundle):
    return bundle.space.load(L_q(u, bundle))


def op_M(u, hp, om, bundle, lam=0.0, t=0.0):
    return bundle.space.load(M_q(u, hp, om, bundle, lam, t))


def op_N(u, bundle, w=None):
    return bundle.space.load(N_q(u, bundle, w))


def op_G_grad(p, bundle):
    return bundle.space.load(G_grad_q(p, bundle))


def transformed_stress(u, p, bundle, nu):
    return stress_q(u, p, bundle, nu)


# ----- sources ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SourceBundle:
    """Sources of one time step.

    ``F`` is the weak load of the volume source (n, 2), ``g`` the divergence
    data tested against P1 functions, ``G_q`` / ``G_bnd`` the field G at
    volume / solid-boundary quadrature points, ``W`` the boundary velocity
    correction on the solid-boundary nodes of the fluid space.
    """

    F: np.ndarray
    F_q: np.ndarray
    g: np.ndarray
    g_q: np.ndarray
    g_bnd: np.ndarray
    G_q: np.ndarray
    G_bnd: np.ndarray
    W: np.ndarray
    F_M: np.ndarray
    F_I: float
    inertia: float
    inertia_rate: float

    def norms(self) -> dict:
        return {
            "F": float(np.linalg.norm(self.F)),
            "g": float(np.linalg.norm(self.g)),
            "W": float(np.max(np.abs(self.W))) if self.W.size else 0.0,
            "F_M": float(np.linalg.norm(self.F_M)),
            "F_I": float(abs(self.F_I)),
        }


def G_field_q(u, bundle: TransformBundle):
    """G = (I - B) u at volume quadrature points."""
    uq = bundle.space.at_quad(u)
    return uq - np.einsum("cqij,cqj->cqi", bundle.grad_Y, uq)


def g_field_q(u, bundle: TransformBundle):
    """div G = trace(grad u (I - B)); the Piola term vanishes cell by cell."""
    gu = _grad(bundle.space, u)
    return np.einsum("cqij,cqji->cq", gu, EYE - bundle.grad_Y)


def G_boundary(u, bundle: TransformBundle):
    space = bundle.space
    ub = space.trace(u, SOLID_BOUNDARY)
    B = bundle.boundary[SOLID_BOUNDARY]["grad_Y"]
    return ub - np.einsum("mqij,mqj->mqi", B, ub)


def solid_inertia(solid_space: Space, rho_s: float, z_mid: np.ndarray, v: np.ndarray):
    """I* = rho int |X*|^2 and its rate 2 rho int X* . dX*/dt at the midpoint."""
    x = solid_space.qpoints + solid_space.at_quad(z_mid)
    vq = solid_space.at_quad(v)
    w = solid_space.qweight
    return (
        rho_s * float(np.sum(w * np.einsum("cqd,cqd->cq", x, x))),
        2.0 * rho_s * float(np.sum(w * np.einsum("cqd,cqd->cq", x, vq))),
    )


def assemble_sources(
    u,
    p,
    hp,
    om,
    bundle: TransformBundle,
    *,
    nu: float,
    lam: float,
    t: float,
    mass: float,
    inertia0: float,
    inertia: float,
    inertia_rate: float,
    om_rate: float,
    Zs_bnd: np.ndarray,
    solid_bnd_nodes: np.ndarray,
):
    """Sources of the weighted transformed system at one step.

    ``u, p, hp, om`` are the weighted unknowns the sources are evaluated on,
    ``om_rate`` the time derivative of ``om``, ``inertia`` / ``inertia_rate``
    the solid inertia and its rate, ``Zs_bnd`` the solid displacement on the
    solid-boundary nodes ``solid_bnd_nodes`` of the fluid space.
    """
    space = bundle.space
    hp = np.asarray(hp, dtype=float)
    e = np.exp(-lam * t)
    uq = space.at_quad(u)
    Fq = (
        nu * (L_q(u, bundle) - laplacian_q(u, space))
        - e * M_q(u, hp, om, bundle, lam, t)
        - e * N_q(u, bundle)
        - (G_grad_q(p, bundle) - space.p1_grad(p)[:, None, :])
        - e * om * perp(uq)
    )
    gq = g_field_q(u, bundle)
    Gq = G_field_q(u, bundle)
    Gb = G_boundary(u, bundle)
    W = np.zeros((space.n, 2))
    W[solid_bnd_nodes] = om * perp(Zs_bnd)
    # boundary terms of the rigid equations
    bd = space.boundary[SOLID_BOUNDARY]
    bb = bundle.boundary[SOLID_BOUNDARY]
    n_f = -bd["normal"][:, None, :]
    B = bb["grad_Y"]
    BmI = B - EYE
    gu = space.trace_grad(u, SOLID_BOUNDARY)
    pb = np.einsum("mqi,mi->mq", bd["p1val"], p[space.cell_p1[bd["cell"]]])
    sigma = nu * (gu + np.swapaxes(gu, -1, -2)) - pb[..., None, None] * EYE
    visc = nu * (np.einsum("mqij,mqjk->mqik", gu, BmI) + np.einsum("mqji,mqkj->mqik", BmI, gu))
    bt_n = np.einsum("mqji,mqj->mqi", B, np.broadcast_to(n_f, gu.shape[:2] + (2,)))
    bmi_t_n = np.einsum("mqji,mqj->mqi", BmI, np.broadcast_to(n_f, gu.shape[:2] + (2,)))
    t1 = np.einsum("mqij,mqj->mqi", visc, bt_n)
    t2 = np.einsum("mqij,mqj->mqi", sigma, bmi_t_n)
    w = bd["weight"]
    F_M = -mass * e * om * perp(hp) - np.einsum("mq,mqi->i", w, t1) - np.einsum("mq,mqi->i", w, t2)
    y = bd["points"]
    zs_b = np.einsum("qa,mad->mqd", bd["trace_val"], _edge_values(space, Zs_bnd, solid_bnd_nodes))
    sig_t = stress_at_boundary(u, p, bundle, nu)
    tt = np.einsum("mqij,mqj->mqi", sig_t, bt_n)
    F_I = (
        -(inertia - inertia0) * om_rate
        + lam * (inertia - inertia0) * om
        - inertia_rate * om
        - float(np.einsum("mq,mq->", w, cross(y, t1)))
        - float(np.einsum("mq,mq->", w, cross(y, t2)))
        - float(np.einsum("mq,mq->", w, cross(zs_b, tt)))
    )
    return SourceBundle(
        F=space.load(Fq),
        F_q=Fq,
        g=space.load_p1(gq),
        g_q=gq,
        g_bnd=np.einsum("mqij,mqji->mq", gu, EYE - B),
        G_q=Gq,
        G_bnd=Gb,
        W=W,
        F_M=F_M,
        F_I=F_I,
        inertia=inertia,
        inertia_rate=inertia_rate,
    )


def _edge_values(space: Space, nodal_bnd: np.ndarray, bnd_nodes: np.ndarray):
    """Values on the (a, mid, b) dofs of each solid-boundary edge."""
    full = np.zeros((space.n, 2))
    full[bnd_nodes] = nodal_bnd
    return full[space.boundary[SOLID_BOUNDARY]["dofs"]]


def stress_at_boundary(u, p, bundle: TransformBundle, nu: float):
    """Transformed stress at the solid-boundary quadrature points."""
    space = bundle.space
    bd = space.boundary[SOLID_BOUNDARY]
    gu = space.trace_grad(u, SOLID_BOUNDARY)
    B = bundle.boundary[SOLID_BOUNDARY]["grad_Y"]
    gb = np.einsum("mqij,mqjk->mqik", gu, B)
    pb = np.einsum("mqi,mi->mq", bd["p1val"], p[space.cell_p1[bd["cell"]]])
    return nu * (gb + np.swapaxes(gb, -1, -2)) - pb[..., None, None] * EYE


def compatibility_residual(G_bnd: np.ndarray, boundary_velocity: np.ndarray, space: Space) -> float:
    """Flux of G minus flux of the boundary data through the solid boundary.

    ``boundary_velocity`` is the nodal field e^{lam t} dX*/dt + W on the
    fluid space; both fluxes use the normal pointing out of the solid.
    """
    bd = space.boundary[SOLID_BOUNDARY]
    n = bd["normal"][:, None, :]
    vb = space.trace(boundary_velocity, SOLID_BOUNDARY)
    return float(np.einsum("mq,mqi,mqi->", bd["weight"], G_bnd - vb, np.broadcast_to(n, vb.shape)))


def transformed_residual(u_prev, u, p, hp_t, om_t, bundle: TransformBundle, nu: float, dt: float):
    """Weak load of du/dt - nu L u + M + N u + om ^ u + G p at the tilde level.

    ``hp_t``, ``om_t`` are the rigid velocities in the solid frame (unweighted)
    and the time derivative is the backward difference (u - u_prev) / dt.
    """
    space = bundle.space
    uq = space.at_quad(u)
    rq = (
        space.at_quad((u - u_prev) / dt)
        - nu * L_q(u, bundle)
        + M_q(u, hp_t, om_t, bundle)
        + N_q(u, bundle)
        + om_t * perp(uq)
        + G_grad_q(p, bundle)
    )
    return space.load(rq), rq


# ----- manufactured pullback check ----------------------------------------------


def _swirl(y, t, eps, outer):
    """Unimodular swirl y -> rot(theta(|y|, t)) y, theta = eps sin(t) (1 - |y|^2 / outer^2)^2."""
    r2 = np.sum(y * y, axis=-1)
    th = eps * np.sin(t) * (1 - r2 / outer**2) ** 2
    c, s = np.cos(th), np.sin(th)
    return np.stack([c * y[..., 0] - s * y[..., 1], s * y[..., 0] + c * y[..., 1]], axis=-1)


def _rigid(t):
    """Test rigid motion: h(t), h'(t), angle(t), omega(t)."""
    h = np.array([0.1 * np.sin(t), 0.05 * (1 - np.cos(t))])
    hp = np.array([0.1 * np.cos(t), 0.05 * np.sin(t)])
    ang = 0.3 * t + 0.1 * t**2
    om = 0.3 + 0.2 * t
    return h, hp, ang, om


def _flow(x, t, nu):
    """Manufactured velocity, pressure and the moving-domain momentum residual."""
    e = np.exp(-t)
    s1, c1 = np.sin(x[..., 0]), np.cos(x[..., 0])
    s2, c2 = np.sin(x[..., 1]), np.cos(x[..., 1])
    u = e * np.stack([s2, c1], axis=-1)
    p = e * c1 * s2
    gu = e * np.stack([np.stack([0 * s1, c2], -1), np.stack([-s1, 0 * s1], -1)], axis=-2)
    conv = np.einsum("...ij,...j->...i", gu, u)
    lap = -u
    gp = e * np.stack([-s1 * s2, c1 * c2], axis=-1)
    return u, p, -u + conv - nu * lap + gp


def pullback_consistency(space: Space, nu: float = 0.1, dt: float = 1e-3, t: float = 0.5, eps: float = 0.05):
    """Compare the transformed residual with the pulled-back moving-domain residual.

    A swirl deformation composed with a rigid motion moves the fluid domain;
    u, p are analytic in the lab frame.  The pulled-back fields are P2 / P1
    interpolants, time derivatives are backward differences.  Returns the
    relative error of the weak loads in the mass-dual norm.
    """
    from . import fem
    from .kinematics import assemble_bundle, rotation2
    import scipy.sparse.linalg as spla

    outer = space.mesh.outer_radius
    y = space.nodes

    def fields(tt):
        h, hp, ang, om = _rigid(tt)
        R = rotation2(ang)
        xt = _swirl(y, tt, eps, outer)
        x = h + xt @ R.T
        u, _, _ = _flow(x, tt, nu)
        pp = _flow(h + _swirl(space.mesh.vertices[space.p1_global], tt, eps, outer) @ R.T, tt, nu)[1]
        return xt, u @ R, pp, R, hp, om

    xt0, u0, _, _, _, _ = fields(t - dt)
    xt1, u1, p1, R, hp, om = fields(t)
    bundle = assemble_bundle(space, xt1, t=t, dX_dt=(xt1 - xt0) / dt, vol_tol=1.0)
    load, _ = transformed_residual(u0, u1, p1, R.T @ hp, om, bundle, nu, dt)
    # exact pulled-back residual at quadrature points
    h, _, _, _ = _rigid(t)
    xq = h + _swirl(space.qpoints, t, eps, outer) @ R.T
    _, _, res = _flow(xq, t, nu)
    exact = space.load(res @ R)
    lu = spla.splu(fem.mass(space).tocsc())
    diff = exact - load

    def dual(v):
        return float(np.sqrt(sum(v[:, k] @ lu.solve(v[:, k]) for k in range(2))))

    rel = dual(diff) / dual(exact)
    h_mesh = space.mesh.h_max
    return {
        "relative_error": rel,
        "h": h_mesh,
        "dt": dt,
        "tolerance": 5 * (h_mesh**2 + dt),
        "det_error": bundle.det_error,
    }
