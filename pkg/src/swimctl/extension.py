"""Volume-preserving extension of solid deformations to the fluid domain.

Three pieces: a Picard iteration on a Stokes-type divergence problem that
extends the solid map into the fluid with unit Jacobian, a cut-off rigid flow
that carries the rigid displacement and vanishes near the outer wall, and the
composition of the two.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from .errors import CompatibilityError, ExtensionDiverged, GeometryError, SolverError
from .kinematics import cofactor, det2
from .mesh import FLUID, OUTER_BOUNDARY, SOLID_BOUNDARY, Mesh, Space, p2_shape
from .solid import DisplacementField, TimeGrid


class DivergenceSolver:
    """Factored Stokes-type system: find v with prescribed boundary values and
    int q div v = int q f for every P1 q, up to a mean multiplier."""

    def __init__(self, space: Space):
        self.space = space
        n = space.n
        self.solid_nodes = space.boundary_nodes(SOLID_BOUNDARY)
        self.outer_nodes = space.boundary_nodes(OUTER_BOUNDARY)
        bnd = np.union1d(self.solid_nodes, self.outer_nodes)
        self.interior_nodes = np.setdiff1d(np.arange(n), bnd)
        self.I = fem.blocked(self.interior_nodes, n)
        self.B_idx = fem.blocked(bnd, n)
        k = fem.vector(fem.stiffness(space)).tocsr()
        b = fem.divergence(space).tocsr()
        self.div = b
        self.p1_int = fem.p1_integrals(space)
        m = self.p1_int[:, None]
        npr = space.n_p1
        big = sp.bmat(
            [
                [k[self.I][:, self.I], b[:, self.I].T, None],
                [b[:, self.I], None, sp.csr_matrix(m)],
                [None, sp.csr_matrix(m.T), None],
            ],
            format="csc",
        )
        try:
            self.lu = spla.splu(big)
        except RuntimeError as exc:
            raise SolverError(f"divergence system singular: {exc}", stage="extension") from exc
        self.k_ib = k[self.I][:, self.B_idx]
        self.b_b = b[:, self.B_idx]
        self.n_int = len(self.I)
        self.n_p = npr
        self.div_total = np.asarray(b.sum(axis=0)).ravel()

    def solve(self, boundary_values: np.ndarray, g: np.ndarray):
        """Return (v nodal (n, 2), pressure, mean multiplier)."""
        sp_ = self.space
        vb = fem.flatten(boundary_values)[self.B_idx]
        rhs = np.concatenate([-(self.k_ib @ vb), g - self.b_b @ vb, [0.0]])
        sol = self.lu.solve(rhs)
        v = np.zeros(2 * sp_.n)
        v[self.I] = sol[: self.n_int]
        v[self.B_idx] = vb
        return fem.unflatten(v, sp_.n), sol[self.n_int : self.n_int + self.n_p], sol[-1]


@dataclass
class ExtensionReport:
    sweeps: int
    update_history: list
    weak_det_defect: float
    pointwise_det_error: float
    first_sweep_defect: float
    compatibility: float
    boundary_trace_error: float


@dataclass(frozen=True, eq=False)
class FluidMapSeries:
    """Displacements Zbar = Xbar - Id on the fluid P2 nodes at every time node."""

    space: Space
    grid: TimeGrid
    Z: np.ndarray  # (N+1, n, 2)
    velocity: np.ndarray  # (N, n, 2)
    report: ExtensionReport | None = None

    @property
    def X(self) -> np.ndarray:
        return self.Z + self.space.nodes[None]


def weak_det_defect(space: Space, Z: np.ndarray) -> float:
    """max_i |int q_i (det(I + grad Z) - 1)| / int q_i over P1 hat functions."""
    f = det2(space.grad_at_quad(Z) + np.eye(2)) - 1.0
    return float(np.max(np.abs(space.load_p1(f)) / fem.p1_integrals(space)))


def pointwise_det_error(space: Space, Z: np.ndarray) -> float:
    return float(np.max(np.abs(det2(space.grad_at_quad(Z) + np.eye(2)) - 1.0)))


def extend_divergence_free(
    Xs: DisplacementField,
    space: Space | None = None,
    solver: DivergenceSolver | None = None,
    tol: float = 1e-13,
    max_sweeps: int = 20,
    cert_tol: float = 1e-8,
    compat_tol: float = 1e-6,
    sweeps: int | None = None,
) -> FluidMapSeries:
    """Extend the solid displacement to a unimodular fluid map, interval by interval.

    One sweep performs one Picard update on every interval, marching in time:
    the divergence data (I - com grad Xbar^{k-1/2}) : grad V^k uses the
    previous sweep's velocity of the interval.  The converged map satisfies
    int q (det grad Xbar - 1) = 0 for every P1 function q.  ``sweeps`` forces
    a fixed number of sweeps (used to measure the one-sweep error).
    """
    model, grid = Xs.model, Xs.grid
    if solver is None:
        space = space or Space(model.mesh, FLUID)
        solver = DivergenceSolver(space)
    space = solver.space
    n = space.n
    N = grid.n_steps
    dt = grid.dt
    fb = space.local(model.boundary_global)
    sb = model.boundary_nodes
    Vs = Xs.velocity
    scale = model.perimeter * max(float(np.abs(Vs).max()) if Vs.size else 0.0, 1e-300)
    V = np.zeros((N, n, 2))
    V[:, fb] = Vs[:, sb]
    bvals = np.zeros((n, 2))
    history = []
    first_defect = None
    compat = 0.0
    n_sweeps = sweeps if sweeps is not None else max_sweeps
    growth = 0
    s = 0
    for s in range(1, n_sweeps + 1):
        Vnew = np.empty_like(V)
        Z = np.zeros((n, 2))
        for k in range(N):
            vp = V[k]
            fmid = space.grad_at_quad(Z + 0.5 * dt * vp) + np.eye(2)
            gv = space.grad_at_quad(vp)
            f = np.einsum("cqij,cqij->cq", np.eye(2) - cofactor(fmid), gv)
            g = space.load_p1(f)
            bvals[:] = 0.0
            bvals[fb] = Vs[k, sb]
            r = float(g.sum() - solver.div_total @ fem.flatten(bvals))
            compat = max(compat, abs(r))
            if abs(r) > compat_tol * scale:
                raise CompatibilityError(
                    f"divergence data incompatible on interval {k + 1}: residual {r:.3e}",
                    stage="extension",
                    interval=k + 1,
                )
            v, _, _ = solver.solve(bvals, g)
            Vnew[k] = v
            Z = Z + dt * v
        upd = float(np.max(np.abs(Vnew - V))) if N else 0.0
        V = Vnew
        if s == 1:
            Zs = np.concatenate([np.zeros((1, n, 2)), dt * np.cumsum(V, axis=0)])
            first_defect = max(weak_det_defect(space, z) for z in Zs)
        if history and upd > history[-1]:
            growth += 1
            if growth >= 3:
                raise ExtensionDiverged(
                    f"Picard update grew three times in a row: {history[-3:] + [upd]}",
                    stage="extension",
                    history=history + [upd],
                )
        else:
            growth = 0
        history.append(upd)
        vmax = float(np.abs(V).max()) if N else 0.0
        if sweeps is None and upd <= tol * max(vmax, 1e-300):
            break
    Zs = np.concatenate([np.zeros((1, n, 2)), dt * np.cumsum(V, axis=0)])
    defect = max(weak_det_defect(space, z) for z in Zs)
    pw = max(pointwise_det_error(space, z) for z in Zs)
    trace_err = float(np.max(np.abs(Zs[:, fb] - Xs.Z[:, sb]))) if N else 0.0
    report = ExtensionReport(
        sweeps=s,
        update_history=history,
        weak_det_defect=defect,
        pointwise_det_error=pw,
        first_sweep_defect=first_defect if first_defect is not None else 0.0,
        compatibility=compat,
        boundary_trace_error=trace_err,
    )
    return FluidMapSeries(space, grid, Zs, V, report)


# ----- rigid extension ---------------------------------------------------------


@dataclass(frozen=True)
class Cutoff:
    """Quintic radial plateau: 1 for r <= r1, 0 for r >= r2, C^2 in between."""

    r1: float
    r2: float

    def _s(self, r):
        return np.clip((r - self.r1) / (self.r2 - self.r1), 0.0, 1.0)

    def value(self, r):
        s = self._s(r)
        return 1.0 - s**3 * (10.0 - 15.0 * s + 6.0 * s * s)

    def deriv(self, r):
        s = self._s(r)
        return -30.0 * s * s * (1.0 - s) ** 2 / (self.r2 - self.r1)


def _perp(v):
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def cutoff_velocity(x, h, hp, om, cutoff: Cutoff):
    """rot(xi psi) for the planar stream function psi = h' ^ (x - h) - |x - h|^2 om / 2.

    rot f = (d_2 f, -d_1 f), so that rot psi = h' + om (x - h)^perp.
    """
    r = np.linalg.norm(x, axis=-1)
    xi = cutoff.value(r)
    dxi = cutoff.deriv(r)
    rel = x - h
    psi = _cross(hp, rel) - 0.5 * np.sum(rel * rel, axis=-1) * om
    rot_psi = hp + om * _perp(rel)
    safe = np.where(r > 0, r, 1.0)
    rot_xi = (dxi / safe)[..., None] * np.stack([x[..., 1], -x[..., 0]], axis=-1)
    return xi[..., None] * rot_psi + psi[..., None] * rot_xi


def _lerp(series, k, theta):
    return (1 - theta) * series[k] + theta * series[k + 1]


def rigid_extension_flow(points, grid: TimeGrid, h_prime, omega, cutoff: Cutoff, outer_radius: float, h0=(0.0, 0.0)):
    """RK4 flow of the cut-off rigid velocity in the lab frame.

    ``h_prime`` (N+1, 2) and ``omega`` (N+1,) are physical velocities sampled
    on the time nodes and linearly interpolated in between; the centre h is
    integrated alongside the points.  Returns (positions (N+1, m, 2), h (N+1, 2)).
    """
    pts = np.array(points, dtype=float)
    hp = np.asarray(h_prime, dtype=float)
    om = np.asarray(omega, dtype=float)
    dt = grid.dt
    out = np.empty((grid.n_steps + 1,) + pts.shape)
    hs = np.empty((grid.n_steps + 1, 2))
    out[0] = pts
    h = np.array(h0, dtype=float)
    hs[0] = h

    def rhs(x, hc, k, th):
        a, w = _lerp(hp, k, th), _lerp(om, k, th)
        return cutoff_velocity(x, hc, a, w, cutoff), a

    x = pts
    for k in range(grid.n_steps):
        k1, l1 = rhs(x, h, k, 0.0)
        k2, l2 = rhs(x + 0.5 * dt * k1, h + 0.5 * dt * l1, k, 0.5)
        k3, l3 = rhs(x + 0.5 * dt * k2, h + 0.5 * dt * l2, k, 0.5)
        k4, l4 = rhs(x + dt * k3, h + dt * l3, k, 1.0)
        x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        h = h + dt / 6.0 * (l1 + 2 * l2 + 2 * l3 + l4)
        if np.any(np.linalg.norm(x, axis=-1) > outer_radius * (1 + 1e-9)):
            raise GeometryError("tracked point left the outer disk", stage="rigid_extension", step=k + 1)
        out[k + 1] = x
        hs[k + 1] = h
    return out, hs


def body_frame_flow(points, grid: TimeGrid, hp_hat, om_hat, lam: float, cutoff: Cutoff):
    """Rigid flow conjugated to the solid frame, Psi = R^T (Xbar^R - h).

    Driven by the weighted body-frame velocities (hp_hat, om_hat) on the time
    nodes; d = R^T h is integrated alongside.  Psi is exactly the identity
    wherever the cut-off equals one.  Returns (Psi (N+1, m, 2), d (N+1, 2)).
    """
    pts = np.array(points, dtype=float)
    hp = np.asarray(hp_hat, dtype=float)
    om = np.asarray(om_hat, dtype=float)
    t = grid.t
    dt = grid.dt
    out = np.empty((grid.n_steps + 1,) + pts.shape)
    ds = np.empty((grid.n_steps + 1, 2))
    out[0] = pts
    d = np.zeros(2)
    ds[0] = d

    def rhs(psi, dd, k, th):
        tt = t[k] + th * dt
        a = np.exp(-lam * tt) * _lerp(hp, k, th)  # R^T h'
        w = np.exp(-lam * tt) * _lerp(om, k, th)
        x = dd + psi  # R^T (lab position)
        r = np.linalg.norm(x, axis=-1)
        xi = cutoff.value(r)
        dxi = cutoff.deriv(r)
        psi_s = _cross(a, psi) - 0.5 * np.sum(psi * psi, axis=-1) * w
        safe = np.where(r > 0, r, 1.0)
        rot_xi = (dxi / safe)[..., None] * np.stack([x[..., 1], -x[..., 0]], axis=-1)
        vel = (xi - 1.0)[..., None] * (a + w * _perp(psi)) + psi_s[..., None] * rot_xi
        return vel, a - w * _perp(dd)

    psi = pts
    for k in range(grid.n_steps):
        k1, l1 = rhs(psi, d, k, 0.0)
        k2, l2 = rhs(psi + 0.5 * dt * k1, d + 0.5 * dt * l1, k, 0.5)
        k3, l3 = rhs(psi + 0.5 * dt * k2, d + 0.5 * dt * l2, k, 0.5)
        k4, l4 = rhs(psi + dt * k3, d + dt * l3, k, 1.0)
        psi = psi + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        d = d + dt / 6.0 * (l1 + 2 * l2 + 2 * l3 + l4)
        out[k + 1] = psi
        ds[k + 1] = d
    return out, ds


# ----- composition -------------------------------------------------------------


class P2Interpolator:
    """Evaluate a P2 field given on every mesh node at arbitrary points."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.cells = mesh.p2_cells

    def weights(self, points):
        cell, ref = self.mesh.locate(points)
        if np.any(cell < 0):
            raise GeometryError("interpolation target outside the outer disk", stage="compose")
        val, _ = p2_shape(ref)
        return self.cells[cell], val

    def __call__(self, values, points):
        dofs, val = self.weights(points)
        return np.einsum("pi,pid->pd", val, values[dofs])


def compose_full_map(mesh: Mesh, psi_all: np.ndarray, Xbar: np.ndarray, interp: P2Interpolator | None = None):
    """X~ = Psi o Xbar at the fluid nodes, Psi given on every P2 node of the mesh."""
    interp = interp or P2Interpolator(mesh)
    return interp(psi_all, Xbar)


def lab_map(X_tilde, h, R):
    """X = h + R X~ for row-vector node arrays."""
    return np.asarray(h) + X_tilde @ np.asarray(R).T
