"""Admissible solid deformations built from boundary velocities.

Time is discretized on ``t_k = k dt``.  A displacement series is stored through
its weighted velocities ``phi^k = e^{lam t_k} V^k`` on the intervals
``(t_{k-1}, t_k]``, with ``V^k = (Z^k - Z^{k-1}) / dt`` and ``Z^0 = 0``.
The rotational and volume constraints of interval ``k`` are evaluated at the
midpoint displacement, which makes the discrete volume balance exact:
``det(I + grad Z^k) - det(I + grad Z^{k-1}) = dt com(I + grad Z^{k-1/2}) : grad V^k``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from .errors import CompatibilityError, ProjectionError, SmallDataError, SolverError
from .kinematics import cofactor, det2
from .mesh import SOLID, SOLID_BOUNDARY, Mesh, Space, cross


@dataclass(frozen=True)
class TimeGrid:
    dt: float
    n_steps: int

    @property
    def t(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    @property
    def t_intervals(self) -> np.ndarray:
        """Label of interval k (1..N) is its right end t_k."""
        return self.t[1:]

    @property
    def horizon(self) -> float:
        return self.dt * self.n_steps


@dataclass(frozen=True, eq=False)
class BoundaryVelocity:
    """Weighted boundary velocity samples on the solid-boundary P2 nodes."""

    nodes: np.ndarray  # global P2 node ids
    values: np.ndarray  # (N, nb, 2)


@dataclass(frozen=True, eq=False)
class ConstraintResidual:
    a: np.ndarray  # (N, 2) linear momentum rate
    b: np.ndarray  # (N,) angular momentum
    c: np.ndarray  # (N,) volume flux

    def max_abs(self) -> float:
        if self.a.size == 0:
            return 0.0
        return float(max(np.abs(self.a).max(), np.abs(self.b).max(), np.abs(self.c).max()))

    def per_step(self) -> np.ndarray:
        """(N, 3) array of |a|, |b|, |c|."""
        return np.stack([np.linalg.norm(self.a, axis=1), np.abs(self.b), np.abs(self.c)], axis=1)


class SolidModel:
    """Discrete operators on the solid disk shared by every solid-side routine."""

    def __init__(self, mesh: Mesh, rho_s: float = 1.0):
        self.mesh = mesh
        self.space = Space(mesh, SOLID)
        self.rho_s = float(rho_s)
        sp_ = self.space
        self.n = sp_.n
        self.area = float(sp_.qweight.sum())
        self.mass_total = self.rho_s * self.area
        r2 = np.einsum("cqd,cqd->cq", sp_.qpoints, sp_.qpoints)
        self.inertia0 = self.rho_s * float(np.sum(sp_.qweight * r2))
        self.boundary_nodes = sp_.boundary_nodes(SOLID_BOUNDARY)
        self.interior_nodes = np.setdiff1d(np.arange(self.n), self.boundary_nodes)
        self.boundary_global = sp_.global_nodes[self.boundary_nodes]
        m = fem.mass(sp_)
        self.mass = fem.vector(m)
        self.strain = fem.strain_stiffness(sp_)
        self.metric = fem.vector(m + fem.stiffness(sp_))
        ones = np.ones(sp_.qweight.shape)
        lo = sp_.load(ones)
        z = np.zeros(self.n)
        y = sp_.qpoints
        # blocked functionals: int phi . e_1, int phi . e_2, int y ^ phi
        self.moments = np.stack(
            [
                np.concatenate([lo, z]),
                np.concatenate([z, lo]),
                np.concatenate([-sp_.load(y[..., 1]), sp_.load(y[..., 0])]),
            ]
        )
        b = sp_.boundary[SOLID_BOUNDARY]
        self.perimeter = float(b["length"].sum())
        flux = sp_.boundary_load(SOLID_BOUNDARY, np.broadcast_to(b["normal"][:, None, :], b["points"].shape))
        self.flux = fem.flatten(flux)  # int phi . n = flux @ flatten(phi)

    @cached_property
    def metric_inverse(self) -> np.ndarray:
        return np.linalg.inv(self.metric.toarray())

    def norm_w(self, phi: np.ndarray, dt: float) -> float:
        """Discrete weighted norm sqrt(sum_k dt |phi^k|_H1^2)."""
        flat = np.concatenate([phi[..., 0], phi[..., 1]], axis=-1)
        g = self.metric
        return float(np.sqrt(dt * np.sum(flat * (g @ flat.T).T)))

    # ----- boundary data helpers --------------------------------------------
    def boundary_flux(self, zeta: np.ndarray) -> np.ndarray:
        """Flux of boundary samples (N, nb, 2) on the solid boundary."""
        full = np.zeros(zeta.shape[:-2] + (self.n, 2))
        full[..., self.boundary_nodes, :] = zeta
        flat = np.concatenate([full[..., 0], full[..., 1]], axis=-1)
        return flat @ self.flux

    def nodal_normal(self) -> np.ndarray:
        """Boundary-node normal field scaled so that its discrete flux is the perimeter."""
        x = self.space.nodes[self.boundary_nodes]
        nrm = x / np.linalg.norm(x, axis=1, keepdims=True)
        return nrm * self.perimeter / float(self.boundary_flux(nrm[None])[0])

    def remove_flux(self, zeta: np.ndarray) -> np.ndarray:
        """Subtract the multiple of the nodal normal that carries the flux."""
        nrm = self.nodal_normal()
        f = self.boundary_flux(zeta)
        return zeta - (f / self.perimeter)[..., None, None] * nrm

    def trace(self, phi: np.ndarray) -> np.ndarray:
        return phi[..., self.boundary_nodes, :]


# ----- Lame extension --------------------------------------------------------


class LameSolver:
    """Bordered solve of mu phi - 2 div D(phi) = alpha + beta y^perp, phi = zeta on the boundary.

    The affine force (alpha, beta) is the multiplier of the three moment
    conditions mu int phi = target_a, mu int y ^ phi = target_b, which is the
    variational form of the nonlocal right-hand side.
    """

    def __init__(self, model: SolidModel, mu: float | None = None, max_doublings: int = 20):
        self.model = model
        n = model.n
        if mu is None:
            k = model.strain.diagonal()
            mdiag = model.mass.diagonal()
            mu = 10.0 * 2.0 * float(np.max(k / mdiag))
        self.interior = fem.blocked(model.interior_nodes, n)
        self.bnd = fem.blocked(model.boundary_nodes, n)
        for _ in range(max_doublings + 1):
            try:
                self._factor(mu)
                self.mu = mu
                return
            except (RuntimeError, np.linalg.LinAlgError, SolverError):
                mu *= 2.0
        raise SolverError("Lame system singular for every tried penalty", stage="lame_extend")

    def _factor(self, mu):
        model = self.model
        a = (mu * model.mass + model.strain).tocsr()
        self.a_ib = a[self.interior][:, self.bnd]
        q = model.moments
        qi = sp.csr_matrix(q[:, self.interior])
        top = sp.hstack([a[self.interior][:, self.interior], -qi.T])
        bot = sp.hstack([qi, sp.csr_matrix((3, 3))])
        big = sp.vstack([top, bot]).tocsc()
        self.lu = spla.splu(big)
        test = self.lu.solve(np.ones(big.shape[0]))
        if not np.all(np.isfinite(test)):
            raise SolverError("non-finite Lame solution")
        self.big = big

    def solve(self, zeta: np.ndarray, moment_targets: np.ndarray | None = None) -> np.ndarray:
        """Solve for a batch of boundary data (N, nb, 2); returns (N, n, 2)."""
        model = self.model
        zeta = np.asarray(zeta, dtype=float)
        nb = len(model.boundary_nodes)
        zb = np.concatenate([zeta[..., 0], zeta[..., 1]], axis=-1).reshape(-1, 2 * nb)
        q = model.moments
        rhs_top = -(self.a_ib @ zb.T)
        tgt = np.zeros((3, zb.shape[0])) if moment_targets is None else np.asarray(moment_targets).reshape(-1, 3).T
        rhs_bot = tgt - q[:, self.bnd] @ zb.T
        sol = self.lu.solve(np.vstack([rhs_top, rhs_bot]))
        out = np.zeros((zb.shape[0], 2 * model.n))
        out[:, self.interior] = sol[: len(self.interior)].T
        out[:, self.bnd] = zb
        res = self.big @ sol - np.vstack([rhs_top, rhs_bot])
        scale = max(1.0, float(np.abs(np.vstack([rhs_top, rhs_bot])).max()))
        if not np.all(np.isfinite(out)) or np.abs(res).max() > 1e-8 * scale:
            raise SolverError("Lame solve inaccurate", stage="lame_extend")
        n = model.n
        return np.stack([out[:, :n], out[:, n:]], axis=-1).reshape(zeta.shape[:-2] + (n, 2))


def lame_extend(model: SolidModel, zeta: np.ndarray, mu: float | None = None, solver: LameSolver | None = None):
    """Extend flux-free boundary velocities (N, nb, 2) into the solid."""
    zeta = np.asarray(zeta, dtype=float)
    flux = model.boundary_flux(zeta)
    scale = model.perimeter * max(1.0, float(np.abs(zeta).max()) if zeta.size else 1.0)
    if np.any(np.abs(flux) > 1e-10 * scale):
        raise CompatibilityError(
            f"boundary data carries flux {float(np.max(np.abs(flux))):.3e}", stage="lame_extend"
        )
    solver = solver or LameSolver(model, mu)
    return solver.solve(zeta)


def lame_extend_with_targets(model, a, b, c, grid: TimeGrid, lam: float, mu=None, solver=None):
    """Weighted velocities whose displacement has linearized constraints (a, b, c).

    ``a`` (N, 2), ``b`` (N,), ``c`` (N,) are prescribed on the intervals of
    ``grid``.  The weighted moment targets are e^{lam t} (a, b) and the
    boundary data is the nodal normal scaled to carry flux e^{lam t} c.
    """
    solver = solver or LameSolver(model, mu)
    w = np.exp(lam * grid.t_intervals)
    a = np.asarray(a, dtype=float).reshape(-1, 2)
    b = np.asarray(b, dtype=float).reshape(-1)
    c = np.asarray(c, dtype=float).reshape(-1)
    targets = np.column_stack([w * a[:, 0], w * a[:, 1], w * b])
    zeta = (w * c / model.perimeter)[:, None, None] * model.nodal_normal()[None]
    return solver.solve(zeta, targets)


# ----- displacement series -----------------------------------------------------


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Displacement Z = X - Id on the solid through weighted interval velocities."""

    model: SolidModel
    grid: TimeGrid
    lam: float
    phi: np.ndarray  # (N, n, 2) weighted velocities e^{lam t_k} V^k

    @property
    def velocity(self) -> np.ndarray:
        """Unweighted interval velocities V^k = dZ/dt on (t_{k-1}, t_k]."""
        return self.phi * np.exp(-self.lam * self.grid.t_intervals)[:, None, None]

    @cached_property
    def Z(self) -> np.ndarray:
        z = np.zeros((self.grid.n_steps + 1,) + self.phi.shape[1:])
        z[1:] = self.grid.dt * np.cumsum(self.velocity, axis=0)
        return z

    @property
    def X(self) -> np.ndarray:
        return self.Z + self.model.space.nodes[None]

    def norm(self) -> float:
        return self.model.norm_w(self.phi, self.grid.dt)

    def volume_drift(self) -> np.ndarray:
        """Relative change of the deformed solid area at every time node."""
        sp_ = self.model.space
        out = []
        for z in self.Z:
            f = sp_.grad_at_quad(z) + np.eye(2)
            out.append(float(np.sum(sp_.qweight * det2(f))))
        return np.array(out) / self.model.area - 1.0


def displacement_from_phi(model, grid, lam, phi) -> DisplacementField:
    return DisplacementField(model, grid, lam, np.asarray(phi, dtype=float))


# ----- constraint functional ---------------------------------------------------


def _batch_quad(space: Space, vals: np.ndarray) -> np.ndarray:
    return np.einsum("qi,kcid->kcqd", space.qval, vals[:, space.cell_dofs])


def _batch_grad_bnd(space: Space, vals: np.ndarray) -> np.ndarray:
    b = space.boundary[SOLID_BOUNDARY]
    loc = vals[:, space.cell_dofs[b["cell"]]]  # (K, m, 6, 2)
    return np.einsum("mqid,kmij->kmqjd", b["grad"], loc)


def _batch_val_bnd(space: Space, vals: np.ndarray) -> np.ndarray:
    b = space.boundary[SOLID_BOUNDARY]
    return np.einsum("mqi,kmij->kmqj", b["val"], vals[:, space.cell_dofs[b["cell"]]])


def _weighted_constraints(model: SolidModel, phi: np.ndarray, z_prev: np.ndarray, z_mid: np.ndarray):
    """(N, 4) array [a1, a2, b, c] of constraints written for the weighted velocity."""
    sp_ = model.space
    flat = np.concatenate([phi[..., 0], phi[..., 1]], axis=-1)
    a = flat @ model.moments[:2].T
    y = sp_.qpoints[None]
    pq = _batch_quad(sp_, phi)
    zq = _batch_quad(sp_, z_mid)
    b = np.einsum("cq,kcq->k", sp_.qweight, cross(y + zq, pq))
    bd = sp_.boundary[SOLID_BOUNDARY]
    fm = _batch_grad_bnd(sp_, z_mid) + np.eye(2)
    cof = cofactor(fm)
    pb = _batch_val_bnd(sp_, phi)
    cn = np.einsum("kmqij,mj->kmqi", cof, bd["normal"])
    c = np.einsum("mq,kmqi,kmqi->k", bd["weight"], pb, cn)
    return np.column_stack([a, b, c])


class ConstraintMap:
    """Weighted constraints of a velocity series and their structured Jacobian.

    Row block k of the Jacobian acts as ``R_k phi^k + S_k Z^{k-1}``, where
    ``Z^{k-1} = dt sum_{j<k} e^{-lam t_j} phi^j`` is itself linear in phi.
    """

    def __init__(self, model: SolidModel, grid: TimeGrid, lam: float):
        self.model = model
        self.grid = grid
        self.lam = lam
        self.decay = np.exp(-lam * grid.t_intervals)

    def displacements(self, phi):
        v = phi * self.decay[:, None, None]
        z = np.zeros((len(phi) + 1,) + phi.shape[1:])
        z[1:] = self.grid.dt * np.cumsum(v, axis=0)
        return z[:-1], z[:-1] + 0.5 * self.grid.dt * v

    def value(self, phi):
        z_prev, z_mid = self.displacements(phi)
        return _weighted_constraints(self.model, phi, z_prev, z_mid)

    def jacobian(self, phi):
        """Return (R, S) with shapes (N, 4, 2n)."""
        model, sp_ = self.model, self.model.space
        n = model.n
        N = len(phi)
        z_prev, z_mid = self.displacements(phi)
        R = np.zeros((N, 4, 2 * n))
        S = np.zeros((N, 4, 2 * n))
        R[:, 0] = model.moments[0]
        R[:, 1] = model.moments[1]
        # b: d/dphi^k = int (y + Z^{k-1}) ^ delta ; d/dZ^{k-1} = int delta ^ phi^k
        y = sp_.qpoints[None]
        yz = y + _batch_quad(sp_, z_prev)
        pq = _batch_quad(sp_, phi)
        R[:, 2] = self._load_pair(-yz[..., 1], yz[..., 0])
        S[:, 2] = self._load_pair(pq[..., 1], -pq[..., 0])
        # c: phi^k . com(F_mid) n with F_mid = I + grad Z^{k-1} + dt/2 e^{-lam t_k} grad phi^k
        bd = sp_.boundary[SOLID_BOUNDARY]
        cof = cofactor(_batch_grad_bnd(sp_, z_mid) + np.eye(2))
        cn = np.einsum("kmqij,mj->kmqi", cof, bd["normal"])
        pb = _batch_val_bnd(sp_, phi)
        # d/dG of phi . com(G) n equals com(phi n^T)
        outer = np.einsum("kmqi,mj->kmqij", pb, bd["normal"])
        dg = cofactor(outer)
        vec_part = self._bnd_vec(cn)
        mat_part = self._bnd_mat(dg)
        R[:, 3] = vec_part + 0.5 * self.grid.dt * self.decay[:, None] * mat_part
        S[:, 3] = mat_part
        return R, S

    def _load_pair(self, f0, f1):
        sp_ = self.model.space
        n = sp_.n
        out = np.zeros((len(f0), 2 * n))
        loc0 = np.einsum("cq,qi,kcq->kci", sp_.qweight, sp_.qval, f0)
        loc1 = np.einsum("cq,qi,kcq->kci", sp_.qweight, sp_.qval, f1)
        for k in range(len(f0)):
            out[k, :n] = np.bincount(sp_.cell_dofs.ravel(), loc0[k].ravel(), minlength=n)
            out[k, n:] = np.bincount(sp_.cell_dofs.ravel(), loc1[k].ravel(), minlength=n)
        return out

    def _bnd_vec(self, coef):
        sp_ = self.model.space
        bd = sp_.boundary[SOLID_BOUNDARY]
        dofs = sp_.cell_dofs[bd["cell"]]
        loc = np.einsum("mq,mqi,kmqd->kmid", bd["weight"], bd["val"], coef)
        return self._scatter(loc, dofs)

    def _bnd_mat(self, coef):
        sp_ = self.model.space
        bd = sp_.boundary[SOLID_BOUNDARY]
        dofs = sp_.cell_dofs[bd["cell"]]
        # coef[..., i, j] multiplies d_j delta_i
        loc = np.einsum("mq,mqaj,kmqij->kmai", bd["weight"], bd["grad"], coef)
        return self._scatter(loc, dofs)

    def _scatter(self, loc, dofs):
        n = self.model.n
        out = np.zeros((loc.shape[0], 2 * n))
        for k in range(loc.shape[0]):
            out[k, :n] = np.bincount(dofs.ravel(), loc[k, :, :, 0].ravel(), minlength=n)
            out[k, n:] = np.bincount(dofs.ravel(), loc[k, :, :, 1].ravel(), minlength=n)
        return out

    # ----- structured products ---------------------------------------------
    def apply(self, R, S, dphi_flat):
        """J dphi for flattened (N, 2n) increments."""
        dz = np.zeros_like(dphi_flat)
        dz[1:] = self.grid.dt * np.cumsum(dphi_flat[:-1] * self.decay[:-1, None], axis=0)
        return np.einsum("kri,ki->kr", R, dphi_flat) + np.einsum("kri,ki->kr", S, dz)

    def apply_t(self, R, S, mult):
        """J^T mult for multipliers (N, 4)."""
        out = np.einsum("kri,kr->ki", R, mult)
        gz = np.einsum("kri,kr->ki", S, mult)  # gradient wrt Z^{k-1}
        # Z^{k-1} depends on phi^j for j < k; reverse cumulative sum
        acc = np.zeros_like(gz)
        acc[:-1] = np.cumsum(gz[::-1], axis=0)[::-1][1:]
        out += self.grid.dt * self.decay[:, None] * acc
        return out


def _flat(phi):
    return np.concatenate([phi[..., 0], phi[..., 1]], axis=-1)


def _unflat(x, n):
    return np.stack([x[..., :n], x[..., n:]], axis=-1)


def constraint_functional(Z: DisplacementField) -> ConstraintResidual:
    """Nonlinear constraints (a, b, c) of every interval, in unweighted units."""
    cm = ConstraintMap(Z.model, Z.grid, Z.lam)
    w = cm.value(Z.phi) * cm.decay[:, None]
    return ConstraintResidual(a=w[:, :2], b=w[:, 2], c=w[:, 3])


def linearized_constraints(Z: DisplacementField) -> ConstraintResidual:
    """Constraints linearized at zero displacement, in unweighted units."""
    model = Z.model
    v = _flat(Z.velocity)
    a = v @ model.moments[:2].T
    b = v @ model.moments[2]
    c = v @ model.flux
    return ConstraintResidual(a=a, b=b, c=c)


@dataclass
class ProjectionReport:
    iterations: int
    constraint_history: list
    kkt_residual: float
    max_constraint: float
    distance: float
    multipliers: np.ndarray


def project_admissible(
    Zz: DisplacementField,
    tol: float = 1e-10,
    max_iter: int = 30,
    threshold: float | None = None,
    cg_tol: float = 1e-14,
):
    """Closest admissible displacement in the weighted H^1 metric.

    Gauss-Newton SQP: the objective Hessian is exact and block diagonal, the
    Jacobian is refreshed every iteration, the multiplier system
    J W^{-1} J^T is solved by preconditioned conjugate gradients, and the step
    is halved while it increases the constraint violation.
    Returns the projected field and a ProjectionReport.
    """
    model, grid = Zz.model, Zz.grid
    a_s = model.mesh.solid_radius
    threshold = 0.05 * a_s if threshold is None else threshold
    nz = Zz.norm()
    if nz > threshold:
        raise SmallDataError(
            f"weighted displacement norm {nz:.3e} exceeds threshold {threshold:.3e}",
            stage="project_admissible",
        )
    n = model.n
    N = grid.n_steps
    cm = ConstraintMap(model, grid, Zz.lam)
    ginv = model.metric_inverse
    dt = grid.dt
    target = _flat(Zz.phi)
    x = target.copy()
    history = []
    mult = np.zeros((N, 4))

    def winv(v):
        return (v @ ginv) / dt

    def solve_mult(R, S, rhs):
        # block-diagonal preconditioner built from R_k G^{-1} R_k^T / dt
        blocks = np.einsum("kri,ij,ksj->krs", R, ginv, R) / dt
        binv = np.linalg.inv(blocks + 1e-300 * np.eye(4))

        def op(m):
            m = m.reshape(N, 4)
            return cm.apply(R, S, winv(cm.apply_t(R, S, m))).ravel()

        def pre(m):
            return np.einsum("krs,ks->kr", binv, m.reshape(N, 4)).ravel()

        A = spla.LinearOperator((4 * N, 4 * N), matvec=op, dtype=float)
        P = spla.LinearOperator((4 * N, 4 * N), matvec=pre, dtype=float)
        sol, info = spla.cg(A, rhs.ravel(), M=P, rtol=cg_tol, atol=0.0, maxiter=500)
        if info < 0:
            raise ProjectionError("multiplier solve broke down", stage="project_admissible")
        return sol.reshape(N, 4)

    cval = cm.value(_unflat(x, n))
    it = 0
    for it in range(1, max_iter + 1):
        viol = float(np.abs(cval).max()) if N else 0.0
        history.append(viol)
        R, S = cm.jacobian(_unflat(x, n))
        diff = x - target
        rhs = cval - cm.apply(R, S, diff)
        if not np.any(rhs):
            mult = np.zeros((N, 4))
            break
        mult = solve_mult(R, S, rhs)
        step = -diff - winv(cm.apply_t(R, S, mult))
        if viol < tol and np.sqrt(dt * np.sum(step * (step @ model.metric.toarray()))) < tol:
            break
        alpha = 1.0
        for _ in range(12):
            trial = x + alpha * step
            cnew = cm.value(_unflat(trial, n))
            if np.abs(cnew).max() <= max(viol, tol) or alpha < 1e-3:
                break
            alpha *= 0.5
        x, cval = trial, cnew
    else:
        raise ProjectionError(
            f"SQP did not converge in {max_iter} iterations (violation {history[-1]:.3e})",
            stage="project_admissible",
            history=history,
        )
    # stationarity: best multiplier for the final iterate, dual norm of the gradient
    R, S = cm.jacobian(_unflat(x, n))
    diff = x - target
    gmat = model.metric
    wdiff = dt * (gmat @ diff.T).T
    if N and np.any(wdiff):
        mult = solve_mult(R, S, -cm.apply(R, S, diff))
        resid = wdiff + cm.apply_t(R, S, mult)
        kkt = float(np.sqrt(np.sum(resid * winv(resid))))
    else:
        kkt = 0.0
    cval = cm.value(_unflat(x, n))
    out = DisplacementField(model, grid, Zz.lam, _unflat(x, n))
    report = ProjectionReport(
        iterations=it,
        constraint_history=history,
        kkt_residual=kkt,
        max_constraint=float(np.abs(cval).max()) if N else 0.0,
        distance=model.norm_w(_unflat(x - target, n), dt),
        multipliers=mult,
    )
    return out, report


def make_admissible_from_boundary(
    model: SolidModel,
    zeta: BoundaryVelocity | np.ndarray,
    grid: TimeGrid,
    lam: float,
    tol: float = 1e-10,
    threshold: float | None = None,
    solver: LameSolver | None = None,
):
    """Lame-extend, integrate and project boundary velocities.

    Returns (X*, residual boundary velocity e^{lam t} dX*/dt - zeta, report).
    """
    values = zeta.values if isinstance(zeta, BoundaryVelocity) else np.asarray(zeta, dtype=float)
    phi = lame_extend(model, values, solver=solver)
    zz = DisplacementField(model, grid, lam, phi)
    proj, report = project_admissible(zz, tol=tol, threshold=threshold)
    resid = model.trace(proj.phi) - values
    return proj, resid, report


def smooth_boundary_data(model: SolidModel, grid: TimeGrid, rng: np.random.Generator, modes=(1, 2, 3)) -> np.ndarray:
    """Random flux-free boundary velocity built from low Fourier modes.

    Normal and tangential components mix cos / sin of the given angular
    modes; the time profile is sin(pi t / T).  Returns (N, nb, 2) samples with
    unit maximum modulus.
    """
    y = model.space.nodes[model.boundary_nodes]
    th = np.arctan2(y[:, 1], y[:, 0])
    nrm = np.stack([np.cos(th), np.sin(th)], axis=1)
    tan = np.stack([-np.sin(th), np.cos(th)], axis=1)
    fn = np.zeros_like(th)
    ft = np.zeros_like(th)
    for m in modes:
        c = rng.normal(size=4)
        fn += c[0] * np.cos(m * th) + c[1] * np.sin(m * th)
        ft += c[2] * np.cos(m * th) + c[3] * np.sin(m * th)
    shape = fn[:, None] * nrm + ft[:, None] * tan
    prof = np.sin(np.pi * grid.t_intervals / grid.horizon)
    zeta = model.remove_flux(prof[:, None, None] * shape[None])
    return zeta / np.abs(zeta).max()
