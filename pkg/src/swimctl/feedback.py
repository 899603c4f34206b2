"""Linearized fluid/rigid-body system, projection, lifting and LQR boundary feedback.

Velocities are described in generalized coordinates ``q = [interior velocity
dofs (blocked), H' (2), Omega]``: the full P2 velocity is ``P q + E b`` where
``P`` places interior values and the rigid motion ``H' + Omega y^perp`` on the
solid-boundary nodes, and ``E`` injects extra boundary data ``b`` there.  The
outer boundary is a no-slip wall.

The state of the controller is the generalized momentum projected on the
discrete divergence-free subspace, ``w = V^T (Mg q + ME b)``, with ``V`` an
``Mg``-orthonormal basis of ``ker Bg``.  In these coordinates the homogeneous
system reads ``dw/dt = (lam - VᵀAgV) w + VᵀAgV C c`` exactly, also after
implicit Euler discretization, where ``c`` are coordinates of the flux-free
boundary control ``zeta = Z c``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sl
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fem
from .errors import AssemblyError, SolverError, StabilizabilityError
from .mesh import OUTER_BOUNDARY, SOLID_BOUNDARY, Mesh, Space, cross

log = logging.getLogger(__name__)


def _dense(m):
    return m.toarray() if sp.issparse(m) else np.asarray(m)


def _mass_orthonormal(N: np.ndarray, M) -> np.ndarray:
    c = N.T @ (M @ N)
    L = np.linalg.cholesky(0.5 * (c + c.T))
    return sl.solve_triangular(L, N.T, lower=True).T


class CoupledOperators:
    """Sparse building blocks of the Stokes / rigid-body coupling on the fluid mesh."""

    def __init__(self, mesh: Mesh, nu: float, mass: float, inertia0: float):
        if nu <= 0 or mass <= 0 or inertia0 <= 0:
            raise AssemblyError("nu, mass and inertia must be positive")
        self.mesh = mesh
        self.nu = float(nu)
        self.mass = float(mass)
        self.inertia0 = float(inertia0)
        sp_ = Space(mesh)
        self.space = sp_
        n = sp_.n
        self.n = n
        self.sb = sp_.boundary_nodes(SOLID_BOUNDARY)
        self.ob = sp_.boundary_nodes(OUTER_BOUNDARY)
        self.interior = np.setdiff1d(np.arange(n), np.concatenate([self.sb, self.ob]))
        ni, nb = len(self.interior), len(self.sb)
        self.ni, self.nb = ni, nb
        self.nq = 2 * ni + 3
        y = sp_.nodes[self.sb]
        rows, cols, vals = [], [], []
        for k in range(2):
            rows.append(k * n + self.interior)
            cols.append(k * ni + np.arange(ni))
            vals.append(np.ones(ni))
        # rigid motion H' + Omega (-y2, y1) on the solid boundary
        rows += [self.sb, n + self.sb, self.sb, n + self.sb]
        cols += [np.full(nb, 2 * ni), np.full(nb, 2 * ni + 1), np.full(nb, 2 * ni + 2), np.full(nb, 2 * ni + 2)]
        vals += [np.ones(nb), np.ones(nb), -y[:, 1], y[:, 0]]
        self.P = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(2 * n, self.nq)
        )
        self.E = sp.csr_matrix(
            (np.ones(2 * nb), (fem.blocked(self.sb, n), np.arange(2 * nb))), shape=(2 * n, 2 * nb)
        )
        self.Mu = fem.vector(fem.mass(sp_))
        self.A = self.nu * fem.strain_stiffness(sp_)
        self.Bdiv = fem.divergence(sp_)
        self.p_int = fem.p1_integrals(sp_)
        rig = np.zeros(self.nq)
        rig[-3:] = [self.mass, self.mass, self.inertia0]
        self.Mrig = sp.diags(rig)
        P, E = self.P, self.E
        self.Mg = (P.T @ self.Mu @ P + self.Mrig).tocsr()
        self.ME = (P.T @ self.Mu @ E).tocsr()
        self.Ag = (P.T @ self.A @ P).tocsr()
        self.AE = (P.T @ self.A @ E).tocsr()
        self.Bg = (self.Bdiv @ P).tocsr()
        self.BE = (self.Bdiv @ E).tocsr()
        # boundary mass and flux functional of boundary data on the solid boundary
        bm = fem.boundary_mass(sp_, SOLID_BOUNDARY)[self.sb][:, self.sb]
        self.Mb = fem.vector(bm)
        nrm = sp_.boundary[SOLID_BOUNDARY]["normal"]
        qn = np.broadcast_to(nrm[:, None, :], sp_.boundary[SOLID_BOUNDARY]["points"].shape)
        fl = sp_.boundary_load(SOLID_BOUNDARY, np.ascontiguousarray(qn))[self.sb]
        self.flux = fem.flatten(fl)  # int b . n_S for blocked boundary data

    # ----- conversions ---------------------------------------------------
    def velocity(self, q: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
        x = self.P @ q
        if b is not None:
            x = x + self.E @ b
        return fem.unflatten(x, self.n)

    def boundary_data(self, nodal: np.ndarray) -> np.ndarray:
        """Blocked boundary data from nodal values on the full fluid space."""
        return fem.flatten(np.asarray(nodal)[self.sb])

    def rigid_part(self, q):
        return q[-3:-1], q[-1]

    def pack(self, u_interior: np.ndarray, hp, om) -> np.ndarray:
        return np.concatenate([fem.flatten(u_interior), np.asarray(hp, float), [float(om)]])

    def momentum(self, u_nodal: np.ndarray, hp=(0.0, 0.0), om: float = 0.0) -> np.ndarray:
        """Generalized momentum of an arbitrary velocity field plus rigid velocities."""
        m = self.P.T @ (self.Mu @ fem.flatten(u_nodal))
        m[-3:] += [self.mass * hp[0], self.mass * hp[1], self.inertia0 * om]
        return m

    def generalized_load(self, load_nodal: np.ndarray, F_M=(0.0, 0.0), F_I: float = 0.0) -> np.ndarray:
        f = self.P.T @ fem.flatten(load_nodal)
        f[-3:] += [F_M[0], F_M[1], F_I]
        return f

    def energy(self, q, b=None) -> float:
        """||u||^2 + M |H'|^2 + I0 Omega^2 of the full velocity."""
        u = fem.flatten(self.velocity(q, b))
        return float(u @ (self.Mu @ u) + self.mass * q[-3:-1] @ q[-3:-1] + self.inertia0 * q[-1] ** 2)

    def saddle(self, K, with_mean: bool = True):
        """Factor [[K, -Bg^T, 0], [-Bg, 0, m], [0, m^T, 0]]."""
        npp = self.Bg.shape[0]
        m = sp.csr_matrix(self.p_int[:, None])
        blocks = [
            [K, -self.Bg.T, None],
            [-self.Bg, None, m],
            [None, m.T, None],
        ]
        mat = sp.bmat(blocks, format="csc")
        try:
            return spla.splu(mat), npp
        except RuntimeError as exc:
            raise SolverError(f"saddle-point factorization failed: {exc}") from exc


@dataclass(eq=False)
class LinearizedSystem:
    """Projected closed-loop ingredients at a fixed lam.

    ``A`` and ``B`` are the state and input matrices of ``dw/dt = A w + B c``
    (``w`` in ``Mg``-orthonormal coordinates so the mass is the identity).
    """

    ops: CoupledOperators
    lam: float
    V: np.ndarray
    A_tilde: np.ndarray
    A: np.ndarray
    B: np.ndarray
    Z: np.ndarray
    lift: np.ndarray
    coupling: np.ndarray
    mass: np.ndarray = field(repr=False)

    @property
    def n_state(self) -> int:
        return self.A.shape[0]

    @property
    def n_control(self) -> int:
        return self.B.shape[1]

    def state(self, q, b, ell=None) -> np.ndarray:
        m = self.ops.Mg @ q + self.ops.ME @ b
        if ell is not None:
            m = m - ell
        return self.V.T @ m

    def open_loop_spectrum(self) -> np.ndarray:
        return np.sort(np.linalg.eigvalsh(0.5 * (self.A + self.A.T)))[::-1]


def assemble_linearized(mesh_or_ops, lam: float, nu: float = 1.0, mass: float = 1.0, inertia0: float = 1.0):
    """Assemble the projected state/input matrices of the linearized system."""
    ops = (
        mesh_or_ops
        if isinstance(mesh_or_ops, CoupledOperators)
        else CoupledOperators(mesh_or_ops, nu, mass, inertia0)
    )
    Bg = _dense(ops.Bg)
    s = np.linalg.svd(Bg, compute_uv=False)
    rank = int(np.sum(s > s[0] * 1e-10))
    if rank < Bg.shape[0] - 1:
        raise AssemblyError(f"divergence constraint has rank {rank} < {Bg.shape[0] - 1}: inf-sup failure")
    N = sl.null_space(Bg, rcond=1e-10)
    V = _mass_orthonormal(N, ops.Mg)
    At = V.T @ (ops.Ag @ V)
    At = 0.5 * (At + At.T)
    # flux-free boundary control basis, orthonormal in the boundary mass
    Nz = sl.null_space(ops.flux[None, :])
    Z = _mass_orthonormal(Nz, ops.Mb)
    # Stokes lift of each control direction
    lu, npp = ops.saddle(ops.Ag)
    rhs = np.zeros((ops.nq + npp + 1, Z.shape[1]))
    rhs[: ops.nq] = -(ops.AE @ Z)
    rhs[ops.nq : ops.nq + npp] = ops.BE @ Z
    S = lu.solve(rhs)[: ops.nq]
    C = V.T @ (ops.Mg @ S + ops.ME @ Z)
    A = lam * np.eye(len(At)) - At
    B = At @ C
    return LinearizedSystem(ops=ops, lam=float(lam), V=V, A_tilde=At, A=A, B=B, Z=Z, lift=S, coupling=C, mass=np.eye(len(At)))


# ----- projection and lifting ------------------------------------------------


def leray_project(ops: CoupledOperators, u_nodal: np.ndarray, hp=(0.0, 0.0), om: float = 0.0):
    """Mass-orthogonal projection onto discrete divergence-free rigid-coupled velocities.

    Solves ``Mg x - Bg^T pi = m``, ``Bg x = 0`` where ``m`` is the generalized
    momentum of ``(u, hp, om)``.  Returns the generalized coordinates ``x``.
    """
    lu = _leray_lu(ops)
    m = ops.momentum(u_nodal, hp, om)
    rhs = np.zeros(lu.shape[0])
    rhs[: ops.nq] = m
    sol = lu.solve(rhs)
    if not np.all(np.isfinite(sol)):
        raise SolverError("pressure system of the projection is singular")
    return sol[: ops.nq]


def _leray_lu(ops: CoupledOperators):
    lu = getattr(ops, "_leray", None)
    if lu is None:
        lu, _ = ops.saddle(ops.Mg)
        ops._leray = lu
    return lu


@dataclass(frozen=True)
class DivergenceLift:
    """Shift and extra sources produced by subtracting a divergence lift G."""

    shift: np.ndarray
    F: np.ndarray
    F_M: np.ndarray
    F_I: float


def lift_divergence(space: Space, G: np.ndarray, G_prev: np.ndarray | None, dt: float, lam: float, nu: float):
    """Sources of the homogeneous-divergence system for U = U_hat - G (nodal P2 G).

    ``F = -dG/dt + lam G + nu lap G`` (weak load; the time derivative is the
    backward difference, omitted when ``G_prev`` is None),
    ``F_M = -2 nu int D(G) n`` and ``F_I = -2 nu int y ^ D(G) n`` on the solid
    boundary with the normal pointing into the solid.
    """
    G = np.asarray(G, dtype=float)
    hu = space.hess(G)
    lap = hu[:, :, 0, 0] + hu[:, :, 1, 1]
    Fq = lam * space.at_quad(G) + nu * lap[:, None, :]
    if G_prev is not None:
        Fq = Fq - space.at_quad((G - G_prev) / dt)
    bd = space.boundary[SOLID_BOUNDARY]
    g = space.trace_grad(G, SOLID_BOUNDARY)
    D = 0.5 * (g + np.swapaxes(g, -1, -2))
    n_f = -np.broadcast_to(bd["normal"][:, None, :], bd["points"].shape)
    Dn = np.einsum("mqij,mqj->mqi", D, n_f)
    F_M = -2 * nu * np.einsum("mq,mqi->i", bd["weight"], Dn)
    F_I = -2 * nu * float(np.einsum("mq,mq->", bd["weight"], cross(bd["points"], Dn)))
    return DivergenceLift(shift=G, F=space.load(Fq), F_M=F_M, F_I=F_I)


# ----- feedback gain ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FeedbackGain:
    K: np.ndarray
    P: np.ndarray
    gamma: float
    closed_loop_margin: float
    open_loop_margin: float
    riccati_residual: float
    newton_iterations: int
    spectrum: np.ndarray


def riccati_residual(A, B, P, gamma: float) -> float:
    n = len(A)
    r = A.T @ P + P @ A - (P @ B) @ (B.T @ P) / gamma + np.eye(n)
    return float(np.linalg.norm(r) / np.sqrt(n))


def compute_feedback_gain(
    sys: LinearizedSystem,
    gamma: float = 1.0,
    margin: float = 1e-6,
    tol: float = 1e-12,
    max_newton: int = 40,
) -> FeedbackGain:
    """LQR gain ``c = K w`` with state cost I and control cost gamma I.

    Starts from a gain stabilizing only the unstable eigenspace of the
    symmetric ``A`` (a small Riccati problem) and refines it by Newton-Kleinman
    iterations on the full problem.
    """
    A, B = sys.A, sys.B
    n = len(A)
    lam_a, U = np.linalg.eigh(0.5 * (A + A.T))
    open_margin = float(lam_a[-1])
    unstable = lam_a >= -margin
    Bm = U.T @ B
    if np.any(unstable):
        bu = Bm[unstable]
        auth = np.linalg.norm(bu, axis=1)
        scale = max(np.linalg.norm(B), 1e-300)
        if np.any(auth <= 1e-10 * scale) or np.linalg.matrix_rank(bu, tol=1e-10 * scale) < min(bu.shape[0], 1):
            raise StabilizabilityError(
                "control has no authority on an unstable mode", authority=float(auth.min())
            )
        Au = np.diag(lam_a[unstable])
        try:
            Pu = sl.solve_continuous_are(Au, bu, np.eye(int(unstable.sum())), gamma * np.eye(B.shape[1]))
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise StabilizabilityError(f"unstable block is not stabilizable: {exc}") from exc
        K = -(bu.T @ Pu) @ U[:, unstable].T / gamma
    else:
        K = np.zeros((B.shape[1], n))
    P = None
    res_hist = []
    it = 0
    for it in range(1, max_newton + 1):
        Acl = A + B @ K
        rhs = -(np.eye(n) + gamma * K.T @ K)
        try:
            P = sl.solve_continuous_lyapunov(Acl.T, rhs)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SolverError(f"Lyapunov solve failed in Newton-Kleinman: {exc}") from exc
        P = 0.5 * (P + P.T)
        K_new = -(B.T @ P) / gamma
        res = riccati_residual(A, B, P, gamma)
        res_hist.append(res)
        step = np.linalg.norm(K_new - K) / max(np.linalg.norm(K_new), 1e-300)
        K = K_new
        if not np.isfinite(res):
            raise SolverError("Riccati iteration produced non-finite values")
        if res < tol or step < 1e-14:
            break
        if it > 8 and res > res_hist[-2]:
            break
    res = riccati_residual(A, B, P, gamma)
    if not np.isfinite(res) or res > 1e-6:
        raise SolverError(f"Riccati iteration did not converge (residual {res:.3e})", history=res_hist)
    ev = np.linalg.eigvals(A + B @ K)
    cl = float(ev.real.max())
    if cl > -margin:
        raise SolverError(f"closed loop not certified stable: max Re = {cl:.3e}")
    log.info("LQR gain: n=%d m=%d newton=%d residual=%.2e margin=%.3e", n, B.shape[1], it, res, cl)
    return FeedbackGain(
        K=K,
        P=P,
        gamma=float(gamma),
        closed_loop_margin=cl,
        open_loop_margin=open_margin,
        riccati_residual=res,
        newton_iterations=it,
        spectrum=np.sort_complex(ev),
    )


# ----- closed-loop time stepping ---------------------------------------------


@dataclass(eq=False)
class LinearSources:
    """Per-step sources in generalized coordinates, index k = 0..N.

    ``f`` generalized load, ``g`` divergence data tested against P1 functions,
    ``beta`` blocked boundary data added to the control on the solid boundary,
    ``ell`` generalized momentum of the divergence lift (subtracted from the
    controller state).
    """

    f: np.ndarray
    g: np.ndarray
    beta: np.ndarray
    ell: np.ndarray

    @classmethod
    def zeros(cls, ops: CoupledOperators, n_steps: int):
        k = n_steps + 1
        return cls(
            f=np.zeros((k, ops.nq)),
            g=np.zeros((k, ops.Bg.shape[0])),
            beta=np.zeros((k, 2 * ops.nb)),
            ell=np.zeros((k, ops.nq)),
        )

    def scaled(self, s: float):
        return LinearSources(self.f * s, self.g * s, self.beta * s, self.ell * s)

    def norm(self, dt: float) -> float:
        return float(
            np.sqrt(dt * sum(np.sum(a**2) for a in (self.f, self.g, self.beta, self.ell)))
        )


@dataclass(eq=False)
class LinearTrajectory:
    dt: float
    q: np.ndarray  # (N+1, nq)
    p: np.ndarray  # (N+1, n_p1)
    b: np.ndarray  # (N+1, 2 nb) boundary data on the solid boundary
    c: np.ndarray  # (N+1, m) control coordinates
    w: np.ndarray  # (N+1, n_state) projected state
    mean_multiplier: np.ndarray
    stability_constant: float = float("nan")

    @property
    def t(self):
        return self.dt * np.arange(len(self.q))

    @property
    def h_prime(self):
        return self.q[:, -3:-1]

    @property
    def omega(self):
        return self.q[:, -1]


class ClosedLoopStepper:
    """Implicit Euler for the coupled system with zeta = Z K w(U - G), factored once."""

    def __init__(self, sys: LinearizedSystem, gain: FeedbackGain | None, dt: float):
        if dt <= 0:
            raise SolverError("dt must be positive")
        ops = sys.ops
        self.sys, self.gain, self.dt = sys, gain, dt
        lam = sys.lam
        nq, npp = ops.nq, ops.Bg.shape[0]
        m = sys.Z.shape[1]
        self.nq, self.npp, self.m = nq, npp, m
        self.Kq = (ops.Mg * (1 / dt - lam) + ops.Ag).tocsr()
        self.Kb = (ops.ME * (1 / dt - lam) + ops.AE).tocsr()
        KV = np.zeros((m, nq)) if gain is None else gain.K @ sys.V.T
        self.KV = KV
        mvec = sp.csr_matrix(ops.p_int[:, None])
        KbZ = sp.csr_matrix(self.Kb @ sys.Z)
        BEZ = sp.csr_matrix(ops.BE @ sys.Z)
        ctrl_q = sp.csr_matrix(-(ops.Mg.T @ KV.T).T)
        ctrl_c = sp.csr_matrix(np.eye(m) - KV @ (ops.ME @ sys.Z))
        mat = sp.bmat(
            [
                [self.Kq, -ops.Bg.T, None, KbZ],
                [-ops.Bg, None, mvec, -BEZ],
                [None, mvec.T, None, None],
                [ctrl_q, None, None, ctrl_c],
            ],
            format="csc",
        )
        try:
            self.lu = spla.splu(mat)
        except RuntimeError as exc:
            raise SolverError(f"closed-loop step matrix is singular: {exc}") from exc

    def step(self, q_prev, b_prev, f, g, beta, ell):
        ops, dt = self.sys.ops, self.dt
        nq, npp = self.nq, self.npp
        rhs = np.zeros(nq + npp + 1 + self.m)
        rhs[:nq] = f + (ops.Mg @ q_prev + ops.ME @ b_prev) / dt - self.Kb @ beta
        rhs[nq : nq + npp] = -g + ops.BE @ beta
        rhs[nq + npp + 1 :] = self.KV @ (ops.ME @ beta - ell)
        sol = self.lu.solve(rhs)
        if not np.all(np.isfinite(sol)):
            raise SolverError("closed-loop step produced non-finite values")
        q = sol[:nq]
        p = sol[nq : nq + npp]
        rho = sol[nq + npp]
        c = sol[nq + npp + 1 :]
        b = self.sys.Z @ c + beta
        return q, p, b, c, rho


def solve_nonhomogeneous_linear(
    sys: LinearizedSystem,
    gain: FeedbackGain | None,
    sources: LinearSources | None,
    q0: np.ndarray,
    dt: float,
    n_steps: int,
    stepper: ClosedLoopStepper | None = None,
) -> LinearTrajectory:
    """March the closed-loop linear system from ``q0`` (boundary data zero at t = 0)."""
    ops = sys.ops
    if sources is None:
        sources = LinearSources.zeros(ops, n_steps)
    if len(sources.f) != n_steps + 1:
        raise SolverError("sources must be sampled at every grid time")
    st = stepper if stepper is not None and stepper.dt == dt else ClosedLoopStepper(sys, gain, dt)
    nst = n_steps + 1
    q = np.zeros((nst, ops.nq))
    p = np.zeros((nst, st.npp))
    b = np.zeros((nst, 2 * ops.nb))
    c = np.zeros((nst, st.m))
    w = np.zeros((nst, sys.n_state))
    rho = np.zeros(nst)
    q[0] = q0
    w[0] = sys.state(q[0], b[0], sources.ell[0])
    for k in range(1, nst):
        q[k], p[k], b[k], c[k], rho[k] = st.step(
            q[k - 1], b[k - 1], sources.f[k], sources.g[k], sources.beta[k], sources.ell[k]
        )
        w[k] = sys.state(q[k], b[k], sources.ell[k])
    traj = LinearTrajectory(dt=dt, q=q, p=p, b=b, c=c, w=w, mean_multiplier=rho)
    data = float(np.sqrt(q0 @ (ops.Mg @ q0))) + sources.norm(dt)
    tn = float(np.sqrt(dt * np.sum(q * (ops.Mg @ q.T).T)))
    traj.stability_constant = tn / data if data > 0 else 0.0
    return traj
