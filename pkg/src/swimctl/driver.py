"""Nonlinear closed loop: the fixed-point map over whole trajectories and its iteration."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import fem
from .errors import FixedPointDiverged, SmallDataError, SwimCtlError
from .extension import Cutoff, DivergenceSolver, P2Interpolator, body_frame_flow, extend_divergence_free
from .feedback import (
    ClosedLoopStepper,
    CoupledOperators,
    FeedbackGain,
    LinearizedSystem,
    LinearSources,
    LinearTrajectory,
    assemble_linearized,
    compute_feedback_gain,
    solve_nonhomogeneous_linear,
)
from .kinematics import assemble_bundle, integrate_rotation
from .mesh import SOLID_BOUNDARY, Mesh
from .solid import DisplacementField, LameSolver, SolidModel, TimeGrid, lame_extend, make_admissible_from_boundary
from .transformed import G_field_q, assemble_sources, compatibility_residual, solid_inertia

log = logging.getLogger(__name__)


@dataclass
class ClosedLoopParams:
    nu: float = 0.1
    rho_s: float = 2.0
    lam: float = 1.0
    gamma: float = 1.0
    margin: float = 1e-6
    dt: float = 0.05
    n_steps: int = 200
    cutoff_inner: float | None = None
    cutoff_outer: float | None = None
    projection_tol: float = 1e-10
    projection_threshold: float | None = None
    vol_tol: float = 5e-2
    extension_tol: float = 1e-13
    ball_radius: float | None = None
    mass: float | None = None
    inertia: float | None = None


class ClosedLoopProblem:
    """Everything that stays fixed across sweeps: operators, gain, factorizations."""

    def __init__(self, mesh: Mesh, params: ClosedLoopParams, gain: FeedbackGain | None = None):
        self.mesh = mesh
        self.params = params
        self.grid = TimeGrid(params.dt, params.n_steps)
        self.solid = SolidModel(mesh, params.rho_s)
        self.ops = CoupledOperators(
            mesh,
            params.nu,
            params.mass if params.mass is not None else self.solid.mass_total,
            params.inertia if params.inertia is not None else self.solid.inertia0,
        )
        self.space = self.ops.space
        self.sys: LinearizedSystem = assemble_linearized(self.ops, params.lam)
        self.gain = gain if gain is not None else compute_feedback_gain(self.sys, params.gamma, params.margin)
        self.stepper = ClosedLoopStepper(self.sys, self.gain, params.dt)
        self.lame = LameSolver(self.solid)
        self.div_solver = DivergenceSolver(self.space)
        self.interp = P2Interpolator(mesh)
        a, R = mesh.solid_radius, mesh.outer_radius
        self.cutoff = Cutoff(params.cutoff_inner or 1.2 * a, params.cutoff_outer or 0.8 * R)
        # solid-boundary node correspondence: fluid order (ops.sb) <-> solid order
        fl = self.space.local(self.solid.boundary_global)
        pos = {int(v): i for i, v in enumerate(fl)}
        self.sb_from_solid = np.array([pos[int(v)] for v in self.ops.sb])  # solid index of each fluid sb node
        self.solid_from_sb = np.argsort(self.sb_from_solid)
        y = self.space.nodes[self.ops.sb]
        self.y_sb = y

    def data_norm(self, q0) -> float:
        return float(np.sqrt(q0 @ (self.ops.Mg @ q0)))

    def unstable_mode(self) -> np.ndarray:
        """Generalized coordinates of the least stable mode, unit data norm."""
        ev, U = np.linalg.eigh(self.sys.A_tilde)
        x = U[:, 0]
        q = self.sys.V @ x
        q = q / self.data_norm(q)
        # deterministic sign
        return q if q[np.argmax(np.abs(q))] > 0 else -q

    def projection_threshold(self) -> float:
        p = self.params.projection_threshold
        return 0.05 * self.mesh.solid_radius if p is None else p

    def smallness_threshold(self) -> float:
        """Data norm at which the first control reaches the projection threshold.

        The first sweep is linear in the data, so the weighted norm of the
        extended control of the unit unstable mode fixes the scale.
        """
        cached = getattr(self, "_threshold", None)
        if cached is not None:
            return cached
        q = self.unstable_mode()
        lin = solve_nonhomogeneous_linear(self.sys, self.gain, None, q, self.grid.dt, self.grid.n_steps, stepper=self.stepper)
        zeta = (self.sys.Z @ lin.c[1:].T).T
        zs = _blocked_to_nodal(zeta)[:, self.solid_from_sb]
        phi = lame_extend(self.solid, zs, solver=self.lame)
        nrm = DisplacementField(self.solid, self.grid, self.params.lam, phi).norm()
        self._threshold = self.projection_threshold() / nrm if nrm > 0 else float("inf")
        return self._threshold


@dataclass(eq=False)
class CoupledTrajectory:
    """One iterate of the fixed-point map."""

    linear: LinearTrajectory
    X_star: DisplacementField | None = None
    X_tilde: np.ndarray | None = None  # (N+1, n, 2) fluid map in the solid frame
    bundles: list | None = None  # interval k -> bundle at index k-1
    zeta: np.ndarray | None = None  # (N+1, 2 nb) blocked control used for X*
    phi_star: np.ndarray | None = None  # (N+1, 2 nb) e^{lam t} dX*/dt on the solid boundary
    W: np.ndarray | None = None  # (N+1, 2 nb)
    source_norms: list = field(default_factory=list)
    extension_report: object = None
    projection_report: object = None

    def velocity(self, ops: CoupledOperators, k: int) -> np.ndarray:
        return ops.velocity(self.linear.q[k], self.linear.b[k])


def zero_trajectory(problem: ClosedLoopProblem) -> CoupledTrajectory:
    ops, N = problem.ops, problem.grid.n_steps
    m = problem.sys.Z.shape[1]
    lt = LinearTrajectory(
        dt=problem.grid.dt,
        q=np.zeros((N + 1, ops.nq)),
        p=np.zeros((N + 1, ops.Bg.shape[0])),
        b=np.zeros((N + 1, 2 * ops.nb)),
        c=np.zeros((N + 1, m)),
        w=np.zeros((N + 1, problem.sys.n_state)),
        mean_multiplier=np.zeros(N + 1),
    )
    return CoupledTrajectory(linear=lt)


def _is_zero(traj: CoupledTrajectory) -> bool:
    lt = traj.linear
    return not (np.any(lt.q) or np.any(lt.b) or np.any(lt.p))


def _lift_momentum(problem: ClosedLoopProblem, traj: CoupledTrajectory, bundles) -> np.ndarray:
    """Generalized momentum of G(u) = (I - grad Y) u at every step (zero without bundles)."""
    ops = problem.ops
    N = problem.grid.n_steps
    ell = np.zeros((N + 1, ops.nq))
    if bundles is None:
        return ell
    for k in range(1, N + 1):
        gq = G_field_q(traj.velocity(ops, k), bundles[k - 1])
        ell[k] = ops.P.T @ fem.flatten(problem.space.load(gq))
    return ell


def _blocked_to_nodal(x):
    nb = x.shape[-1] // 2
    return np.stack([x[..., :nb], x[..., nb:]], axis=-1)


def _nodal_to_blocked(v):
    return np.concatenate([v[..., 0], v[..., 1]], axis=-1)


def apply_N(problem: ClosedLoopProblem, prev: CoupledTrajectory, q0: np.ndarray) -> CoupledTrajectory:
    """One application of the fixed-point map to a whole trajectory."""
    p = problem.params
    ops, sys, grid = problem.ops, problem.sys, problem.grid
    N, dt, lam = grid.n_steps, grid.dt, p.lam
    if p.ball_radius is not None and not _is_zero(prev):
        nrm = trajectory_norm(problem, prev)
        if nrm > p.ball_radius:
            raise SmallDataError(f"iterate norm {nrm:.3e} outside the ball {p.ball_radius:.3e}", stage="apply_N")
    if _is_zero(prev):
        lin = solve_nonhomogeneous_linear(sys, problem.gain, None, q0, dt, N, stepper=problem.stepper)
        return CoupledTrajectory(linear=lin)
    lt = prev.linear
    # (1) control from the previous iterate
    ell_prev = _lift_momentum(problem, prev, prev.bundles)
    zeta = np.zeros((N + 1, 2 * ops.nb))
    for k in range(1, N + 1):
        w = sys.state(lt.q[k], lt.b[k], ell_prev[k])
        zeta[k] = sys.Z @ (problem.gain.K @ w)
    # (2) admissible deformation
    zeta_solid = _blocked_to_nodal(zeta[1:])[:, problem.solid_from_sb]
    try:
        xs, _, prep = make_admissible_from_boundary(
            problem.solid, zeta_solid, grid, lam, tol=p.projection_tol, threshold=p.projection_threshold, solver=problem.lame
        )
    except SwimCtlError as exc:
        raise exc.tagged("projection")
    # (3) fluid maps and bundles
    try:
        ext = extend_divergence_free(xs, solver=problem.div_solver, tol=p.extension_tol)
    except SwimCtlError as exc:
        raise exc.tagged("extension")
    psi, _ = body_frame_flow(problem.mesh.p2_nodes, grid, lt.h_prime, lt.omega, lam, problem.cutoff)
    Xt = np.empty((N + 1, ops.n, 2))
    for k in range(N + 1):
        Xt[k] = problem.interp(psi[k], ext.X[k])
    bundles = []
    try:
        for k in range(1, N + 1):
            bundles.append(
                assemble_bundle(
                    problem.space,
                    0.5 * (Xt[k - 1] + Xt[k]),
                    t=grid.t[k],
                    dX_dt=(Xt[k] - Xt[k - 1]) / dt,
                    vol_tol=p.vol_tol,
                )
            )
    except SwimCtlError as exc:
        raise exc.tagged("bundle")
    # (4) sources from the previous iterate
    model = problem.solid
    sbs = model.boundary_nodes
    Zs = xs.Z
    phi_sb = np.zeros((N + 1, ops.nb, 2))
    phi_sb[1:] = xs.phi[:, sbs][:, problem.sb_from_solid]
    W = np.zeros((N + 1, ops.nb, 2))
    src = LinearSources.zeros(ops, N)
    norms = []
    space = problem.space
    bd = space.boundary[SOLID_BOUNDARY]
    n_f = -np.broadcast_to(bd["normal"][:, None, :], bd["points"].shape)
    Vs = xs.velocity
    for k in range(1, N + 1):
        b = bundles[k - 1]
        zmid = 0.5 * (Zs[k - 1] + Zs[k])
        inertia, inertia_rate = solid_inertia(model.space, model.rho_s, zmid, Vs[k - 1])
        zb = zmid[sbs][problem.sb_from_solid]
        try:
            s = assemble_sources(
                prev.velocity(ops, k),
                lt.p[k],
                lt.h_prime[k],
                lt.omega[k],
                b,
                nu=p.nu,
                lam=lam,
                t=grid.t[k],
                mass=ops.mass,
                inertia0=ops.inertia0,
                inertia=ops.inertia0 + inertia - model.inertia0,
                inertia_rate=inertia_rate,
                om_rate=(lt.omega[k] - lt.omega[k - 1]) / dt,
                Zs_bnd=zb,
                solid_bnd_nodes=ops.sb,
            )
        except SwimCtlError as exc:
            raise exc.tagged("sources")
        corr = p.nu * space.load_grad(s.g_q[..., None, None] * np.eye(2)) - p.nu * space.boundary_load(
            SOLID_BOUNDARY, s.g_bnd[..., None] * n_f
        )
        src.f[k] = ops.generalized_load(s.F + corr, s.F_M, s.F_I)
        src.g[k] = s.g
        W[k] = s.W[ops.sb]
        src.ell[k] = ops.P.T @ fem.flatten(space.load(s.G_q))
        norms.append(s.norms())
    phi_b = _nodal_to_blocked(phi_sb)
    W_b = _nodal_to_blocked(W)
    src.beta[:] = W_b + phi_b - zeta
    src.beta[0] = 0.0
    # (5) closed-loop linear solve
    lin = solve_nonhomogeneous_linear(sys, problem.gain, src, q0, dt, N, stepper=problem.stepper)
    return CoupledTrajectory(
        linear=lin,
        X_star=xs,
        X_tilde=Xt,
        bundles=bundles,
        zeta=zeta,
        phi_star=phi_b,
        W=W_b,
        source_norms=norms,
        extension_report=ext.report,
        projection_report=prep,
    )


# ----- metric and iteration -------------------------------------------------------


def _metric_parts(problem: ClosedLoopProblem):
    cache = getattr(problem, "_metric", None)
    if cache is None:
        sp_ = problem.space
        k = fem.vector(fem.stiffness(sp_))
        m = fem.vector(fem.mass(sp_))
        pm = fem.p1_mass(sp_)
        loc = np.einsum("c,cid,cjd->cij", sp_.area, sp_.p1grad, sp_.p1grad)
        pk = fem.assemble_local(sp_, loc, row_dofs=sp_.cell_p1, col_dofs=sp_.cell_p1, shape=(sp_.n_p1, sp_.n_p1))
        cache = (k, m, pm + pk)
        problem._metric = cache
    return cache


def trajectory_norm(problem: ClosedLoopProblem, a: CoupledTrajectory, b: CoupledTrajectory | None = None) -> float:
    """Discrete H^{2,1} x L^2 H^1 x H^1 x H^1 surrogate of a trajectory (or a difference).

    Velocity: stiffness norm in space plus the L^2 norm of the backward time
    difference; pressure: H^1 norm; rigid velocities: values and time
    differences.  Time sums use trapezoidal weights.
    """
    ops = problem.ops
    K, M, Pm = _metric_parts(problem)
    la = a.linear
    dq = la.q - (b.linear.q if b is not None else 0.0)
    db = la.b - (b.linear.b if b is not None else 0.0)
    dp = la.p - (b.linear.p if b is not None else 0.0)
    dt = la.dt
    u = (ops.P @ dq.T + ops.E @ db.T).T  # (N+1, 2n)
    wt = np.full(len(u), dt)
    wt[0] = wt[-1] = 0.5 * dt
    su = np.einsum("k,ki,ki->", wt, u, (K @ u.T).T)
    sp_ = np.einsum("k,ki,ki->", wt, dp, (Pm @ dp.T).T)
    rig = dq[:, -3:]
    sr = np.einsum("k,ki->", wt, rig**2)
    du = np.diff(u, axis=0) / dt
    st = dt * np.sum(du * (M @ du.T).T)
    sr_t = dt * np.sum((np.diff(rig, axis=0) / dt) ** 2)
    return float(np.sqrt(su + st + sp_ + sr + sr_t))


@dataclass
class IterationReport:
    differences: list
    ratios: list
    norms: list
    converged: bool
    sweeps: int
    data_norm: float
    ball_bound: float | None = None

    def to_dict(self) -> dict:
        return {
            "differences": [float(x) for x in self.differences],
            "ratios": [float(x) for x in self.ratios],
            "norms": [float(x) for x in self.norms],
            "converged": bool(self.converged),
            "sweeps": int(self.sweeps),
            "data_norm": float(self.data_norm),
            "ball_bound": None if self.ball_bound is None else float(self.ball_bound),
        }


def solve_nonlinear(problem: ClosedLoopProblem, q0: np.ndarray, max_sweeps: int = 15, tol: float = 1e-7):
    """Picard iteration of the fixed-point map from the zero trajectory."""
    traj = zero_trajectory(problem)
    diffs, ratios, norms = [], [], []
    converged = False
    s = 0
    for s in range(1, max_sweeps + 1):
        try:
            new = apply_N(problem, traj, q0)
        except SwimCtlError as exc:
            if s == 1:
                raise
            raise FixedPointDiverged(
                f"sweep {s} failed in stage {exc.stage}: {exc}",
                stage="fixed_point",
                differences=diffs,
                ratios=ratios,
                cause=type(exc).__name__,
            ) from exc
        d = trajectory_norm(problem, new, traj)
        diffs.append(d)
        norms.append(trajectory_norm(problem, new))
        if len(diffs) > 1:
            ratios.append(d / diffs[-2] if diffs[-2] > 0 else 0.0)
        log.info("sweep %d: difference %.3e", s, d)
        traj = new
        if not np.isfinite(d):
            break
        if d < tol:
            converged = True
            break
        if len(ratios) >= 3 and all(r >= 1 for r in ratios[-3:]):
            break
    report = IterationReport(diffs, ratios, norms, converged, s, problem.data_norm(q0))
    if not converged:
        raise FixedPointDiverged(
            f"no convergence after {s} sweeps (differences {[f'{x:.2e}' for x in diffs]})",
            stage="fixed_point",
            differences=diffs,
            ratios=ratios,
        )
    return traj, report


# ----- diagnostics and recovery ---------------------------------------------------


def boundary_condition_residual(problem: ClosedLoopProblem, traj: CoupledTrajectory) -> float:
    """max |u - (h' + om ^ y + e^{lam t} dX*/dt + W)| over solid-boundary nodes and steps >= 1."""
    if traj.phi_star is None:
        return float(np.max(np.abs(traj.linear.b[1:] - problem.sys.Z @ traj.linear.c[1:].T).T)) if len(traj.linear.b) > 1 else 0.0
    lt = traj.linear
    worst = 0.0
    for k in range(1, len(lt.q)):
        target = traj.phi_star[k] + traj.W[k]
        worst = max(worst, float(np.max(np.abs(lt.b[k] - target))))
    return worst


def remark4_residuals(problem: ClosedLoopProblem, traj: CoupledTrajectory) -> np.ndarray:
    """Flux of G(u) minus flux of e^{lam t} dX*/dt + W on the solid boundary, per step."""
    from .transformed import G_boundary

    ops = problem.ops
    if traj.bundles is None:
        return np.zeros(0)
    out = []
    for k in range(1, len(traj.linear.q)):
        u = traj.velocity(ops, k)
        gb = G_boundary(u, traj.bundles[k - 1])
        vel = np.zeros((ops.n, 2))
        vel[ops.sb] = _blocked_to_nodal(traj.phi_star[k] + traj.W[k])
        out.append(compatibility_residual(gb, vel, problem.space))
    return np.array(out)


@dataclass
class PhysicalTrajectory:
    t: np.ndarray
    h_prime: np.ndarray
    omega: np.ndarray
    h: np.ndarray
    R: np.ndarray
    energy: np.ndarray
    weighted_energy: np.ndarray
    positions: np.ndarray | None
    velocities: np.ndarray | None
    fit: dict


def decay_fit(t, energy, lam: float, window=(2.0, 8.0)) -> dict:
    """Least-squares slope of log E over t in [window[0]/lam, window[1]/lam]."""
    mask = (t >= window[0] / lam) & (t <= window[1] / lam) & (energy > 0)
    if mask.sum() < 2:
        return {"slope": float("nan"), "lam_fit": float("nan"), "relative_deviation": float("nan")}
    slope = float(np.polyfit(t[mask], np.log(energy[mask]), 1)[0])
    lam_fit = -0.5 * slope
    return {
        "slope": slope,
        "lam_fit": lam_fit,
        "relative_deviation": (lam_fit - lam) / lam,
        "required_slope": -2 * lam * 0.8,
        "window": [window[0] / lam, window[1] / lam],
    }


def recover_physical(problem: ClosedLoopProblem, traj: CoupledTrajectory, with_fields: bool = True) -> PhysicalTrajectory:
    """Physical rigid motion, energies and fluid velocities at Lagrangian sample points."""
    ops, lam = problem.ops, problem.params.lam
    lt = traj.linear
    t = lt.t
    dt = lt.dt
    e = np.exp(-lam * t)
    R = integrate_rotation(lt.omega, lam, dt)
    hp_phys = e[:, None] * np.einsum("kij,kj->ki", R, lt.h_prime)
    om_phys = e * lt.omega
    h = np.zeros((len(t), 2))
    h[1:] = np.cumsum(0.5 * dt * (hp_phys[1:] + hp_phys[:-1]), axis=0)
    we = np.array([ops.energy(lt.q[k], lt.b[k]) for k in range(len(t))])
    energy = e**2 * we
    pos = vel = None
    if with_fields:
        Xt = traj.X_tilde if traj.X_tilde is not None else np.broadcast_to(problem.space.nodes, (len(t), ops.n, 2))
        pos = h[:, None, :] + np.einsum("kij,knj->kni", R, Xt)
        u = np.stack([traj.velocity(ops, k) for k in range(len(t))])
        vel = e[:, None, None] * np.einsum("kij,knj->kni", R, u)
    return PhysicalTrajectory(
        t=t,
        h_prime=hp_phys,
        omega=om_phys,
        h=h,
        R=R,
        energy=energy,
        weighted_energy=we,
        positions=pos,
        velocities=vel,
        fit=decay_fit(t, energy, lam),
    )
