"""Scenario execution and artifact writing shared by the CLI and the HTTP service."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checks
from .config import RunConfig
from .driver import boundary_condition_residual, recover_physical, remark4_residuals, solve_nonlinear
from .errors import FixedPointDiverged
from .extension import extend_divergence_free, pointwise_det_error, weak_det_defect
from .feedback import solve_nonhomogeneous_linear
from .mesh import FLUID, SOLID, Space, write_mesh
from .solid import SolidModel, constraint_functional, make_admissible_from_boundary
from .transformed import pullback_consistency

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

EXIT_OK, EXIT_CHECK, EXIT_CONFIG = 0, 1, 2


@dataclass
class RunResult:
    status: int
    summary: dict
    artifacts: list = field(default_factory=list)


class _Writer:
    def __init__(self, out: Path):
        self.out = out
        out.mkdir(parents=True, exist_ok=True)
        self.written = []

    def csv(self, name, header, rows):
        path = self.out / name
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([v if isinstance(v, (int, np.integer, str)) else f"{v:.12e}" for v in row])
        self.written.append(name)

    def json(self, name, obj):
        obj = {"schema_version": SCHEMA_VERSION, **checks._plain(obj)}
        (self.out / name).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        self.written.append(name)

    def matrix(self, name, mat):
        np.savetxt(self.out / name, np.atleast_2d(mat), fmt="%.12e")
        self.written.append(name)


def _verdicts(items) -> tuple:
    """items: name -> (value, threshold, passed)."""
    report = {k: {"value": v, "threshold": t, "passed": bool(p)} for k, (v, t, p) in items.items()}
    return report, all(r["passed"] for r in report.values())


def _write_linear_artifacts(wr: _Writer, ctx: checks.CheckContext):
    prob = ctx.problem
    sys, gain = prob.sys, prob.gain
    wr.matrix("gain.txt", gain.K)
    ol = np.linalg.eigvalsh(sys.A)[::-1]
    cl = gain.spectrum[np.argsort(-gain.spectrum.real, kind="stable")]
    wr.csv(
        "spectrum.csv",
        ["index", "open_loop", "closed_loop_real", "closed_loop_imag"],
        [(i, ol[i], cl[i].real, cl[i].imag) for i in range(len(ol))],
    )


def _scenario_linear(cfg: RunConfig, ctx: checks.CheckContext, wr: _Writer) -> dict:
    prob = ctx.problem
    sys, gain = prob.sys, prob.gain
    _write_linear_artifacts(wr, ctx)
    q0 = cfg.amplitude * cfg.solid_radius * prob.unstable_mode()
    lin = solve_nonhomogeneous_linear(sys, gain, None, q0, prob.grid.dt, prob.grid.n_steps, stepper=prob.stepper)
    kin = np.array([prob.ops.energy(lin.q[k], lin.b[k]) for k in range(len(lin.q))])
    lyap = np.einsum("ki,ij,kj->k", lin.w, gain.P, lin.w)
    cnorm = np.linalg.norm(lin.c, axis=1)
    hp, om = lin.h_prime, lin.omega
    wr.csv(
        "trajectory.csv",
        ["t", "h_prime_x", "h_prime_y", "omega", "kinetic_energy", "riccati_energy", "control_norm"],
        [(lin.t[k], hp[k, 0], hp[k, 1], om[k], kin[k], lyap[k], cnorm[k]) for k in range(len(lin.t))],
    )
    verdicts, ok = _verdicts(
        {
            "closed_loop_margin": (gain.closed_loop_margin, 0.0, gain.closed_loop_margin < 0),
            "riccati_residual": (gain.riccati_residual, 1e-8, gain.riccati_residual < 1e-8),
            "riccati_energy_growth_steps": (
                int(np.sum(np.diff(lyap[1:]) >= 0)),
                0,
                bool(np.all(np.diff(lyap[1:]) < 0)) or cfg.amplitude == 0,
            ),
        }
    )
    return {
        "passed": ok,
        "checks": verdicts,
        "n_state": sys.n_state,
        "n_control": sys.n_control,
        "open_loop_margin": gain.open_loop_margin,
        "newton_iterations": gain.newton_iterations,
        "kinetic_energy_final": kin[-1],
    }


def _scenario_nonlinear(cfg: RunConfig, ctx: checks.CheckContext, wr: _Writer) -> dict:
    prob = ctx.problem
    _write_linear_artifacts(wr, ctx)
    thr = prob.smallness_threshold()
    q0 = cfg.data_fraction * thr * prob.unstable_mode()
    try:
        traj, rep = solve_nonlinear(prob, q0, max_sweeps=cfg.max_sweeps, tol=cfg.fixed_point_tol)
    except FixedPointDiverged as exc:
        info = {
            "converged": False,
            "stage": exc.stage,
            "message": str(exc),
            "differences": exc.details.get("differences", []),
            "ratios": exc.details.get("ratios", []),
            "cause": exc.details.get("cause"),
            "smallness_threshold": thr,
            "data_norm": prob.data_norm(q0),
        }
        wr.json("iteration.json", info)
        return {"passed": False, "checks": {}, "iteration": info}
    wr.json("iteration.json", {**rep.to_dict(), "smallness_threshold": thr})
    phys = recover_physical(prob, traj, with_fields=False)
    wr.csv(
        "trajectory.csv",
        ["t", "h_x", "h_y", "h_prime_x", "h_prime_y", "omega", "energy", "weighted_energy"],
        [
            (phys.t[k], phys.h[k, 0], phys.h[k, 1], phys.h_prime[k, 0], phys.h_prime[k, 1], phys.omega[k], phys.energy[k], phys.weighted_energy[k])
            for k in range(len(phys.t))
        ],
    )
    wr.json("decay_fit.json", {"lam": prob.params.lam, **phys.fit})
    r4 = remark4_residuals(prob, traj)
    r4max = float(np.abs(r4).max()) if r4.size else 0.0
    ratio = max(rep.ratios) if rep.ratios else 0.0
    verdicts, ok = _verdicts(
        {
            "sweeps": (rep.sweeps, 15, rep.sweeps <= 15),
            "contraction_ratio": (ratio, 1.0, ratio < 1),
            "decay_slope": (phys.fit["slope"], phys.fit["required_slope"], phys.fit["slope"] <= phys.fit["required_slope"]),
            "compatibility": (r4max, 1e-7, r4max < 1e-7),
        }
    )
    return {
        "passed": ok,
        "checks": verdicts,
        "boundary_condition_residual": boundary_condition_residual(prob, traj),
        "lam_fit": phys.fit["lam_fit"],
        "smallness_threshold": thr,
        "data_norm": rep.data_norm,
    }


def _projected(cfg: RunConfig, ctx: checks.CheckContext):
    """Admissible deformation with peak displacement amplitude * solid_radius.

    Standalone runs skip the smallness gate unless projection_threshold is set.
    """
    threshold = np.inf if cfg.projection_threshold is None else cfg.projection_threshold
    if cfg.amplitude == 0:
        model = SolidModel(ctx.mesh, cfg.rho_s)
        zeta = np.zeros((ctx.grid.n_steps, len(model.boundary_nodes), 2))
        proj, resid, rep = make_admissible_from_boundary(model, zeta, ctx.grid, ctx.lam, tol=cfg.projection_tol, threshold=threshold)
        return proj, resid, rep
    proj, rep, zeta = checks.deformation_of_amplitude(ctx, cfg.amplitude * cfg.solid_radius, cfg.seed, threshold=threshold)
    return proj, proj.model.trace(proj.phi) - zeta, rep


def _scenario_projection(cfg: RunConfig, ctx: checks.CheckContext, wr: _Writer) -> dict:
    return _projection_artifacts(cfg, ctx, wr)[0]


def _projection_artifacts(cfg: RunConfig, ctx: checks.CheckContext, wr: _Writer):
    proj, resid, rep = _projected(cfg, ctx)
    cr = constraint_functional(proj)
    t = ctx.grid.t
    wr.csv(
        "constraints.csv",
        ["t", "momentum_x", "momentum_y", "angular", "flux", "boundary_mismatch"],
        [(t[k + 1], cr.a[k, 0], cr.a[k, 1], cr.b[k], cr.c[k], float(np.abs(resid[k]).max())) for k in range(len(cr.b))],
    )
    mx = cr.max_abs()
    verdicts, ok = _verdicts(
        {
            "max_constraint": (mx, 1e-8, mx < 1e-8),
            "kkt_residual": (rep.kkt_residual, 1e-8, rep.kkt_residual < 1e-8),
        }
    )
    return {
        "passed": ok,
        "checks": verdicts,
        "iterations": rep.iterations,
        "distance": rep.distance,
        "constraint_history": rep.constraint_history,
        "weighted_norm": proj.norm(),
    }, proj


def _scenario_extension(cfg: RunConfig, ctx: checks.CheckContext, wr: _Writer) -> dict:
    out, proj = _projection_artifacts(cfg, ctx, wr)
    space = Space(ctx.mesh)
    ext = extend_divergence_free(proj, space=space, tol=cfg.extension_tol)
    t = ctx.grid.t
    wr.csv(
        "determinant.csv",
        ["t", "weak_defect", "pointwise_error"],
        [(t[k], weak_det_defect(space, ext.Z[k]), pointwise_det_error(space, ext.Z[k])) for k in range(len(t))],
    )
    rep = ext.report
    ext_checks, ok = _verdicts(
        {
            "weak_det_defect": (rep.weak_det_defect, 1e-8, rep.weak_det_defect < 1e-8),
            "pointwise_det_error": (rep.pointwise_det_error, cfg.vol_tol, rep.pointwise_det_error < cfg.vol_tol),
        }
    )
    out["checks"].update(ext_checks)
    out["passed"] = out["passed"] and ok
    out["extension"] = {
        "sweeps": rep.sweeps,
        "update_history": rep.update_history,
        "compatibility": rep.compatibility,
        "boundary_trace_error": rep.boundary_trace_error,
    }
    return out


def _scenario_pullback(cfg: RunConfig, ctx: checks.CheckContext, wr: _Writer) -> dict:
    res = pullback_consistency(Space(ctx.mesh), nu=cfg.nu, dt=cfg.dt or 1e-3)
    verdicts, ok = _verdicts({"relative_error": (res["relative_error"], res["tolerance"], res["relative_error"] < res["tolerance"])})
    return {"passed": ok, "checks": verdicts, **res}


SCENARIO_FUNCS = {
    "linear-closed-loop": _scenario_linear,
    "nonlinear-stabilization": _scenario_nonlinear,
    "projection-only": _scenario_projection,
    "extension-only": _scenario_extension,
    "pullback-verify": _scenario_pullback,
}


def _recorded(cfg: RunConfig) -> dict:
    # where artifacts go is not part of what they depend on
    d = cfg.to_dict()
    d.pop("output_dir")
    return d


def _header(cfg: RunConfig, ctx: checks.CheckContext) -> dict:
    return {
        "scenario": cfg.scenario,
        "config": _recorded(cfg),
        "lam": ctx.lam,
        "slowest_decay_rate": ctx.decay_rate,
        "dt": ctx.dt,
        "n_steps": ctx.n_steps,
        "mesh": mesh_summary(ctx.mesh),
    }


def run_scenario(cfg: RunConfig) -> RunResult:
    """Run the configured scenario and write its artifacts; status 0 or 1."""
    t0 = time.perf_counter()
    ctx = checks.CheckContext(cfg)
    wr = _Writer(cfg.output_path)
    body = SCENARIO_FUNCS[cfg.scenario](cfg, ctx, wr)
    summary = {**_header(cfg, ctx), **body}
    wr.json("summary.json", summary)
    log.info("%s finished in %.1f s", cfg.scenario, time.perf_counter() - t0)
    return RunResult(EXIT_OK if body["passed"] else EXIT_CHECK, checks._plain(summary), wr.written)


def verify_suite(cfg: RunConfig, only=None) -> RunResult:
    """Run the acceptance battery and write verify.json."""
    results = checks.run_all(cfg, only=only)
    for c in results:
        log.info("%s (%.1f s)", c.line(), c.seconds)
    report = {
        "config": _recorded(cfg),
        "checks": [c.to_dict() for c in results],
        "all_passed": all(c.passed for c in results),
    }
    wr = _Writer(cfg.output_path)
    wr.json("verify.json", report)
    return RunResult(EXIT_OK if report["all_passed"] else EXIT_CHECK, checks._plain({"schema_version": SCHEMA_VERSION, **report}), wr.written)


def mesh_summary(mesh) -> dict:
    fluid = Space(mesh)
    e = mesh.vertices[mesh.edges[0]]
    lengths = np.linalg.norm(e[:, 1] - e[:, 0], axis=1)
    return {
        "vertices": len(mesh.vertices),
        "cells": len(mesh.cells),
        "fluid_cells": int(np.sum(mesh.region_tags == FLUID)),
        "solid_cells": int(np.sum(mesh.region_tags == SOLID)),
        "boundary_edges": len(mesh.boundary_edges),
        "fluid_p2_nodes": fluid.n,
        "fluid_velocity_dofs": 2 * fluid.n,
        "fluid_pressure_dofs": fluid.n_p1,
        "h_max": float(lengths.max()),
        "h_min": float(lengths.min()),
        "solid_radius": mesh.solid_radius,
        "outer_radius": mesh.outer_radius,
    }


def write_mesh_artifacts(cfg: RunConfig) -> RunResult:
    mesh = checks.build_mesh(cfg)
    wr = _Writer(cfg.output_path)
    write_mesh(mesh, wr.out / "mesh.txt")
    wr.written.append("mesh.txt")
    summary = mesh_summary(mesh)
    wr.json("mesh_summary.json", summary)
    return RunResult(EXIT_OK, checks._plain({"schema_version": SCHEMA_VERSION, **summary}), wr.written)


COMMANDS = {"run": run_scenario, "verify": verify_suite, "mesh": write_mesh_artifacts}


def execute(command: str, cfg: RunConfig) -> RunResult:
    """Dispatch a command; stage failures become status 1 with the stage tag.

    Config and file errors propagate so the caller can map them to status 2.
    """
    from .errors import ConfigError, SwimCtlError

    try:
        return COMMANDS[command](cfg)
    except (ConfigError, OSError):
        raise
    except SwimCtlError as exc:
        stage = exc.stage or type(exc).__name__
        log.error("stage %s failed: %s", stage, exc)
        summary = {"schema_version": SCHEMA_VERSION, "error": type(exc).__name__, "stage": stage, "message": str(exc)}
        return RunResult(EXIT_CHECK, summary, [])
