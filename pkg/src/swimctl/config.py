"""Run configuration: INI text with sections, validated into a RunConfig."""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError

SCENARIOS = (
    "nonlinear-stabilization",
    "linear-closed-loop",
    "projection-only",
    "extension-only",
    "pullback-verify",
)

# section -> key -> (type, default, help); None defaults mean "derived"
SCHEMA: dict = {
    "geometry": {
        "solid_radius": (float, 0.5, "radius of the solid disk"),
        "outer_radius": (float, 1.5, "radius of the container"),
        "h_target": (float, 0.3, "target mesh size"),
        "mesh_file": (str, "", "optional mesh text file; overrides the generated mesh"),
    },
    "physics": {
        "nu": (float, 0.1, "kinematic viscosity"),
        "rho_s": (float, 2.0, "solid density"),
        "mass": (float, None, "solid mass override (default rho_s * area)"),
        "inertia": (float, None, "moment of inertia override (default rho_s * int |y|^2)"),
    },
    "control": {
        "lam": (float, None, "decay rate; default 1.5 x slowest open-loop decay rate"),
        "lam_factor": (float, 1.5, "multiple of the slowest decay rate used when lam is unset"),
        "gamma": (float, 1.0, "control cost weight"),
        "margin": (float, 1e-6, "required closed-loop stability margin"),
    },
    "discretization": {
        "dt": (float, None, "time step; default 0.05 / lam"),
        "horizon": (float, None, "final time; default 10 / lam"),
        "projection_tol": (float, 1e-10, "constraint tolerance of the projection"),
        "projection_threshold": (float, None, "smallness threshold of the projection; default 0.05 a"),
        "extension_tol": (float, 1e-13, "relative Picard update tolerance of the extension"),
        "vol_tol": (float, 5e-2, "largest accepted pointwise |det - 1| of the fluid map"),
        "fixed_point_tol": (float, 1e-7, "tolerance on successive trajectory differences"),
        "max_sweeps": (int, 15, "maximum fixed-point sweeps"),
        "data_fraction": (float, 0.1, "initial data norm as a fraction of the smallness threshold"),
    },
    "run": {
        "scenario": (str, "nonlinear-stabilization", "one of " + ", ".join(SCENARIOS)),
        "output_dir": (str, "out", "artifact directory, relative to the config file"),
        "seed": (int, 0, "random seed of generated data"),
        "threads": (int, 1, "BLAS thread count"),
        "amplitude": (float, 0.01, "peak displacement (projection/extension) or initial data norm (linear) relative to a"),
    },
}


@dataclass
class RunConfig:
    solid_radius: float = 0.5
    outer_radius: float = 1.5
    h_target: float = 0.3
    mesh_file: str = ""
    nu: float = 0.1
    rho_s: float = 2.0
    mass: float | None = None
    inertia: float | None = None
    lam: float | None = None
    lam_factor: float = 1.5
    gamma: float = 1.0
    margin: float = 1e-6
    dt: float | None = None
    horizon: float | None = None
    projection_tol: float = 1e-10
    projection_threshold: float | None = None
    extension_tol: float = 1e-13
    vol_tol: float = 5e-2
    fixed_point_tol: float = 1e-7
    max_sweeps: int = 15
    data_fraction: float = 0.1
    scenario: str = "nonlinear-stabilization"
    output_dir: str = "out"
    seed: int = 0
    threads: int = 1
    amplitude: float = 0.01
    base_dir: str = field(default=".", repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    @property
    def output_path(self) -> Path:
        p = Path(self.output_dir)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def resolved_time(self, lam: float):
        """(dt, n_steps) from the configured or default step and horizon."""
        dt = self.dt if self.dt is not None else 0.05 / lam
        T = self.horizon if self.horizon is not None else 10.0 / lam
        if T * lam < 5 - 1e-12:
            raise ConfigError(f"horizon * lam = {T * lam:.3g} must be at least 5", field="discretization.horizon")
        if dt >= T:
            raise ConfigError("dt must be smaller than the horizon", field="discretization.dt")
        return dt, int(round(T / dt))


def _convert(section, key, typ, raw):
    try:
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {typ.__name__}", field=f"{section}.{key}")


def parse_config(text: str, base_dir: str = ".") -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    values = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", field=section)
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}", field=f"{section}.{key}")
            typ = SCHEMA[section][key][0]
            values[key] = _convert(section, key, typ, raw.strip())
    cfg = RunConfig(base_dir=base_dir, **values)
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}", field="path") from exc
    return parse_config(text, base_dir=str(p.resolve().parent))


def _section_of(key):
    for s, keys in SCHEMA.items():
        if key in keys:
            return s
    return "?"


def validate(cfg: RunConfig) -> None:
    def bad(key, msg):
        raise ConfigError(f"{_section_of(key)}.{key}: {msg}", field=f"{_section_of(key)}.{key}")

    positive = [
        "solid_radius", "outer_radius", "h_target", "nu", "rho_s", "lam_factor", "gamma", "margin",
        "projection_tol", "extension_tol", "vol_tol", "fixed_point_tol", "data_fraction",
    ]
    for key in positive:
        if not getattr(cfg, key) > 0:
            bad(key, f"must be positive, got {getattr(cfg, key)}")
    for key in ("mass", "inertia", "lam", "dt", "horizon", "projection_threshold"):
        v = getattr(cfg, key)
        if v is not None and not v > 0:
            bad(key, f"must be positive, got {v}")
    if cfg.solid_radius >= cfg.outer_radius:
        bad("outer_radius", "must exceed solid_radius")
    if cfg.h_target >= cfg.outer_radius - cfg.solid_radius:
        bad("h_target", "must be smaller than the annulus width")
    if not cfg.amplitude >= 0:
        bad("amplitude", f"must be non-negative, got {cfg.amplitude}")
    if cfg.max_sweeps < 1:
        bad("max_sweeps", "must be at least 1")
    if cfg.threads < 1:
        bad("threads", "must be at least 1")
    if cfg.scenario not in SCENARIOS:
        bad("scenario", f"unknown scenario {cfg.scenario!r}")
    if cfg.lam is not None:
        cfg.resolved_time(cfg.lam)


def reference_text() -> str:
    """Commented reference config listing every key with its default."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (typ, default, help_) in keys.items():
            lines.append(f"# {help_}")
            if default is None:
                lines.append(f"# {key} =")
            else:
                lines.append(f"{key} = {default}")
        lines.append("")
    return "\n".join(lines)
