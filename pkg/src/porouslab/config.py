"""Flat ``key=value`` run configuration with dotted keys.

Lines are ``section.key=value``; ``#`` starts a comment, blank lines are
ignored. Every key is typed and validated before any computation. Vector
values are comma separated, lists of vectors are separated by ``;``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from porouslab._validation import ConfigError
from porouslab.dissipative import ResolventConfig
from porouslab.nonlinearity import PsiSpec
from porouslab.sde import SamplerConfig
from porouslab.spectral import CovarianceSpec, DomainSpec

__all__ = ["SCHEMA", "RunConfig", "parse_config_text", "load_config", "DEFAULTS"]


def _vec(text):
    text = str(text).strip()
    if not text:
        return ()
    return tuple(float(v) for v in text.split(","))


def _vecs(text):
    text = str(text).strip()
    if not text:
        return ()
    return tuple(_vec(part) for part in text.split(";") if part.strip())


def _opt(conv):
    def parse(text):
        t = str(text).strip()
        return None if t.lower() in ("", "none", "auto") else conv(t)

    return parse


# key -> (parser, default); psi.kind has no default when a file is given
SCHEMA = {
    "domain.length": (float, 1.0),
    "domain.grid_points": (int, 257),
    "psi.kind": (str, "power_odd"),
    "psi.m": (int, 3),
    "psi.alpha": (float, 0.0),
    "psi.table": (str, ""),
    "psi.r": (_opt(float), None),
    "psi.kappa0": (_opt(float), None),
    "psi.kappa1": (_opt(float), None),
    "psi.C1": (_opt(float), None),
    "cov.gamma": (float, 1.0),
    "sde.n_modes": (int, 8),
    "sde.grid_points": (_opt(int), None),
    "sde.dt": (float, 1e-3),
    "sde.n_steps": (int, 500_000),
    "sde.burn_in": (_opt(int), None),
    "sde.thinning": (int, 1),
    "sde.seed": (int, 42),
    "sde.noise_convention": (str, "H"),
    "sde.x0": (_vec, ()),
    "resolvent.newton_tol": (float, 1e-12),
    "resolvent.max_iter": (int, 50),
    "resolvent.damping": (float, 0.5),
    "battery.seed": (int, 42),
    "battery.trials": (int, 100),
    "battery.n_modes": (int, 8),
    "battery.moreau_fields": (int, 20),
    "invariance.samples": (str, ""),
    "invariance.z": (float, 3.0),
    "invariance.calibration_draws": (int, 1_000_000),
    "invariance.negative_steps": (int, 200),
    "invariance.excessivity_restarts": (int, 2000),
    "invariance.excessivity_horizon": (float, 0.1),
    "invariance.lambda_nu": (float, 0.0),
    "invariance.martingale_paths": (int, 10_000),
    "invariance.martingale_t": (float, 0.1),
    "invariance.martingale_function": (str, "gauss_e1_shift"),
    "moments.samples": (str, ""),
    "moments.lyapunov_states": (int, 200),
    "moments.lyapunov_paths": (int, 64),
    "moments.lyapunov_t_max": (float, 6.0),
    "moments.lyapunov_dt": (float, 1e-2),
    "moments.ball_radius": (float, 0.1),
    "control.n_modes": (int, 4),
    "control.pairs": (int, 20),
    "control.seed": (int, 42),
    "control.y0": (_vec, ()),
    "control.y1": (_vec, ()),
    "control.horizon": (float, 1.0),
    "control.rho": (_opt(float), None),
    "control.rho_factor": (float, 1.5),
    "control.eps": (_vec, (1e-1, 1e-2, 1e-3, 1e-4)),
    "control.ode_dt": (float, 1e-3),
    "control.target_fraction": (float, 0.05),
    "support.n_modes": (int, 4),
    "support.dt": (float, 1e-2),
    "support.paths": (int, 100_000),
    "support.alpha": (float, 0.1),
    "support.x0": (_vec, ()),
    "support.targets": (_vecs, ((0.6, 0.0, 0.0, 0.0), (0.9, 0.0, 0.0, 0.0), (1.2, 0.0, 0.0, 0.0))),
    "support.horizon": (float, 1.0),
    "oracle.alpha": (float, 1.0),
    "oracle.linear_steps": (int, 500_000),
    "oracle.density_samples": (int, 100_000),
    "oracle.density_dt": (float, 1e-3),
    "oracle.density_thinning": (int, 10),
    "oracle.ks_max": (float, 0.05),
}

DEFAULTS = {k: v[1] for k, v in SCHEMA.items()}
REQUIRED_IN_FILE = ("psi.kind",)


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ";".join(_format(v) for v in value)
        return ",".join(repr(float(v)) for v in value)
    return str(value)


def parse_config_text(text: str, require=REQUIRED_IN_FILE) -> dict:
    """Parse and type-check config text; missing keys take their defaults."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    for key in require:
        if key not in raw:
            raise ConfigError(f"missing required key {key!r}")
    values = dict(DEFAULTS)
    for key, text_value in raw.items():
        conv = SCHEMA[key][0]
        try:
            values[key] = conv(text_value)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"bad value for {key}: {text_value!r} ({err})") from None
    return values


@dataclass
class RunConfig:
    """Validated run configuration; ``values`` maps every schema key to a typed value."""

    values: dict

    def __post_init__(self):
        # build every component once so errors surface before any compute
        self.psi()
        self.domain()
        self.covariance()
        self.sampler()
        self.resolvent()
        v = self.values
        for key in ("battery.trials", "control.pairs", "support.paths", "oracle.linear_steps",
                    "oracle.density_samples", "invariance.martingale_paths"):
            if v[key] < 0:
                raise ConfigError(f"{key} must be nonnegative")
        if v["battery.trials"] < 1:
            raise ConfigError("battery.trials must be at least 1")
        if v["support.alpha"] <= 0:
            raise ConfigError("support.alpha must be positive")
        if any(e <= 0 for e in v["control.eps"]):
            raise ConfigError("control.eps values must be positive")
        if (len(v["control.y0"]) == 0) != (len(v["control.y1"]) == 0):
            raise ConfigError("control.y0 and control.y1 must be given together")
        if v["control.y0"] and len(v["control.y0"]) != len(v["control.y1"]):
            raise ConfigError("control.y0 and control.y1 must have the same length")
        for t in v["support.targets"]:
            if len(t) != v["support.n_modes"]:
                raise ConfigError("each support target needs support.n_modes coefficients")
        if v["support.x0"] and len(v["support.x0"]) != v["support.n_modes"]:
            raise ConfigError("support.x0 needs support.n_modes coefficients")

    def __getitem__(self, key):
        return self.values[key]

    def psi(self) -> PsiSpec:
        v = self.values
        kind = v["psi.kind"]
        kw = {k: v[f"psi.{k}"] for k in ("r", "kappa0", "kappa1", "C1") if v[f"psi.{k}"] is not None}
        try:
            if kind == "custom":
                pairs = [p.split(":") for p in v["psi.table"].split(";") if p.strip()]
                xs = tuple(float(a) for a, _ in pairs)
                ys = tuple(float(b) for _, b in pairs)
                return PsiSpec("custom", table_x=xs, table_y=ys, **kw)
            return PsiSpec(kind, m=v["psi.m"], alpha=v["psi.alpha"], **kw)
        except ValueError as err:
            raise ConfigError(f"psi: {err}") from None

    def domain(self) -> DomainSpec:
        try:
            return DomainSpec(self.values["domain.length"], self.values["domain.grid_points"])
        except ValueError as err:
            raise ConfigError(f"domain: {err}") from None

    def covariance(self) -> CovarianceSpec:
        try:
            return CovarianceSpec(self.values["cov.gamma"], self.values["domain.length"])
        except ValueError as err:
            raise ConfigError(f"cov: {err}") from None

    def sampler(self, **overrides) -> SamplerConfig:
        v = self.values
        kw = dict(n_modes=v["sde.n_modes"], grid_points=v["sde.grid_points"], length=v["domain.length"],
                  dt=v["sde.dt"], n_steps=v["sde.n_steps"], burn_in=v["sde.burn_in"], thinning=v["sde.thinning"],
                  seed=v["sde.seed"], noise_convention=v["sde.noise_convention"], gamma=v["cov.gamma"],
                  x0=v["sde.x0"] or None)
        kw.update(overrides)
        return SamplerConfig(**kw)

    def resolvent(self) -> ResolventConfig:
        v = self.values
        try:
            return ResolventConfig(v["resolvent.newton_tol"], v["resolvent.max_iter"], v["resolvent.damping"])
        except ValueError as err:
            raise ConfigError(f"resolvent: {err}") from None

    def with_seed(self, seed: int) -> "RunConfig":
        values = dict(self.values)
        for key in ("sde.seed", "battery.seed", "control.seed"):
            values[key] = int(seed)
        return RunConfig(values)

    def to_text(self) -> str:
        return "".join(f"{k}={_format(self.values[k])}\n" for k in sorted(self.values))

    def to_dict(self) -> dict:
        return {k: _format(self.values[k]) for k in sorted(self.values)}


def load_config(path=None, text: str | None = None) -> RunConfig:
    """Defaults when neither is given; otherwise ``psi.kind`` must be present."""
    if path is None and text is None:
        return RunConfig(dict(DEFAULTS))
    if text is None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        text = p.read_text()
    return RunConfig(parse_config_text(text))
