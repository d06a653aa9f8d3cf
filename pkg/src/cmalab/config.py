"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment.  Every key below maps to one
field of RunConfig; anything else is rejected.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

from .errors import ConfigError
from .radial import MIN_NODES

SUBCOMMANDS = ("eigen", "solve", "flow", "sublinear", "superlinear", "verify")
NONLINEARITIES = ("auto", "eigen", "sublinear", "superlinear")
FORCINGS = ("eigen", "zero", "nonlinearity", "linear")
EIGEN_METHODS = ("inverse_iteration", "rayleigh_descent")
SEED_PATHS = ("flux", "bent")
CLUSTERINGS = ("uniform", "boundary_refined")


@dataclass
class RunConfig:
    subcommand: str = "eigen"
    n: int = 1
    N: int = 1024
    clustering: str = "uniform"
    mu_p: float = math.inf
    mu_eps: Optional[float] = None
    nonlinearity: str = "auto"       # built-in name or "table:<csv with x,psi>"; auto follows the subcommand
    density: str = "1 + s"           # Monge-Ampere density for ``solve``, numpy expression in s
    forcing: str = "eigen"           # flow right side
    forcing_k: float = 0.5           # "linear" forcing f = k |x|
    time_tol: Optional[float] = 1e-3  # flow local time error tolerance, none disables
    tol: Optional[float] = None
    steady_tol: float = 1e-8
    dt_init: float = 1e-3
    dt_max: float = 0.5
    t_end: float = 10.0
    perturbation: float = 0.0        # flow initial datum u1 * (1 + perturbation)
    psi_eps: float = 0.0             # flow forcing uses psi^n + psi_eps
    monitors: bool = True
    eigen_method: str = "inverse_iteration"
    m_path: int = 17
    seed_path: str = "flux"
    seed: int = 0
    output: str = "out"
    serial: bool = True

    def validate(self) -> "RunConfig":
        def bad(key, msg):
            raise ConfigError(f"{key}: {msg}", key=key)

        if self.subcommand not in SUBCOMMANDS:
            bad("subcommand", f"must be one of {SUBCOMMANDS}")
        if self.n < 1:
            bad("n", "dimension must be >= 1")
        if self.N < MIN_NODES:
            bad("N", f"N below minimum {MIN_NODES}")
        if self.clustering not in CLUSTERINGS:
            bad("clustering", f"must be one of {CLUSTERINGS}")
        if not (math.isinf(self.mu_p) or self.mu_p > 2):
            bad("mu_p", "need p > 2 or inf")
        if self.mu_eps is not None and not self.mu_eps > 0:
            bad("mu_eps", "must be positive")
        if self.nonlinearity not in NONLINEARITIES and not self.nonlinearity.startswith("table:"):
            bad("nonlinearity", f"must be one of {NONLINEARITIES} or table:<path>")
        if self.forcing not in FORCINGS:
            bad("forcing", f"must be one of {FORCINGS}")
        if self.eigen_method not in EIGEN_METHODS:
            bad("eigen_method", f"must be one of {EIGEN_METHODS}")
        if self.seed_path not in SEED_PATHS:
            bad("seed_path", f"must be one of {SEED_PATHS}")
        if self.forcing_k < 0:
            bad("forcing_k", "must be >= 0")
        for key in ("tol", "steady_tol", "dt_init", "dt_max", "t_end", "time_tol"):
            val = getattr(self, key)
            if val is not None and not val > 0:
                bad(key, "tolerances and times must be > 0")
        if self.dt_init > self.dt_max:
            bad("dt_init", "must not exceed dt_max")
        if self.m_path < 3:
            bad("m_path", "need at least 3 path points")
        if self.perturbation < 0:
            bad("perturbation", "must be >= 0")
        if self.psi_eps < 0:
            bad("psi_eps", "must be >= 0")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mu_p"] = "inf" if math.isinf(self.mu_p) else self.mu_p
        return d

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if v is None:
                continue
            lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


_TYPES = {f.name: f.type for f in fields(RunConfig)}
ALIASES = {"grid": "N", "dt": "dt_init"}      # names matching the CLI flags


def _convert(key: str, raw: str, lineno: Optional[int]):
    kind = _TYPES[key]
    try:
        if key == "mu_p":
            if raw.lower() in ("inf", "infinity"):
                return math.inf
            return float(raw)
        if raw.lower() == "none" and kind.startswith("Optional"):
            return None
        if "bool" in kind:
            if raw.lower() in ("true", "yes", "1"):
                return True
            if raw.lower() in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if "int" in kind:
            return int(raw)
        if "float" in kind:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value {raw!r} for {key}", line=lineno, key=key) from None


def parse_config(text: str, overrides: Optional[dict] = None) -> RunConfig:
    """Parse and validate; ``overrides`` (already typed or strings) win over the text.

    ``grid`` and ``dt`` are accepted as aliases of ``N`` and ``dt_init``.
    """
    vals = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {body!r}", line=lineno)
        key, raw = (x.strip() for x in body.split("=", 1))
        key = ALIASES.get(key, key)
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}", line=lineno, key=key)
        if key in vals:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}", line=lineno, key=key)
        vals[key] = _convert(key, raw, lineno)
    for key, v in (overrides or {}).items():
        if key not in _TYPES:
            raise ConfigError(f"unknown key {key!r}", key=key)
        vals[key] = _convert(key, v, None) if isinstance(v, str) else v
    return RunConfig(**vals).validate()


def load_config(path, overrides: Optional[dict] = None) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, overrides)
