"""Command-line entry point: ``cmalab <subcommand> [--config FILE] [flags]``.

Exit codes: 0 success, 1 a check failed, 2 configuration error, 3 numerical
failure (the stage id is printed and stored in report.json).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import time
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import drivers, flow
from .config import RunConfig, parse_config
from .errors import ConeViolation, ConfigError, ConvergenceError
from .functionals import (Nonlinearity, eigen_nonlinearity, energy_E, energy_I, ma_rad,
                          mt_check, rayleigh)
from .mu import LogMu, build_mu, certify_mu
from .oracles import lambda1_disc
from .radial import RadialFn, is_psh, make_grid, pav, psh_project
from .solvers import (comparison_check, eigen_inverse_iteration, eigen_rayleigh_descent,
                      solve_radial_ma)

log = logging.getLogger("cmalab")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


# -- output -------------------------------------------------------------------

def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        x = x.item()
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    return x


def content_hash(obj) -> str:
    if isinstance(obj, str):
        data = obj.encode()
    else:
        data = json.dumps(_clean(obj), sort_keys=True).encode()
    return hashlib.sha256(data).hexdigest()


def write_json(path, payload: dict, cfg: RunConfig, timing: Optional[dict] = None) -> dict:
    """Report with the resolved config and a hash of everything except timings."""
    body = _clean(payload)
    out = {"config": cfg.to_dict(), "content_sha256": content_hash(body), **body}
    if timing:
        out["timing"] = _clean(timing)
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def write_table(path, columns, rows, cfg: RunConfig) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(columns)
    for row in rows:
        wr.writerow([f"{float(x):.17g}" for x in row])
    text = buf.getvalue()
    digest = content_hash(text)
    with open(path, "w", newline="") as fh:
        fh.write(f"# config: {json.dumps(cfg.to_dict(), sort_keys=True)}\n")
        fh.write(f"# content_sha256: {digest}\n")
        fh.write(text)
    return digest


def write_profile(path, v: RadialFn, cfg: RunConfig, name: str = "value") -> str:
    return write_table(path, ("s", name), zip(v.grid.nodes, v.values), cfg)


# -- building blocks ----------------------------------------------------------

def make_mu(cfg: RunConfig):
    return build_mu(cfg.mu_p, epsilon=cfg.mu_eps)


def table_nonlinearity(path: str, n: int) -> Nonlinearity:
    """psi(x) from a CSV with columns x, psi (x <= 0), PCHIP between samples.

    Outside the table psi continues linearly with the end slope.
    """
    try:
        data = np.loadtxt(path, delimiter=",", comments="#", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"nonlinearity table {path}: {exc}", key="nonlinearity") from None
    if data.shape[1] != 2 or data.shape[0] < 3:
        raise ConfigError(f"nonlinearity table {path} needs >= 3 rows of x,psi", key="nonlinearity")
    r = -data[:, 0]
    order = np.argsort(r)
    r, y = r[order], data[order, 1]
    if np.any(r < 0) or np.any(y < 0) or np.any(np.diff(r) <= 0):
        raise ConfigError("nonlinearity table needs distinct x <= 0 and psi >= 0", key="nonlinearity")
    P = PchipInterpolator(r, y, extrapolate=True)
    dP = P.derivative()
    r_hi, slope = r[-1], float(dP(r[-1]))

    def ev(s, x):
        rr = np.abs(np.asarray(x, float))
        out = np.where(rr <= r_hi, P(np.minimum(rr, r_hi)), y[-1] + slope * (rr - r_hi))
        return np.maximum(out, 0.0) * np.ones_like(np.asarray(s, float))

    def dx(s, x):
        rr = np.abs(np.asarray(x, float))
        return -np.where(rr <= r_hi, dP(np.minimum(rr, r_hi)), slope) * np.ones_like(np.asarray(s, float))

    return Nonlinearity(ev, dx, "custom", growth_params={"n": n}, name=f"table:{os.path.basename(path)}")


def make_nonlinearity(cfg: RunConfig, lambda1: float) -> Nonlinearity:
    name, n = cfg.nonlinearity, cfg.n
    if name == "auto":
        name = cfg.subcommand if cfg.subcommand in ("sublinear", "superlinear") else "eigen"
    if cfg.subcommand in ("sublinear", "superlinear") and name in ("eigen", "sublinear", "superlinear") \
            and name != cfg.subcommand:
        raise ConfigError(f"the {cfg.subcommand} driver needs a {cfg.subcommand} nonlinearity, got {name}",
                          key="nonlinearity")
    if name == "eigen":
        return eigen_nonlinearity(lambda1, n)
    if name == "sublinear":
        return drivers.make_sublinear_test(lambda1, n)
    if name == "superlinear":
        return drivers.make_superlinear_test(lambda1, n)
    nl = table_nonlinearity(name.split(":", 1)[1], n)
    gp = {"lambda1": lambda1, "n": n}
    try:
        if cfg.subcommand == "sublinear":
            gp.update(drivers.validate_sublinear(nl, lambda1, n))
            return nl.replace(growth_class="sublinear", growth_params=gp)
        if cfg.subcommand == "superlinear":
            gp.update(drivers.validate_superlinear(nl, lambda1, n))
            return nl.replace(growth_class="superlinear", growth_params=gp)
    except ValueError as exc:
        raise ConfigError(f"nonlinearity table rejected: {exc}", key="nonlinearity") from None
    return nl.replace(growth_params=gp)


def _density_fn(expr: str) -> Callable:
    names = {k: getattr(np, k) for k in ("sin", "cos", "exp", "log", "sqrt", "pi", "abs", "tanh")}

    def g(s):
        s = np.asarray(s, dtype=float)
        return np.asarray(eval(expr, {"__builtins__": {}}, {**names, "s": s}), float) * np.ones_like(s)

    try:
        probe = g(np.linspace(0.0, 1.0, 65))
    except Exception as exc:  # any bad expression is a configuration problem
        raise ConfigError(f"density: cannot evaluate {expr!r}: {exc}", key="density") from None
    if not np.all(np.isfinite(probe)) or np.any(probe < 0):
        raise ConfigError("density must be finite and nonnegative on [0, 1]", key="density")
    return g


def _eigen(cfg: RunConfig, grid):
    if cfg.eigen_method == "rayleigh_descent":
        return eigen_rayleigh_descent(grid, tol=cfg.tol)
    return eigen_inverse_iteration(grid, tol=cfg.tol)


def _failed(checks: dict) -> list:
    return sorted(k for k, v in checks.items() if isinstance(v, (bool, np.bool_)) and not v)


# -- subcommands ------------------------------------------------------------------

def cmd_eigen(cfg: RunConfig, out: str) -> int:
    t0 = time.perf_counter()
    grid = make_grid(cfg.n, cfg.N, cfg.clustering)
    er = _eigen(cfg, grid)
    payload = er.to_dict()
    checks = {"residual_finite": bool(math.isfinite(er.residual)), "u_le_0": bool(np.all(er.u1.values <= 0))}
    if cfg.n == 1:
        ref = lambda1_disc()
        payload["lambda1_oracle"] = ref
        payload["relative_error"] = abs(er.lambda1 - ref) / ref
    payload["checks"] = checks
    write_json(os.path.join(out, "eigen.json"), payload, cfg, {"runtime": time.perf_counter() - t0})
    write_profile(os.path.join(out, "u1.csv"), er.u1, cfg)
    print(json.dumps(_clean({k: payload[k] for k in ("lambda1", "residual", "iterations")})))
    return EXIT_CHECK if _failed(checks) else EXIT_OK


def cmd_solve(cfg: RunConfig, out: str) -> int:
    grid = make_grid(cfg.n, cfg.N, cfg.clustering)
    g = _density_fn(cfg.density)
    v = solve_radial_ma(grid, g)
    gv = g(grid.nodes)
    back = ma_rad(v)
    err = float(np.max(np.abs(back - gv) / np.maximum(np.abs(gv), 1e-300)))
    bound = 50 * grid.h_max**2
    checks = {"round_trip": bool(err <= bound), "psh": bool(is_psh(v))}
    payload = {"density": cfg.density, "round_trip_error": err, "round_trip_bound": bound,
               "u_min": float(np.min(v.values)), "E": energy_E(v), "checks": checks}
    write_json(os.path.join(out, "report.json"), payload, cfg)
    write_profile(os.path.join(out, "solution.csv"), v, cfg, "u")
    print(f"round-trip error {err:.3e} (bound {bound:.3e})")
    return EXIT_CHECK if _failed(checks) else EXIT_OK


def _flow_setup(cfg: RunConfig):
    grid = make_grid(cfg.n, cfg.N, cfg.clustering)
    mu = make_mu(cfg)
    er = eigen_inverse_iteration(grid)
    if cfg.forcing == "zero":
        zero = lambda s, t, x: np.zeros(np.broadcast(np.asarray(s), np.asarray(x)).shape)
        f = flow.Forcing(eval=zero, dx=zero, K1=0.0, K2=0.0, K3=0.0, name="zero")
        # MA(s - 1) = 1 and mu(1) = 0, so s - 1 is stationary
        v0 = RadialFn(grid, (grid.nodes - 1.0) * (1.0 + cfg.perturbation))
        if cfg.perturbation:
            v0 = flow.prepare_initial(v0, f, mu)
    elif cfg.forcing == "linear":
        k = cfg.forcing_k
        f = flow.Forcing(eval=lambda s, t, x: k * np.abs(x) + 0 * np.asarray(s, float),
                         dx=lambda s, t, x: k * np.sign(x) + 0 * np.asarray(s, float),
                         K1=0.0, K2=k, K3=k, name=f"{k:g}|x|")
        # density >= 1 everywhere keeps mu(MA) >= 0, which the lower bound needs
        v0 = flow.prepare_initial(RadialFn(grid, (grid.nodes - 1.0) * (1.0 + cfg.perturbation)), f, mu)
    elif cfg.forcing == "eigen":
        f = flow.mu_forcing(eigen_nonlinearity(er.lambda1, cfg.n), mu, cfg.n)
        v0 = er.u1 * (1.0 + cfg.perturbation)
    else:
        nl = drivers.perturb(make_nonlinearity(cfg, er.lambda1), cfg.psi_eps, cfg.n)
        f = flow.mu_forcing(nl, mu, cfg.n)
        with np.errstate(divide="ignore"):
            if not np.isfinite(f(1.0, 0.0, 0.0)):
                raise ConfigError("forcing is infinite where u = 0; set psi_eps > 0", key="psi_eps")
        v0 = flow.prepare_initial(er.u1 * (1.0 + cfg.perturbation), f, mu)
    fcfg = flow.FlowConfig(mu=mu, f=f, dt_init=cfg.dt_init, dt_max=cfg.dt_max, t_end=cfg.t_end,
                           steady_tol=cfg.steady_tol, err_tol=cfg.time_tol)
    return grid, fcfg, v0


def cmd_flow(cfg: RunConfig, out: str) -> int:
    t0 = time.perf_counter()
    grid, fcfg, v0 = _flow_setup(cfg)
    st = flow.run_batch(fcfg, [v0], cfg.t_end, stop_when_steady=False)[0]
    h = st.history
    Js = [d["J"] for d in h if math.isfinite(d["J"])]
    checks = {"u_le_0": all(d["u_max"] <= 0 for d in h),
              "boundary_pinned": all(d["u_bdry"] == 0.0 for d in h),
              "ma_min_positive": all(d["ma_min"] > 0 for d in h)}
    ubv = flow.uniform_bound_violation(h, v0.sup_norm(), fcfg.f.K1, fcfg.f.K2, grid.h_max)
    checks["uniform_bound"] = bool(ubv <= 0)
    payload = {"t": st.t, "steps": len(h) - 1, "final": st.diagnostics,
               "J_violation_max": float(np.max(np.diff(Js))) if len(Js) > 1 else -math.inf,
               "uniform_bound_violation": ubv, "forcing_bounds": [fcfg.f.K1, fcfg.f.K2, fcfg.f.K3]}
    if cfg.monitors:
        mon = flow.monitors(h, fcfg.p)
        payload["monitors"] = mon.to_dict()
        checks["monitors_finite"] = mon.finite
    payload["checks"] = checks
    write_json(os.path.join(out, "report.json"), payload, cfg, {"runtime": time.perf_counter() - t0})
    rows = [[d[c] for c in flow.TRAJ_COLUMNS] for d in h]
    write_table(os.path.join(out, "trajectory.csv"), flow.TRAJ_COLUMNS, rows, cfg)
    write_profile(os.path.join(out, "solution.csv"), st.v, cfg, "u")
    print(f"flow reached t={st.t:.6g} in {len(h) - 1} steps, sup|u_t|={st.diagnostics['sup_ut']:.3e}")
    return EXIT_CHECK if _failed(checks) else EXIT_OK


def _driver_outputs(cfg: RunConfig, out: str, rep, path_rows, columns) -> int:
    payload = rep.to_dict()
    timing = {"runtime": payload.pop("runtime")}
    write_json(os.path.join(out, "report.json"), payload, cfg, timing)
    write_profile(os.path.join(out, "solution.csv"), rep.u, cfg, "u")
    write_table(os.path.join(out, "path_J.csv"), columns, path_rows, cfg)
    print(f"residual {rep.residual:.3e}  J {rep.J:.12g}  |u| {rep.sup_norm:.6g}")
    bad = _failed(rep.checks)
    if bad:
        print("failed checks: " + ", ".join(bad), file=sys.stderr)
    return EXIT_CHECK if bad else EXIT_OK


def cmd_sublinear(cfg: RunConfig, out: str) -> int:
    grid = make_grid(cfg.n, cfg.N, cfg.clustering)
    er = eigen_inverse_iteration(grid)
    nl = make_nonlinearity(cfg, er.lambda1)
    kw = {"tol": cfg.tol} if cfg.tol is not None else {}
    rep = drivers.run_sublinear(nl, grid, u1=er.u1, steady_tol=cfg.steady_tol, seed=cfg.seed, **kw)
    names = list(dict.fromkeys(st for st, *_ in rep.extra["flow_J"]))
    rows = [(names.index(st), t, J) for st, t, J, _ in rep.extra["flow_J"]]
    return _driver_outputs(cfg, out, rep, rows, ("stage", "t", "J"))


def cmd_superlinear(cfg: RunConfig, out: str) -> int:
    grid = make_grid(cfg.n, cfg.N, cfg.clustering)
    er = eigen_inverse_iteration(grid)
    nl = make_nonlinearity(cfg, er.lambda1)
    kw = {"tol": cfg.tol} if cfg.tol is not None else {}
    rep = drivers.run_superlinear(nl, grid, m_path=cfg.m_path, seed=cfg.seed_path, u1=er.u1, **kw)
    width = max(len(J) for _, J in rep.extra["path_J"])
    rows = [[t] + list(J) + [math.nan] * (width - len(J)) for t, J in rep.extra["path_J"]]
    cols = ["t"] + [f"J{k}" for k in range(width)]
    return _driver_outputs(cfg, out, rep, rows, cols)


# -- property suite -----------------------------------------------------------------

class TamperedMu:
    """mu + a (log t)^2 / 2: breaks the differential inequality at t = 1 by a."""

    def __init__(self, base, a: float = 0.1):
        self.base, self.a = base, a
        self.p = base.p
        self.knot = getattr(base, "knot", math.nan)
        self.thresholds = base.thresholds

    def __call__(self, t):
        return self.base(t) + 0.5 * self.a * np.log(t) ** 2

    def d1(self, t):
        t = np.asarray(t, float)
        return self.base.d1(t) + self.a * np.log(t) / t

    def d2(self, t):
        t = np.asarray(t, float)
        return self.base.d2(t) + self.a * (1.0 - np.log(t)) / t**2

    def phi(self, x, knot=None):
        return self.base.phi(x, knot)

    def _breaks(self, knot):
        return self.base._breaks(knot)

    def inverse(self, y):
        return self.base.inverse(y)


# allowed max_slack per certificate entry (entries shifted by their tolerance use 0)
CERT_TOL = {"differential_inequality": 1e-8, "differential_inequality_t_weighted": 1e-8,
            "concavity": 1e-8, "slope_inequality": 1e-10, "derivative_lower_bound": 1e-12}


def _prop(report, name, module, ok, slack, **extra):
    report[name] = _clean({"module": module, "pass": bool(ok), "slack": float(slack), **extra})


def verify_suite(cfg: RunConfig, tamper_mu: bool = False) -> tuple:
    """Run every property check; returns (exit status, report dict).

    ``slack`` is (allowed - observed): nonnegative means the property held.
    """
    rng = np.random.default_rng(cfg.seed)
    n, N = cfg.n, min(cfg.N, 512)
    grid = make_grid(n, N, cfg.clustering)
    h2 = grid.h_max**2
    rep: dict = {}

    # radial_domain
    raw = RadialFn(grid, np.cumsum(rng.normal(size=N))[::-1] - np.cumsum(rng.normal(size=N))[::-1][-1])
    raw = RadialFn(grid, raw.values - raw.values[-1])
    w = psh_project(raw)
    again = float(np.max(np.abs(psh_project(w).values - w.values)))
    _prop(rep, "psh_project_idempotent", "radial_domain", is_psh(w) and again <= 1e-12, 1e-12 - again)
    y, wts = rng.normal(size=200), rng.uniform(0.5, 2.0, 200)
    z = pav(y, wts)
    mono = float(np.min(np.diff(z)))
    mean_err = abs(float(np.dot(wts, z) - np.dot(wts, y)))
    _prop(rep, "pav_monotone_mean", "radial_domain", mono >= -1e-12 and mean_err <= 1e-9,
          min(mono + 1e-12, 1e-9 - mean_err))

    # functionals
    dens = lambda s, a=rng.uniform(0.5, 2.0, 3): a[0] + a[1] * s + a[2] * np.sin(3 * s) ** 2
    v = solve_radial_ma(grid, dens)
    worst = {"E": 0.0, "I": 0.0, "mt": 0.0, "rayleigh": 0.0}
    for c in rng.uniform(0.1, 10.0, 5):
        cv = v * float(c)
        worst["E"] = max(worst["E"], abs(energy_E(cv) - c ** (n + 1) * energy_E(v)) / (c ** (n + 1) * energy_E(v)))
        worst["I"] = max(worst["I"], abs(energy_I(cv) - c ** (n + 1) * energy_I(v)) / (c ** (n + 1) * energy_I(v)))
        m0 = mt_check(v, 1.0)
        worst["mt"] = max(worst["mt"], abs(mt_check(cv, 1.0) - m0) / m0)
        r0 = rayleigh(v)
        worst["rayleigh"] = max(worst["rayleigh"], abs(rayleigh(cv) - r0) / r0)
    for key, tol in (("E", 1e-12), ("I", 1e-12), ("mt", 1e-10), ("rayleigh", 1e-10)):
        _prop(rep, f"{key}_scale", "functionals", worst[key] <= tol, tol - worst[key])

    # mu_construction
    ps = [3.0, 4.0, 8.0, math.inf]
    if cfg.mu_p not in ps:
        ps.append(cfg.mu_p)
    for p in ps:
        mu = build_mu(p)
        if tamper_mu:
            mu = TamperedMu(mu)
        cert = certify_mu(mu, samples=20_000, pairs=2_000, forms=300, seed=cfg.seed)
        worst_slack = min(CERT_TOL.get(k, 0.0) - d["max_slack"] for k, d in cert.items()
                          if isinstance(d, dict))
        failing = [k for k, d in cert.items() if isinstance(d, dict) and not d["pass"]]
        _prop(rep, f"mu_certificate_p={'inf' if math.isinf(p) else int(p)}", "mu_construction",
              cert["all_pass"], worst_slack, failing=failing)

    # ma_solvers
    back = ma_rad(v)
    g = dens(grid.nodes)
    rt = float(np.max(np.abs(back - g) / g))
    _prop(rep, "round_trip", "ma_solvers", rt <= 50 * h2, 50 * h2 - rt)
    v_big = solve_radial_ma(grid, lambda s: dens(s) + 0.5)
    cmp_ = comparison_check(v_big, v)
    _prop(rep, "comparison", "ma_solvers", cmp_.premise and cmp_.conclusion, cmp_.slack - cmp_.max_excess)
    er = eigen_inverse_iteration(grid)
    if n == 1:
        ref = lambda1_disc()
        rel = abs(er.lambda1 - ref) / ref
        _prop(rep, "eigen_vs_oracle", "ma_solvers", rel <= 10 * h2, 10 * h2 - rel)
    ident = abs(energy_E(er.u1) - er.lambda1**n * energy_I(er.u1)) / energy_E(er.u1)
    _prop(rep, "eigen_pair_identity", "ma_solvers", ident <= 1e-4, 1e-4 - ident)

    # mu_flow
    mu = LogMu()
    zero = lambda s, t, x: np.zeros(np.broadcast(np.asarray(s), np.asarray(x)).shape)
    f0 = flow.Forcing(eval=zero, dx=zero, K1=0.0, K2=0.0, K3=0.0, name="zero")
    plain = RadialFn(grid, grid.nodes - 1.0)
    st = flow.run(flow.FlowConfig(mu=mu, f=f0, t_end=1.0), plain)
    drift = float(np.max(np.abs(st.v.values - plain.values)))
    _prop(rep, "zero_forcing_stationary", "mu_flow", drift <= 1e-12, 1e-12 - drift)
    lin = lambda s, t, x: -0.5 + 0.25 * np.asarray(x, float) + 0 * np.asarray(s, float)
    lin_dx = lambda s, t, x: 0.25 + 0 * np.asarray(x, float) * np.asarray(s, float)
    fl = flow.Forcing(eval=lin, dx=lin_dx, name="affine")
    fl.K1, fl.K2, fl.K3 = flow.estimate_bounds(fl, 10.0)
    fcfg = flow.FlowConfig(mu=mu, f=fl, t_end=1.0, dt_max=0.1)
    va = flow.prepare_initial(er.u1, fl, mu)
    vb = flow.prepare_initial(er.u1 * 1.01, fl, mu)
    stab = flow.stability_pair(fcfg, va, vb, 1.0)
    _prop(rep, "stability_contraction", "mu_flow", stab.holds, stab.slack, K=stab.K)
    sa = flow.run(fcfg, va)
    ubv = flow.uniform_bound_violation(sa.history, va.sup_norm(), fl.K1, fl.K2, grid.h_max)
    cone = all(d["u_max"] <= 0 and d["u_bdry"] == 0.0 for d in sa.history)
    _prop(rep, "uniform_bound", "mu_flow", ubv <= 0 and cone, -ubv)

    # variational_drivers
    sub = drivers.make_sublinear_test(er.lambda1, n)
    gp = sub.growth_params
    _prop(rep, "sublinear_limits", "variational_drivers", gp["limit_small_ok"] and gp["limit_large_ok"],
          gp["ratio_small"] - 1.9 * er.lambda1)
    sup = drivers.make_superlinear_test(er.lambda1, n)
    _prop(rep, "superlinear_growth", "variational_drivers", sup.growth_params["p"] > n + 1,
          sup.growth_params["p"] - n - 1)
    m = 8.0
    x = -rng.uniform(0, m, 200)
    tr = drivers.truncate_sublinear(sub, m)
    agree = float(np.max(np.abs(tr(0.5, x) - sub(0.5, x))))
    _prop(rep, "truncation_agrees_below_m", "variational_drivers", agree <= 1e-14, 1e-14 - agree)

    status = EXIT_OK if all(d["pass"] for d in rep.values()) else EXIT_CHECK
    return status, {"seed": cfg.seed, "all_pass": status == EXIT_OK, "properties": rep}


def cmd_verify(cfg: RunConfig, out: str, tamper_mu: bool = False) -> int:
    status, rep = verify_suite(cfg, tamper_mu)
    write_json(os.path.join(out, "report.json"), rep, cfg)
    for name, d in rep["properties"].items():
        print(f"{'PASS' if d['pass'] else 'FAIL'}  {d['module']:<20} {name:<32} slack={d['slack']:.3e}")
    return status


COMMANDS = {"eigen": cmd_eigen, "solve": cmd_solve, "flow": cmd_flow, "sublinear": cmd_sublinear,
            "superlinear": cmd_superlinear, "verify": cmd_verify}


# -- argument handling ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cmalab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="subcommand", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value file")
        p.add_argument("--n", type=int)
        p.add_argument("--grid", type=int, dest="N", help="number of nodes")
        p.add_argument("--tol", type=float)
        p.add_argument("--mu-p", dest="mu_p", help="exponent p > 2 or inf")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", dest="output", help="output directory")
        p.add_argument("--serial", action="store_true",
                       help="single-threaded deterministic execution (the default)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "verify":
            p.add_argument("--tamper-mu", action="store_true",
                           help="inject a mu that violates its differential inequality")
    return ap


def resolve_config(args) -> RunConfig:
    over = {k: getattr(args, k) for k in ("n", "N", "tol", "mu_p", "seed", "output")
            if getattr(args, k, None) is not None}
    if args.config:
        with open(args.config) as fh:
            text = fh.read()
    else:
        text = ""
    cfg = parse_config(text, over)
    if args.config and cfg.subcommand != args.subcommand and "subcommand" in text:
        raise ConfigError(f"config is for {cfg.subcommand!r}, not {args.subcommand!r}", key="subcommand")
    cfg.subcommand = args.subcommand
    return cfg.validate()


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        os.makedirs(cfg.output, exist_ok=True)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    stage = args.subcommand
    try:
        with np.errstate(over="ignore"):
            if args.subcommand == "verify":
                return cmd_verify(cfg, cfg.output, args.tamper_mu)
            return COMMANDS[args.subcommand](cfg, cfg.output)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConvergenceError, ConeViolation, FloatingPointError) as exc:
        stage = getattr(exc, "stage", None) or stage
        print(f"numerical failure in stage {stage}: {exc}", file=sys.stderr)
        write_json(os.path.join(cfg.output, "report.json"),
                   {"error": str(exc), "stage": stage, "info": getattr(exc, "info", {})}, cfg)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
