"""End-to-end drivers: sublinear minimizers and superlinear saddle solutions.

The sublinear driver runs the logarithmic gradient flow of J through a
cascade of truncated and perturbed right sides and checks that the limit
minimizes J.  The superlinear driver evolves a path of initial data under
the mu-flow, keeps zooming onto the path edge where J peaks (so one point
stays near the mountain pass) and extracts the saddle from it.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy.special import comb

from .errors import ConvergenceError
from .flow import FlowConfig, FlowState, flow_diagnostics, initial_state, mu_forcing, prepare_initial, run_batch, \
    uniform_bound_violation
from .functionals import Nonlinearity, big_psi, energy_E, functional_J, ma_density, sobolev_check
from .mu import LogMu, build_mu, smooth_step
from .radial import RadialFn, RadialGrid
from .solvers import eigen_inverse_iteration, solve_radial_ma

log = logging.getLogger(__name__)

_GX, _GW = np.polynomial.legendre.leggauss(20)


def _ones(s, x):
    return np.ones(np.broadcast(np.asarray(s, float), np.asarray(x, float)).shape)


# -- test nonlinearities ------------------------------------------------------

def make_sublinear_test(lambda1: float, n: int = 1, validate: bool = True) -> Nonlinearity:
    """psi_sub(x) = 2 lambda1 |x| / (1 + |x|)."""
    if not lambda1 > 0:
        raise ValueError("lambda1 must be positive")
    lam = float(lambda1)

    def ev(s, x):
        r = np.abs(x)
        return 2 * lam * r / (1 + r) * _ones(s, x)

    def dx(s, x):
        return -2 * lam / (1 + np.abs(x)) ** 2 * _ones(s, x)

    anti = None
    if n == 1:
        def anti(s, x):
            r = np.abs(x)
            return 2 * lam * (r - np.log1p(r)) * _ones(s, x)

    nl = Nonlinearity(ev, dx, "sublinear", growth_params={"lambda1": lam, "n": n},
                      name="psi_sub", antiderivative=anti)
    if validate:
        nl = nl.replace(growth_params={**nl.growth_params, **validate_sublinear(nl, lam, n)})
    return nl


def validate_sublinear(nl: Nonlinearity, lambda1: float, n: int, theta: float = 0.5) -> dict:
    """Sampled limit conditions and the properness constant K.

    Returns ratio_small = psi(-1e-6)/1e-6, ratio_large = psi(-1e6)/1e6 and K
    with psi^n <= K + (1 - theta) lambda1^n |x|^n and
    Psi <= K + (1 - theta) lambda1^n |x|^(n+1)/(n+1) on the samples.
    """
    r_small = float(nl(0.5, -1e-6)) / 1e-6
    r_large = float(nl(0.5, -1e6)) / 1e6
    if r_small < 1.9 * lambda1 and r_small <= lambda1:
        raise ValueError(f"psi(x)/|x| near 0 is {r_small:.6g}, not above lambda1")
    if r_large >= lambda1:
        raise ValueError(f"psi(x)/|x| at -1e6 is {r_large:.6g}, not below lambda1")
    r = np.concatenate([[0.0], np.logspace(-6, 6, 2401)])
    s = np.linspace(0, 1, 5)[:, None]
    lamn = lambda1**n
    K_psi = float(np.max(nl.pow_n(s, -r, n) - (1 - theta) * lamn * r**n))
    K_Psi = float(np.max(big_psi(nl, s, -r[None, :] * np.ones_like(s), n)
                         - (1 - theta) * lamn * r ** (n + 1) / (n + 1)))
    return {"ratio_small": r_small, "ratio_large": r_large, "theta": theta,
            "K": max(K_psi, K_Psi, 0.0), "K_psi": K_psi, "K_Psi": K_Psi,
            "limit_small_ok": bool(r_small >= 1.9 * lambda1),
            "limit_large_ok": bool(r_large <= 1e-5 * lambda1)}


def make_superlinear_test(lambda1: float, n: int = 1, validate: bool = True) -> Nonlinearity:
    """psi_sup(x) = (lambda1 / 2)(|x| + x^2)."""
    if not lambda1 > 0:
        raise ValueError("lambda1 must be positive")
    lam = float(lambda1)

    def ev(s, x):
        r = np.abs(x)
        return 0.5 * lam * (r + r * r) * _ones(s, x)

    def dx(s, x):
        return -0.5 * lam * (1 + 2 * np.abs(x)) * _ones(s, x)

    coef = [comb(n, k, exact=True) / (n + k + 1) for k in range(n + 1)]

    def anti(s, x):
        r = np.abs(x)
        return (0.5 * lam) ** n * sum(c * r ** (n + k + 1) for k, c in enumerate(coef)) * _ones(s, x)

    nl = Nonlinearity(ev, dx, "superlinear", growth_params={"lambda1": lam, "n": n},
                      name="psi_sup", antiderivative=anti)
    if validate:
        nl = nl.replace(growth_params={**nl.growth_params, **validate_superlinear(nl, lam, n)})
    return nl


def validate_superlinear(nl: Nonlinearity, lambda1: float, n: int,
                         theta: Optional[float] = None, sigma: Optional[float] = None) -> dict:
    """Sampled growth conditions for the mountain-pass theorem.

    Checks psi/|x| < lambda1 near 0, sub-exponential growth with sigma = n,
    the integrated bound Psi <= (1 - theta)/(n+1) |x| psi^n beyond M_emp,
    the increasing ratios psi/|x| (with X* where they pass lambda1), and
    finds the integer p used for the mu construction and truncation.
    Raises ValueError on failure.
    """
    theta = n / (2 * n + 2) if theta is None else theta
    sigma = float(n) if sigma is None else sigma
    r0 = float(nl(0.5, -1e-6)) / 1e-6
    if not r0 < lambda1:
        raise ValueError(f"psi(x)/|x| near 0 is {r0:.6g}, not below lambda1")
    rr = np.array([10.0, 100.0, 1000.0])
    # log of psi exp(-(sigma/n)|x|^(1+1/n)), which must decrease
    expo = np.array([math.log(float(nl(0.5, -x))) - (sigma / n) * x ** (1 + 1 / n) for x in rr])
    if not (np.all(np.isfinite(expo)) and np.all(np.diff(expo) < 0)):
        raise ValueError("psi grows too fast against exp(sigma/n |x|^(1+1/n))")
    r = np.logspace(-3, 4, 1401)
    s = np.linspace(0, 1, 5)[:, None]
    lhs = big_psi(nl, s, -r[None, :] * np.ones_like(s), n)
    rhs = (1 - theta) / (n + 1) * r * nl.pow_n(s, -r, n)
    ok = np.all(lhs <= rhs * (1 + 1e-12), axis=0)
    if not ok[-1]:
        raise ValueError("integrated growth condition fails at the largest sample")
    bad = np.flatnonzero(~ok)
    M_emp = float(r[bad[-1] + 1]) if bad.size else float(r[0])
    ratios = np.array([float(nl(0.5, -x)) / x for x in rr])
    if not np.all(np.diff(ratios) > 0) or not ratios[-1] > lambda1:
        raise ValueError("psi(x)/|x| is not increasing past lambda1")
    xs = np.logspace(-3, 6, 2001)
    above = np.flatnonzero(np.array([float(nl(0.5, -x)) / x for x in xs]) > lambda1)
    X_star = float(xs[above[0]])
    # small-x bound psi^n <= (1 - theta) lambda1^n |x|^n on [-1/M, 0]
    Ms = float(max(M_emp, 1.0))
    xsmall = np.linspace(1e-9, 1.0 / Ms, 400)
    while np.any(nl.pow_n(0.5, -xsmall, n) > (1 - theta) * lambda1**n * xsmall**n):
        Ms *= 2
        xsmall = np.linspace(1e-9, 1.0 / Ms, 400)
    # integer p in (n + 1, inf) with psi / |x|^(p/n) -> 0
    p_growth = None
    for p in range(n + 2, 65):
        a = [float(nl(0.5, -x)) / x ** (p / n) for x in (1e3, 1e6, 1e9)]
        if a[1] < a[0] and a[2] < 1e-2 * a[0]:
            p_growth = p
            break
    p_trunc = int(math.floor(2 * (n + 1) / theta)) + 1
    return {"theta": theta, "sigma": sigma, "M_emp": max(M_emp, Ms), "X_star": X_star,
            "ratio_small": r0, "gronwall_ratios": ratios.tolist(),
            "p_growth": p_growth, "p_trunc": p_trunc,
            "p": p_growth if p_growth is not None else p_trunc,
            "truncate": p_growth is None}


# -- truncation and perturbation -------------------------------------------------

def _s5(y):
    y = np.clip(y, 0.0, 1.0)
    return y**3 * (10 - 15 * y + 6 * y * y)


def _s5_int(y):
    y = np.clip(y, 0.0, 1.0)
    return y**4 * (2.5 - 3 * y + y * y)


def eta_cutoff(delta: float):
    """Radial cutoff: 0 within distance delta of the sphere, 1 beyond 2 delta."""
    if delta <= 0:
        return lambda s: np.ones_like(np.asarray(s, float))

    def eta(s):
        dist = 1.0 - np.sqrt(np.clip(np.asarray(s, float), 0.0, 1.0))
        return smooth_step((dist - delta) / delta)

    return eta


@dataclass
class TruncationParams:
    m: float
    delta_m: float = math.nan
    K_m: float = math.nan
    B: float = math.nan
    delta: float = 0.0
    p_trunc: Optional[int] = None
    active: bool = False

    def eta_delta(self, s):
        return eta_cutoff(self.delta)(s)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("m", "delta_m", "K_m", "B", "delta", "p_trunc", "active")}


def truncate_sublinear(nl: Nonlinearity, m: float) -> Nonlinearity:
    """psi_m(x) = psi(-c(|x|)) with c(r) = r up to m and constant 1.5 m beyond 2 m."""
    if not m > 0:
        raise ValueError("m must be positive")

    def c(r):
        y = (r - m) / m
        return np.where(r <= m, r, m + m * (np.clip(y, 0, 1) - _s5_int(y)))

    def ev(s, x):
        return nl.eval(s, -c(np.abs(x)))

    def dx(s, x):
        r = np.abs(x)
        return nl.eval_dx(s, -c(r)) * (1.0 - _s5((r - m) / m))

    n = nl.growth_params.get("n", 1)
    anti = None
    if nl.antiderivative is not None:
        def anti(s, x):
            s, x = np.broadcast_arrays(np.asarray(s, float), np.asarray(x, float))
            r = np.abs(x)
            base = nl.antiderivative(s, -np.minimum(r, m))
            top = np.clip(r, m, 2 * m)
            half = 0.5 * (top - m)
            t = m + half[..., None] * (_GX + 1.0)
            mid = (nl.pow_n(s[..., None], -c(t), n) @ _GW) * half
            tail = nl.pow_n(s, -1.5 * m * np.ones_like(r), n) * np.maximum(r - 2 * m, 0.0)
            return base + mid + tail

    return nl.replace(eval=ev, eval_dx=dx, antiderivative=anti, name=f"{nl.name}_m{m:g}",
                      growth_params={**nl.growth_params, "m": m})


def truncate_superlinear(nl: Nonlinearity, m: float, p: int, n: int):
    """psi_m^n = psi^n up to m and K_m |x|^(p-1) beyond m + delta_m."""
    B = float(np.max(nl.pow_n(np.linspace(0, 1, 33), -m, n)))
    dm, Km = 1.0 / (B + 1.0), (B + 1.0) * m ** (1 - p)
    params = TruncationParams(m=m, delta_m=dm, K_m=Km, B=B, p_trunc=p, active=True)

    def dens(s, x):
        r = np.abs(x)
        S = _s5((r - m) / dm)
        return (1 - S) * nl.pow_n(s, x, n) + S * Km * r ** (p - 1)

    def ev(s, x):
        return dens(s, x) ** (1.0 / n)

    def dx(s, x):
        r = np.abs(x)
        y = (r - m) / dm
        S = _s5(y)
        dS = np.where((y > 0) & (y < 1), 30 * y * y * (1 - y) ** 2, 0.0) / dm
        psi = np.asarray(nl.eval(s, x), float)
        dd_dr = ((1 - S) * (-n * psi ** (n - 1) * nl.eval_dx(s, x))
                 + S * Km * (p - 1) * r ** (p - 2) + dS * (Km * r ** (p - 1) - psi**n))
        with np.errstate(divide="ignore", invalid="ignore"):
            out = -dd_dr * dens(s, x) ** (1.0 / n - 1) / n
        return np.where(np.isfinite(out), out, 0.0)

    out = nl.replace(eval=ev, eval_dx=dx, antiderivative=None, name=f"{nl.name}_m{m:g}",
                     growth_params={**nl.growth_params, "m": m})
    return out, params


def perturb(nl: Nonlinearity, eps: float, n: int) -> Nonlinearity:
    """psi_eps^n = psi^n + eps, with Psi_eps = Psi + eps |x|."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if eps == 0:
        return nl

    def ev(s, x):
        return (nl.pow_n(s, x, n) + eps) ** (1.0 / n)

    def dx(s, x):
        psi = np.asarray(nl.eval(s, x), float)
        return psi ** (n - 1) * nl.eval_dx(s, x) * (psi**n + eps) ** (1.0 / n - 1)

    anti = None
    if nl.antiderivative is not None:
        def anti(s, x):
            return nl.antiderivative(s, x) + eps * np.abs(x)

    return nl.replace(eval=ev, eval_dx=dx, antiderivative=anti, name=f"{nl.name}+{eps:g}",
                      growth_params={**nl.growth_params, "eps": eps})


def cutoff(nl: Nonlinearity, delta: float, n: int) -> Nonlinearity:
    """psi_delta^n = eta_delta psi^n + delta^2."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    if delta == 0:
        return nl
    eta = eta_cutoff(delta)
    d2 = delta * delta

    def ev(s, x):
        return (eta(s) * nl.pow_n(s, x, n) + d2) ** (1.0 / n)

    def dx(s, x):
        psi = np.asarray(nl.eval(s, x), float)
        e = eta(s)
        return e * psi ** (n - 1) * nl.eval_dx(s, x) * (e * psi**n + d2) ** (1.0 / n - 1)

    anti = None
    if nl.antiderivative is not None:
        def anti(s, x):
            return eta(s) * nl.antiderivative(s, x) + d2 * np.abs(x)

    return nl.replace(eval=ev, eval_dx=dx, antiderivative=anti, name=f"{nl.name}_d{delta:g}",
                      growth_params={**nl.growth_params, "delta": delta})


# -- reports --------------------------------------------------------------------

def residual(u: RadialFn, nl: Nonlinearity) -> float:
    """max over all nodes of |MA(u) - psi^n(u)|."""
    n = u.grid.n
    return float(np.max(np.abs(ma_density(u.grid, u.values) - nl.pow_n(u.s, u.values, n))))


@dataclass
class SolutionReport:
    u: RadialFn
    residual: float
    J: float
    c: float
    sup_norm: float
    cascade: list
    checks: dict
    runtime: float
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def clean(x):
            if isinstance(x, dict):
                return {k: clean(v) for k, v in x.items()}
            if isinstance(x, (list, tuple)):
                return [clean(v) for v in x]
            if isinstance(x, (np.floating, np.integer)):
                return x.item()
            if isinstance(x, np.bool_):
                return bool(x)
            if isinstance(x, float) and not math.isfinite(x):
                return repr(x)
            return x

        d = {k: getattr(self, k) for k in ("residual", "J", "c", "sup_norm", "cascade", "checks", "runtime")}
        return clean(d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def challenge_panel(grid: RadialGrid, u1: RadialFn, scale: float, count: int = 50,
                    seed: int = 0) -> List[RadialFn]:
    """Scaled eigenfunctions plus random psh functions with densities of mixed shape."""
    rng = np.random.default_rng(seed)
    k = count * 2 // 5
    out = [u1 * float(c) for c in scale * np.logspace(-1.5, 0.7, k)]
    s = grid.nodes
    while len(out) < count:
        a = rng.uniform(0, 1, 5)
        c0, w = rng.uniform(0.1, 0.9), rng.uniform(0.05, 0.3)
        g = a[0] + a[1] * s + a[2] * s**3 + a[3] * (1 - s) ** 2 + a[4] * np.exp(-((s - c0) / w) ** 2)
        w0 = solve_radial_ma(grid, g)
        out.append(w0 * (scale * rng.uniform(0.1, 3.0) / w0.sup_norm()))
    return out


# -- sublinear driver -------------------------------------------------------------

DEFAULT_SUB_CASCADE = {"m": (8.0, 16.0), "eps": (1e-2, 1e-4, 1e-6, 0.0)}


def _ray_min(grid, u1, nl):
    cs = np.logspace(-2, 1.5, 71)
    Js = [functional_J(u1 * float(c), nl) for c in cs]
    return float(cs[int(np.argmin(Js))])


def run_sublinear(nl: Nonlinearity, grid: RadialGrid, cascade: Optional[dict] = None,
                  tol: float = 1e-5, steady_tol: float = 1e-8, t_max: float = 400.0,
                  u1: Optional[RadialFn] = None, dt_max: float = 20.0,
                  panel_size: int = 50, seed: int = 0) -> SolutionReport:
    """Minimizer of J for a sublinear psi by the logarithmic gradient flow.

    For every (m, eps) in the cascade the flow log MA(u) - u_t =
    log(psi_m^n(u) + eps) runs to steady state from the previous stage (the
    first stage starts from the best multiple of u1, made compatible).
    """
    t0 = time.perf_counter()
    n = grid.n
    cascade = dict(DEFAULT_SUB_CASCADE, **(cascade or {}))
    if u1 is None:
        u1 = eigen_inverse_iteration(grid).u1
    gp = nl.growth_params
    theta, K = gp.get("theta", 0.5), gp.get("K", math.nan)
    vol = grid.integrate(np.ones(grid.N))
    mu = LogMu()
    trace: List[dict] = []
    flow_J: List[tuple] = []
    checks: Dict[str, object] = {"J_violation_max": -math.inf, "dissipation_min": math.inf,
                                 "properness_min_slack": math.inf, "u_le_0": True,
                                 "boundary_pinned": True, "ma_min_positive": True,
                                 "uniform_bound_violation": -math.inf}
    u = None
    for m in cascade["m"]:
        for eps in cascade["eps"]:
            stage = f"sublinear[m={m:g},eps={eps:g}]"
            nl_s = perturb(truncate_sublinear(nl, m), eps, n)
            f = mu_forcing(nl_s, mu, n, x_range=4 * m)
            if u is None:
                c = _ray_min(grid, u1, nl_s)
                raw = u1 * c + RadialFn(grid, 1e-3 * c * (grid.nodes - 1))
                v0 = prepare_initial(raw, f, mu, blend_delta=0.05)
            elif eps > 0:
                v0 = prepare_initial(u, f, mu, blend_delta=0.05)
            else:
                v0 = u
            cfg = FlowConfig(mu=mu, f=f, dt_init=1e-3, dt_max=dt_max, t_end=t_max,
                             steady_tol=steady_tol, max_steps=20000)

            def cb(states):
                st = states[0]
                flow_J.append((stage, st.t, functional_J(st.v, nl), st.diagnostics["E"]))

            try:
                st = run_batch(cfg, [v0], callback=cb)[0]
            except ConvergenceError as exc:
                raise ConvergenceError(f"{stage}: {exc}", stage=stage, info=exc.info) from exc
            if st.diagnostics["sup_ut"] > steady_tol:
                raise ConvergenceError(f"{stage}: no steady state by t={st.t:g} "
                                       f"(sup|u_t| = {st.diagnostics['sup_ut']:.3e})",
                                       stage=stage, info=st.diagnostics)
            u = st.v
            h = st.history
            Js = np.array([d["J"] for d in h])
            viol = float(np.max(np.diff(Js))) if len(Js) > 1 else -math.inf
            dmin = min(d.get("dissipation_min", math.inf) for d in h)
            ubv = uniform_bound_violation(h, v0.sup_norm(), f.K1, f.K2, grid.h_max)
            checks["J_violation_max"] = max(checks["J_violation_max"], viol)
            checks["dissipation_min"] = min(checks["dissipation_min"], dmin)
            checks["u_le_0"] &= all(d["u_max"] <= 0 for d in h)
            checks["boundary_pinned"] &= all(d["u_bdry"] == 0.0 for d in h)
            checks["ma_min_positive"] &= all(d["ma_min"] > 0 for d in h[1:])
            checks["uniform_bound_violation"] = max(checks["uniform_bound_violation"], ubv)
            trace.append({"stage": stage, "m": m, "eps": eps, "t": st.t, "steps": len(h) - 1,
                          "J_stage": float(Js[-1]), "J": functional_J(u, nl),
                          "residual_stage": residual(u, nl_s), "residual": residual(u, nl),
                          "sup_norm": u.sup_norm(), "J_violation": viol, "dissipation_min": dmin,
                          "K1": f.K1, "K2": f.K2, "uniform_bound_violation": ubv})
            log.info("%s t=%.3g steps=%d J=%.10g residual=%.3e", stage, st.t, len(h) - 1,
                     trace[-1]["J"], trace[-1]["residual"])
    for _, _, J, E in flow_J:
        if math.isfinite(E):
            checks["properness_min_slack"] = min(checks["properness_min_slack"], J - (theta * E - K * vol))
    res = residual(u, nl)
    Ju = functional_J(u, nl)
    panel = challenge_panel(grid, u1, u.sup_norm(), panel_size, seed)
    panel_J = [functional_J(w, nl) for w in panel]
    checks.update({
        "residual_ok": bool(res <= tol),
        "nonzero": bool(u.sup_norm() >= 1e-3),
        "J_negative": bool(Ju < 0),
        "panel_min_gap": float(min(panel_J) - Ju),
        "minimizes_panel": bool(all(Ju <= Jw for Jw in panel_J)),
        "truncation_inactive": bool(u.sup_norm() < cascade["m"][-1]),
    })
    return SolutionReport(u=u, residual=res, J=Ju, c=math.nan, sup_norm=u.sup_norm(), cascade=trace,
                          checks=checks, runtime=time.perf_counter() - t0,
                          extra={"flow_J": flow_J, "panel_J": panel_J})


# -- superlinear driver -------------------------------------------------------------

@dataclass
class PathState:
    points: List[RadialFn]
    v0: RadialFn
    v1: RadialFn
    c_estimate: float = math.nan
    a: float = math.nan
    good_set: List[int] = field(default_factory=list)
    good_times: dict = field(default_factory=lambda: {"good": 0.0, "bad": 0.0})

    def endpoint_checks(self, J: Callable, theta: float, k_m: float, n: int) -> dict:
        g0 = ma_density(self.v0.grid, self.v0.values)
        g1 = ma_density(self.v1.grid, self.v1.values)
        return {"v0_J": J(self.v0), "v1_J": J(self.v1),
                "v0_bound": theta * k_m ** (n + 1) / (2 * (n + 1)),
                "v0_ok": bool(J(self.v0) < theta * k_m ** (n + 1) / (2 * (n + 1))),
                "v1_ok": bool(J(self.v1) < -0.5),
                "ma_positive": bool(np.all(g0 > 0) and np.all(g1 > 0))}


def seed_path(v0: RadialFn, v1: RadialFn, m_path: int, kind: str = "flux",
              bend: float = 0.5) -> List[RadialFn]:
    """Path v0 -> v1 by linear interpolation of the flux (s v')^n.

    Interpolating the flux is interpolating the density, so MA > 0 holds
    along the path.  ``kind="bent"`` adds 4 r(1 - r) bend mean(g1) s to the
    density to get a different path with the same ends.
    """
    grid = v0.grid
    g0 = np.maximum(ma_density(grid, v0.values), 0.0)
    g1 = np.maximum(ma_density(grid, v1.values), 0.0)
    if kind == "bent":
        alt = bend * float(np.mean(g1)) * grid.nodes
    elif kind == "flux":
        alt = 0.0
    else:
        raise ValueError(f"unknown seed path kind {kind!r}")
    pts = []
    for k, r in enumerate(np.linspace(0.0, 1.0, m_path)):
        if k == 0:
            pts.append(v0)
        elif k == m_path - 1:
            pts.append(v1)
        else:
            pts.append(solve_radial_ma(grid, (1 - r) * g0 + r * g1 + 4 * r * (1 - r) * alt))
    return pts


def energy_control_probe(u: RadialFn, nl: Nonlinearity, p_trunc: float, a: float) -> dict:
    """alpha = MA^(1/p), beta = (psi^n(u))^(1/p) and the integrals of the energy chain."""
    grid, n = u.grid, u.grid.n
    A = np.maximum(ma_density(grid, u.values), 0.0)
    B = np.maximum(nl.pow_n(u.s, u.values, n), 0.0)
    alpha, beta = A ** (1.0 / p_trunc), B ** (1.0 / p_trunc)
    lhs = (A - B) * (alpha - beta)
    rhs = np.abs(alpha - beta) ** (p_trunc + 1)
    diss = grid.integrate(rhs)
    E = energy_E(u)
    ub = grid.integrate(-u.values * B)
    return {"dissipation": diss, "E": E, "int_u_beta_p": ub,
            "ratio": E / ub if ub > 0 else math.inf,
            # equality when alpha or beta vanishes, so allow a few ulps
            "termwise_ok": bool(np.all(lhs >= rhs * (1 - 8 * np.finfo(float).eps))),
            "finite": bool(all(math.isfinite(x) for x in (diss, E, ub))),
            "good": bool(diss <= a)}


def _k_m(grid, u1, nl, n, theta, p, lam):
    """Step-2 radius: J_m >= theta E - K_m S E^((p+1)/(n+1)) with S from a panel."""
    r = np.logspace(-4, 3, 1401)
    Psi = big_psi(nl, 0.5, -r, n)
    Km = float(np.max((Psi - (1 - theta) * lam**n * r ** (n + 1) / (n + 1)) / r ** (p + 1)))
    panel = challenge_panel(grid, u1, 1.0, 20, seed=1)
    S = 2.0 * max(sobolev_check(w, p + 1) ** (p + 1) for w in panel)
    q = (p + 1) / (n + 1)
    kE = (theta * n / ((n + 1) * max(Km, 1e-300) * S)) ** (1 / (q - 1))
    return kE ** (1 / (n + 1)), Km, S


DEFAULT_SUP_PARAMS = {"a_frac": (0.1, 0.01, 0.001), "delta": (1e-1, 1e-2, 1e-3, 0.0)}


def _edge_track(grid, mu, f, J_of, pts, a, stage, tol, t_max, sync_dt, m_path, p,
                nl_stage, probe_every=1, zoom_floor=1e-9):
    """Evolve the path until steady, re-seeding it at every sync.

    The new path fills the edge where the slope of J along the path changes
    sign (or the neighbours of the argmax of J if none does), so one point
    stays near the mountain pass.
    """
    # the discrete J is not an exact Lyapunov function of the discrete mu-flow,
    # so the per-step J guard is off here and the violation is only recorded
    cfg = FlowConfig(mu=mu, f=f, dt_init=1e-3, dt_max=sync_dt, t_end=t_max,
                     steady_tol=tol, max_steps=10**6, monotone_J=False)
    states = [initial_state(v, cfg) for v in pts]
    t = 0.0
    J = np.array([st.diagnostics["J"] for st in states])
    c_track = float(np.max(J))
    path_J = [(0.0, J.tolist())]
    good = bad = 0.0
    I_sizes, probes, zooms = [], [], 0
    energy_max = {"E": 0.0, "int_u_beta_p": 0.0}
    while True:
        t_next = t + sync_dt
        states = run_batch(cfg, None, t_next, stop_when_steady=False, states=states)
        t = states[0].t
        J = np.array([st.diagnostics["J"] for st in states])
        path_J.append((t, J.tolist()))
        # slope of J along the path from the first variation
        # dJ(u)[w] = int w (psi^n(u) - MA(u)); J rises where the slope is positive
        V = np.array([st_.v.values for st_ in states])
        R = nl_stage.pow_n(grid.nodes, V, grid.n) - ma_density(grid, V)
        W = np.gradient(V, axis=0) if len(states) > 1 else np.zeros_like(V)
        g = np.array([grid.integrate(W[i] * R[i]) for i in range(len(states))])
        flip = [i for i in range(len(states) - 1) if g[i] > 0 >= g[i + 1]]
        kJ = int(np.argmax(J))
        spread = float(np.max(J) - np.min(J))
        if flip:
            i = flip[0]
            lo, hi = i, i + 1
            k = i if abs(g[i]) <= abs(g[i + 1]) else i + 1
        else:
            k = kJ
            if len(J) > 2 and k in (0, len(J) - 1) and spread > 1e-10 * max(1.0, abs(J[k])):
                raise ConvergenceError(f"{stage}: the path lost the mountain pass at t={t:g}",
                                       stage=stage, info={"t": t, "J": J.tolist(), "c": c_track})
            lo, hi = max(k - 1, 0), min(k + 1, len(states) - 1)
        log.debug("%s t=%.3g k=%d window=(%d,%d) J=%.12g", stage, t, k, lo, hi, J[k])
        c_track = min(c_track, float(J[kJ]))
        I_t = [i for i, x in enumerate(J) if x >= c_track - a]
        I_sizes.append(len(I_t))
        # good-time bookkeeping on the tracked point's accepted steps in this interval
        hist = [d for d in states[k].history if d["t"] > t_next - sync_dt - 1e-14]
        prev = None
        for d in states[k].history:
            if d["t"] <= t_next - sync_dt + 1e-14:
                prev = d
        for d in hist:
            if prev is not None and d["dt"] > 0:
                rate = (d["J"] - prev["J"]) / d["dt"]
                if rate >= -a:
                    good += d["dt"]
                else:
                    bad += d["dt"]
            prev = d
        st = states[k]
        if hist and (hist[-1]["J"] - hist[0]["J"]) / max(sync_dt, 1e-300) >= -a:
            pr = energy_control_probe(st.v, nl_stage, p, a)
            probes.append(pr)
            energy_max["E"] = max(energy_max["E"], pr["E"])
            energy_max["int_u_beta_p"] = max(energy_max["int_u_beta_p"], pr["int_u_beta_p"])
        if st.diagnostics["sup_ut"] <= tol or t >= t_max:
            break
        va, vb = states[lo].v.values, states[hi].v.values
        if len(states) > 1 and np.max(np.abs(va - vb)) <= zoom_floor * max(1.0, st.v.sup_norm()):
            # the window is already narrow: let it spread before zooming again
            continue
        new = []
        for r in np.linspace(0.0, 1.0, m_path):
            if r == 0.0:
                new.append(states[lo])
            elif r == 1.0:
                new.append(states[hi])
            else:
                v = RadialFn(grid, (1 - r) * va + r * vb)
                d = flow_diagnostics(grid, v.values, t, cfg)
                d["dt"] = 0.0
                new.append(FlowState(t, v, d, [d], st.dt))
        states = new
        zooms += 1
    return st, {"t": t, "zooms": zooms, "T0_good": good, "T0_complement": bad,
                "I_t_min": min(I_sizes) if I_sizes else 0, "energy_max": energy_max,
                "probes": len(probes), "path_J": path_J,
                "probe_termwise_ok": all(p_["termwise_ok"] for p_ in probes),
                "probe_finite": all(p_["finite"] for p_ in probes)}


def run_superlinear(nl: Nonlinearity, grid: RadialGrid, m_path: int = 17,
                    params: Optional[dict] = None, tol: float = 1e-3,
                    seed: str = "flux", u1: Optional[RadialFn] = None,
                    stage_tol: float = 1e-6, final_tol: float = 1e-9, t_max: float = 200.0,
                    sync_dt: float = 0.5, bracket: float = 0.05,
                    max_retries: int = 2) -> SolutionReport:
    """Mountain-pass solution for a superlinear psi by flows along a path.

    Stages run over the (a, delta) schedule and end with delta = 0.  Each
    stage evolves ``m_path`` points under mu(MA(u)) - u_t = mu(psi_delta^n(u))
    with mu built for the integer p from the validator, zooming onto the
    edge where J peaks at every sync so that one point stays near the saddle.
    """
    t0 = time.perf_counter()
    n = grid.n
    gp = nl.growth_params
    lam = gp["lambda1"]
    theta, p = gp["theta"], gp["p"]
    params = dict(DEFAULT_SUP_PARAMS, **(params or {}))
    if u1 is None:
        u1 = eigen_inverse_iteration(grid).u1
    m = max(gp.get("M_emp", 1.0), 8.0)
    if gp.get("truncate"):
        nl_m, trunc = truncate_superlinear(nl, m, p, n)
    else:
        nl_m, trunc = nl, TruncationParams(m=m, p_trunc=p, active=False)
    mu = build_mu(p)
    k_m, K_m, S = _k_m(grid, u1, nl_m, n, theta, p, lam)
    c_lower = theta * k_m ** (n + 1) / (2 * (n + 1))
    J_m = lambda v: functional_J(v, nl_m)
    # endpoints
    K = 1.0
    while J_m(u1 * K) > -1.0:
        K *= 2.0
        if K > 2**20:
            raise ConvergenceError("no multiple of u1 with J_m <= -1", stage="endpoints", info={})
    smooth = RadialFn(grid, 1e-3 * (grid.nodes - 1.0))
    v1 = u1 * K + smooth
    eps = 0.5
    while not (energy_E(v1 * eps) < k_m ** (n + 1) and J_m(v1 * eps) < c_lower):
        eps *= 0.5
        if eps < 1e-12:
            raise ConvergenceError("no small endpoint below the mountain", stage="endpoints", info={})
    v0 = v1 * eps
    path = PathState(points=seed_path(v0, v1, m_path, seed), v0=v0, v1=v1)
    endpoint = path.endpoint_checks(J_m, theta, k_m, n)
    c_first = max(J_m(v) for v in path.points)
    deltas = list(params["delta"])
    a_fr = list(params["a_frac"])
    a_list = [c_first * a_fr[min(i, len(a_fr) - 1)] for i in range(len(deltas))]
    trace, path_J = [], []
    u = None
    checks = {"J_violation_max": -math.inf, "ma_min_positive": True, "u_le_0": True,
              "boundary_pinned": True, "I_t_nonempty": True, "T0_complement_max": 0.0,
              "uniform_bound_violation": -math.inf}
    t_off = 0.0
    for i, (delta, a) in enumerate(zip(deltas, a_list)):
        stage = f"superlinear[m={m:g},delta={delta:g},a={a:.3g}]"
        nl_s = cutoff(nl_m, delta, n)
        f = mu_forcing(nl_s, mu, n, x_range=max(4 * m, 10.0))
        J_s = lambda v, _nl=nl_s: functional_J(v, _nl)
        last = i == len(deltas) - 1
        mp, retries = m_path, 0
        while True:
            if u is None:
                pts = path.points if mp == m_path else seed_path(v0, v1, mp, seed)
            else:
                pts = [u * float(r) for r in np.linspace(1 - bracket, 1 + bracket, mp)]
            if delta > 0:
                pts = [prepare_initial(v, f, mu, blend_delta=max(delta, 0.02)) for v in pts]
            try:
                st, info = _edge_track(grid, mu, f, J_s, pts, a, stage,
                                       final_tol if last else stage_tol, t_max, sync_dt, mp, p, nl_s)
                break
            except ConvergenceError as exc:
                if retries >= max_retries:
                    raise
                log.warning("%s; retrying with %d path points", exc, 2 * mp - 1)
                mp, retries = 2 * mp - 1, retries + 1
        info["retries"] = retries
        u = st.v
        h = st.history
        Js = [d["J"] for d in h]
        viol = float(np.max(np.diff(Js))) if len(Js) > 1 else -math.inf
        checks["J_violation_max"] = max(checks["J_violation_max"], viol)
        checks["ma_min_positive"] &= all(d["ma_min"] > 0 for d in h[1:])
        checks["u_le_0"] &= all(d["u_max"] <= 0 for d in h)
        checks["boundary_pinned"] &= all(d["u_bdry"] == 0.0 for d in h)
        checks["T0_complement_max"] = max(checks["T0_complement_max"], info["T0_complement"])
        checks["uniform_bound_violation"] = max(
            checks["uniform_bound_violation"],
            uniform_bound_violation(h, max(v.sup_norm() for v in pts), f.K1, f.K2, grid.h_max))
        path_J += [(t_off + tt, Jk) for tt, Jk in info.pop("path_J")]
        t_off += info["t"]
        trace.append({"stage": stage, "delta": delta, "a": a, "m": m, "c_stage": J_s(u),
                      "J": J_m(u), "residual_stage": residual(u, nl_s), "residual": residual(u, nl),
                      "sup_norm": u.sup_norm(), "sup_ut": st.diagnostics["sup_ut"], **info})
        log.info("%s t=%.3g zooms=%d c=%.10g residual=%.3e", stage, info["t"], info["zooms"],
                 trace[-1]["c_stage"], trace[-1]["residual"])
    res = residual(u, nl)
    c = functional_J(u, nl)
    cs = [tr["c_stage"] for tr in trace]
    gaps = [abs(x - cs[-1]) for x in cs[:-1]]
    checks.update({
        "residual_ok": bool(res <= tol),
        "c_positive": bool(c > 0),
        "nonzero": bool(u.sup_norm() >= 1e-3),
        "c_lower_bound": c_lower,
        "c_above_lower_bound": bool(c >= c_lower),
        "truncation_inactive": bool(u.sup_norm() < m),
        "c_tail_decreasing": bool(all(x >= y for x, y in zip(gaps, gaps[1:]))),
        "T0_complement_finite": bool(math.isfinite(checks["T0_complement_max"])),
        **{f"endpoint_{k}": v for k, v in endpoint.items()},
    })
    return SolutionReport(u=u, residual=res, J=c, c=c, sup_norm=u.sup_norm(), cascade=trace,
                          checks=checks, runtime=time.perf_counter() - t0,
                          extra={"path_J": path_J, "k_m": k_m, "K_m": K_m, "sobolev_S": S,
                                 "truncation": trunc.to_dict(), "c_first": c_first,
                                 "m_path": m_path, "seed": seed})
