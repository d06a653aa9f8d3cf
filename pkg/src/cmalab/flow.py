"""The parabolic flow mu(MA(u)) - u_t = f(s, t, u) for radial potentials.

Time stepping is linearly implicit by default: each step solves
(I - dt A) du = dt (mu(MA(v)) - f(v)) with A the Jacobian of the right side,
which is banded because the difference stencils are.  Every proposal is
pinned at s = 1, projected onto the psh cone and accepted only if the
density stays positive, the change stays below ``cfl_safety`` times the
solution scale and (for f = mu(psi^n)) the functional J does not increase.
An explicit Euler scheme is kept for small grids.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.linalg import solve_banded

from .errors import ConeViolation, ConvergenceError
from .functionals import Nonlinearity, energy_E, functional_J, ma_density, ma_rad
from .mu import smooth_step
from .radial import RadialFn, RadialGrid, psh_project
from .solvers import solve_radial_ma

log = logging.getLogger(__name__)

SCHEMES = ("linearly_implicit", "explicit")
DT_MIN = 1e-12


# -- forcing ------------------------------------------------------------------

@dataclass
class Forcing:
    """Right side f(s, t, x) with |f| <= K1 + K2 |x| and |f_t| + |f_x| <= K3.

    ``nl`` is set when f = mu(psi^n) for that nonlinearity; the flow then
    decreases J = E - int Psi and the monitors track it.
    """

    eval: Callable
    dx: Callable
    K1: float = math.nan
    K2: float = math.nan
    K3: float = math.nan
    nl: Optional[Nonlinearity] = None
    density: Optional[Callable] = None   # psi^n(s, x) when f = mu(psi^n)
    name: str = "f"

    def __call__(self, s, t, x):
        return self.eval(s, t, x)


def mu_forcing(nl: Nonlinearity, mu, n: int, x_range: float = 10.0) -> Forcing:
    """f = mu(psi^n(s, x)), time independent."""

    def dens(s, x):
        return nl.pow_n(s, x, n)

    def f(s, t, x):
        with np.errstate(divide="ignore"):
            return mu(dens(s, x))

    def fx(s, t, x):
        d = dens(s, x)
        psi = np.asarray(nl.eval(s, x), dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return mu.d1(d) * n * psi ** (n - 1) * nl.eval_dx(s, x)

    out = Forcing(eval=f, dx=fx, nl=nl, density=dens, name=f"mu({nl.name}^n)")
    out.K1, out.K2, out.K3 = estimate_bounds(out, x_range)
    return out


def estimate_bounds(f: Forcing, x_range: float, s=None, t: float = 0.0):
    """Sampled (K1, K2, K3) on s in [0, 1], x in [-x_range, 0)."""
    s = np.linspace(0.0, 1.0, 33) if s is None else np.asarray(s)
    x = -np.concatenate([np.logspace(-8, 0, 200), np.linspace(1.0, max(x_range, 1.0), 400)])
    S, X = np.meshgrid(s, x)
    with np.errstate(all="ignore"):
        F = np.abs(f.eval(S, t, X))
        D = np.abs(f.dx(S, t, X))
    if not np.all(np.isfinite(F)):
        return math.inf, math.inf, math.inf
    # a logarithmic singularity at x = 0 escapes the sampled range
    with np.errstate(all="ignore"):
        f1 = np.max(np.abs(f.eval(s, t, np.full_like(s, -1e-150))))
        f2 = np.max(np.abs(f.eval(s, t, np.full_like(s, -1e-300))))
    singular = not np.isfinite(f2) or f2 > 1.5 * f1 + 1.0
    big = np.abs(X) >= 1.0
    K2 = float(np.max(F[big] / np.abs(X[big]))) if x_range > 1 else 0.0
    K1 = float(np.max(F - K2 * np.abs(X)))
    K3 = float(np.max(D)) if np.all(np.isfinite(D)) else math.inf
    if singular:
        return math.inf, K2, math.inf
    return max(K1, 0.0), K2, K3


# -- config and state ---------------------------------------------------------

@dataclass
class FlowConfig:
    mu: object
    f: Forcing
    dt_init: float = 1e-3
    dt_max: float = 1.0
    t_end: float = 10.0
    cfl_safety: float = 0.5
    psh_floor: float = 1e-8
    steady_tol: float = 1e-7
    scheme: str = "linearly_implicit"
    max_steps: int = 100_000
    monotone_J: bool = True
    j_slack: float = 1e-10
    grow: float = 1.5
    err_tol: Optional[float] = None    # local time error control, relative to 1 + |u|

    def __post_init__(self):
        if not 0 < self.dt_init <= self.dt_max:
            raise ValueError("need 0 < dt_init <= dt_max")
        if not self.psh_floor > 0:
            raise ValueError("psh_floor must be positive")
        if not 0 < self.cfl_safety <= 1:
            raise ValueError("cfl_safety must lie in (0, 1]")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.err_tol is not None and not self.err_tol > 0:
            raise ValueError("err_tol must be positive")

    @property
    def p(self) -> float:
        return self.mu.p


@dataclass
class FlowState:
    t: float
    v: RadialFn
    diagnostics: dict
    history: list = field(default_factory=list, repr=False)
    dt: float = math.nan


# -- discrete operators -------------------------------------------------------

_BAND_CACHE: dict = {}
LOWER, UPPER = 1, 5


def _banded(grid: RadialGrid):
    """D1, D2 in LAPACK band storage plus the row index of every slot."""
    key = id(grid)
    hit = _BAND_CACHE.get(key)
    if hit is not None and hit[0] is grid:
        return hit[1]
    N = grid.N
    out = []
    for D in (grid.D1, grid.D2):
        coo = D.tocoo()
        keep = coo.row < N - 1          # boundary row is pinned
        coo = coo.__class__((coo.data[keep], (coo.row[keep], coo.col[keep])), shape=coo.shape)
        ab = np.zeros((LOWER + UPPER + 1, N))
        ab[UPPER + coo.row - coo.col, coo.col] = coo.data
        out.append(ab)
    k = np.arange(LOWER + UPPER + 1)[:, None]
    j = np.arange(N)[None, :]
    rows = np.clip(k + j - UPPER, 0, N - 1)
    res = (out[0], out[1], rows)
    _BAND_CACHE[key] = (grid, res)
    return res


def _mu_of(mu, G):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(G > 0, mu(np.where(G > 0, G, 1.0)), -np.inf)


def flow_rhs(grid: RadialGrid, V: np.ndarray, t: float, cfg: FlowConfig):
    """(density, mu(density) - f) for one or a stack of states."""
    G = ma_density(grid, V)
    with np.errstate(divide="ignore", invalid="ignore"):
        R = _mu_of(cfg.mu, G) - cfg.f(grid.nodes, t, V)
    return G, R


def _implicit_increment(grid, v, g, r, t, dt, cfg):
    n, s = grid.n, grid.nodes
    B1, B2, rows = _banded(grid)
    p = grid.D1 @ v
    q = grid.D2 @ v
    gp = n * p ** (n - 1) + ((n - 1) * p ** (n - 2) * s * q if n > 1 else 0.0)
    gq = s * p ** (n - 1)
    mup = cfg.mu.d1(np.maximum(g, 1e-300))
    with np.errstate(all="ignore"):
        fx = cfg.f.dx(s, t, v)
    fx = np.where(np.isfinite(fx), fx, 0.0)
    a1, a2 = mup * gp, mup * gq
    ab = -dt * (B1 * a1[rows] + B2 * a2[rows])
    ab[UPPER] += 1.0 + dt * fx
    # pinned boundary row
    N = grid.N
    for k in range(LOWER + UPPER + 1):
        j = N - 1 - (k - UPPER)
        if 0 <= j < N:
            ab[k, j] = 0.0
    ab[UPPER, N - 1] = 1.0
    rhs = dt * r
    rhs[-1] = 0.0
    return solve_banded((LOWER, UPPER), ab, rhs)


def _explicit_dt_cap(grid, V, G, cfg) -> float:
    n, s = grid.n, grid.nodes
    p = (grid.D1 @ V.T).T
    gq = s * np.abs(p) ** (n - 1)
    mup = cfg.mu.d1(np.maximum(G, 1e-300))
    h2 = grid.h_min**2
    stiff = np.max(2.0 * mup[..., :-1] * gq[..., :-1] / h2 + mup[..., :-1] * np.abs(p[..., :-1]) / grid.h_min)
    return cfg.cfl_safety / max(stiff, 1e-300)


# -- stepping -------------------------------------------------------------------

def _J(v: np.ndarray, grid, cfg) -> float:
    nl = cfg.f.nl
    if nl is None:
        return math.nan
    return functional_J(RadialFn(grid, v), nl)


def _energy(v: np.ndarray, grid) -> float:
    try:
        return energy_E(RadialFn(grid, v))
    except ConeViolation:
        return math.nan


def flow_diagnostics(grid, v, t, cfg, G=None, R=None) -> dict:
    if G is None:
        G, R = flow_rhs(grid, v, t, cfg)
    inner = slice(0, grid.N - 1)
    sup_ut = float(np.max(np.abs(R[inner])))
    d = {
        "t": t,
        "J": _J(v, grid, cfg),
        "E": _energy(v, grid),
        "sup_ut": sup_ut,
        "ma_min": float(np.min(G[inner])),
        "ma_max": float(np.max(G[inner])),
        "u_min": float(np.min(v)),
        "u_max": float(np.max(v)),
        "u_bdry": float(v[-1]),
        "M": float(np.max(np.abs(v))) + 1.0,
    }
    if cfg.f.density is not None:
        B = cfg.f.density(grid.nodes, v)
        with np.errstate(divide="ignore", invalid="ignore"):
            term = (_mu_of(cfg.mu, G) - _mu_of(cfg.mu, B)) * (G - B)
        term = np.where(G == B, 0.0, term)[inner]
        d["dissipation_min"] = float(np.min(term))
        d["dissipation"] = float(grid.integrate(np.concatenate([np.where(np.isfinite(term), term, 0.0), [0.0]])))
    return d


def _propose(grid, V, t, dt, cfg, floor):
    G, R = flow_rhs(grid, V, t, cfg)
    if cfg.scheme == "explicit":
        D = dt * np.where(np.isfinite(R), R, 0.0)
    else:
        D = np.empty_like(V)
        for k in range(V.shape[0]):
            r = np.where(np.isfinite(R[k]), R[k], 0.0)
            D[k] = _implicit_increment(grid, V[k], G[k], r, t, dt, cfg)
    D[:, -1] = 0.0
    W = V + D
    for k in range(W.shape[0]):
        W[k] = psh_project(RadialFn(grid, W[k]), floor).values
    return W, G


def _check(grid, V, W, Gold, t, dt, cfg, J_old):
    """Reason for rejecting the proposal W, or None."""
    if not np.all(np.isfinite(W)):
        return "non-finite"
    Gn = ma_density(grid, W)
    if np.any(Gn[:, :-1] <= 0):
        return "density lost positivity"
    if np.max(W) > 0:
        return "positive values"
    cap = cfg.cfl_safety * max(float(np.max(np.abs(V))), 1e-3)
    if np.max(np.abs(W - V)) > cap:
        return "change above cap"
    if cfg.scheme == "explicit" and dt > _explicit_dt_cap(grid, V, Gold, cfg):
        return "explicit stability limit"
    if cfg.monotone_J and cfg.f.nl is not None:
        try:
            J_new = [_J(w, grid, cfg) for w in W]
        except ConeViolation:
            return "left the cone"
        if any(jn > jo + cfg.j_slack for jn, jo in zip(J_new, J_old)):
            return "J increased"
    return None


def step_batch(states: Sequence[FlowState], cfg: FlowConfig, dt: Optional[float] = None,
               t_stop: float = math.inf) -> List[FlowState]:
    """Advance several states by one common accepted step."""
    grid = states[0].v.grid
    t = states[0].t
    if any(abs(st.t - t) > 1e-14 for st in states):
        raise ValueError("batched states must share the time")
    V = np.stack([st.v.values for st in states])
    dt = states[0].dt if dt is None else dt
    dt = cfg.dt_init if not math.isfinite(dt) else dt
    dt = min(dt, cfg.dt_max, max(t_stop - t, DT_MIN))
    floor = cfg.psh_floor * math.exp(-t)
    J_old = [st.diagnostics.get("J", math.nan) for st in states]
    reasons = []
    while True:
        if dt < DT_MIN:
            raise ConvergenceError(
                f"time step underflow at t={t:.6g}; last rejections: {reasons[-5:]}",
                stage="flow_step",
                info={"t": t, "dt": dt, "reasons": reasons[-20:],
                      "diagnostics": [st.diagnostics for st in states]})
        W, Gold = _propose(grid, V, t, dt, cfg, floor)
        why = _check(grid, V, W, Gold, t, dt, cfg, J_old)
        shrink = 0.5
        if why is None and cfg.err_tol is not None:
            ratio = _local_error(grid, V, W, t, dt, cfg) / cfg.err_tol
            if ratio > 1.0:
                why = "local time error"
                shrink = max(0.2, 0.9 / math.sqrt(ratio))
        if why is None:
            break
        reasons.append(why)
        dt *= shrink
    out = []
    tn = t + dt
    nxt = min(dt * cfg.grow, cfg.dt_max)
    if cfg.err_tol is not None:
        nxt = min(nxt, dt * 0.9 / math.sqrt(max(ratio, 1e-12)))
    for k, st in enumerate(states):
        d = flow_diagnostics(grid, W[k], tn, cfg)
        d["dt"] = dt
        st.history.append(d)
        out.append(FlowState(tn, RadialFn(grid, W[k]), d, st.history, nxt))
    return out


def _local_error(grid, V, W, t, dt, cfg) -> float:
    """Euler vs trapezoid: (dt/2) max |u_t(new) - u_t(old)|, relative to 1 + |u|."""
    _, R0 = flow_rhs(grid, V, t, cfg)
    _, R1 = flow_rhs(grid, W, t + dt, cfg)
    D = np.abs(R1[:, :-1] - R0[:, :-1])
    D = np.where(np.isfinite(D), D, 0.0)
    return float(np.max(0.5 * dt * D / (1.0 + np.abs(V[:, :-1]))))


def initial_state(v0: RadialFn, cfg: FlowConfig, t0: float = 0.0) -> FlowState:
    if abs(v0.values[-1]) > 0:
        raise ValueError("initial data must vanish at s = 1")
    d = flow_diagnostics(v0.grid, v0.values, t0, cfg)
    d["dt"] = 0.0
    return FlowState(t0, v0, d, [d], cfg.dt_init)


def step(state: FlowState, cfg: FlowConfig) -> FlowState:
    return step_batch([state], cfg)[0]


def run(cfg: FlowConfig, v0: RadialFn, t_end: Optional[float] = None,
        callback: Optional[Callable] = None) -> FlowState:
    """Integrate to ``t_end`` (default cfg.t_end) or until sup|u_t| <= steady_tol."""
    return run_batch(cfg, [v0], t_end, callback)[0]


def run_batch(cfg: FlowConfig, v0s: Sequence[RadialFn], t_end: Optional[float] = None,
              callback: Optional[Callable] = None, stop_when_steady: bool = True,
              states: Optional[List[FlowState]] = None) -> List[FlowState]:
    t_end = cfg.t_end if t_end is None else t_end
    if states is None:
        states = [initial_state(v, cfg) for v in v0s]
    for _ in range(cfg.max_steps):
        if states[0].t >= t_end - 1e-14:
            break
        if stop_when_steady and len(states[0].history) > 1 and all(
                st.diagnostics["sup_ut"] <= cfg.steady_tol for st in states):
            break
        states = step_batch(states, cfg, t_stop=t_end)
        if callback is not None and callback(states) is False:
            break
    return states


def is_steady(state: FlowState, cfg: FlowConfig) -> bool:
    return state.diagnostics["sup_ut"] <= cfg.steady_tol


# -- compatibility ----------------------------------------------------------------

def compatibility_residual(v: RadialFn, f: Forcing, mu, t: float = 0.0) -> float:
    g = ma_density(v.grid, v.values)[-1]
    with np.errstate(divide="ignore"):
        return float(abs(mu(max(g, 0.0)) - f(1.0, t, 0.0)))


def prepare_initial(v_raw: RadialFn, f, mu, blend_delta: float = 0.05) -> RadialFn:
    """Replace the density of ``v_raw`` near s = 1 by the compatible one.

    g = (1 - chi) MA(v_raw) + chi mu^{-1}(f(s, 0, 0)) with chi a smooth
    step from 0 at s = 1 - 2 delta to 1 at s = 1 - delta; the result is
    solve_radial_ma(g), so mu(MA(u0)) = f(., 0, 0) on the boundary.
    """
    if isinstance(f, Nonlinearity):
        f = mu_forcing(f, mu, v_raw.grid.n)
    if abs(v_raw.values[-1]) > 1e-12:
        raise ValueError("v_raw must vanish at s = 1")
    if not 0 < blend_delta < 0.5:
        raise ValueError("blend_delta must lie in (0, 0.5)")
    grid = v_raw.grid
    g_raw = ma_rad(v_raw)
    interp = PchipInterpolator(grid.nodes, g_raw)
    with np.errstate(divide="ignore"):
        f_edge = np.asarray(f(np.linspace(1 - 2 * blend_delta, 1.0, 64), 0.0, 0.0), dtype=float)
    if not np.all(np.isfinite(f_edge)):
        raise ValueError("mu^{-1} out of range: f(., 0, 0) is not finite near the boundary")

    def target(s):
        return mu.inverse(np.asarray(f(s, 0.0, 0.0), dtype=float) * np.ones_like(s))

    scale = [1.0]

    def g(s):
        s = np.asarray(s, dtype=float)
        chi = smooth_step((s - (1.0 - 2.0 * blend_delta)) / blend_delta)
        inner = np.maximum(interp(np.clip(s, 0.0, 1.0)), 0.0)
        out = (1.0 - chi) * inner
        m = chi > 0
        if np.any(m):
            out = out.copy()
            out[m] += chi[m] * scale[0] * target(s[m])
        return out

    # the one-sided boundary stencil misses the target density by O(h^4);
    # rescale the band so the discrete density matches it
    want = float(target(np.array([1.0]))[0])

    def miss(c):
        scale[0] = c
        v = solve_radial_ma(grid, g)
        return float(ma_density(grid, v.values)[-1]) - want, v

    c0, (r0, v) = 1.0, miss(1.0)
    if abs(r0) > 1e-14 * want and want > 0:
        c1 = c0 * want / (r0 + want) if r0 + want > 0 else 2.0
        r1, v = miss(c1)
        for _ in range(20):          # secant on the band scale
            if abs(r1) <= 1e-14 * want or r1 == r0:
                break
            c0, r0, c1 = c1, r1, max(c1 - r1 * (c1 - c0) / (r1 - r0), 1e-3 * c1)
            r1, v = miss(c1)
    return v


# -- stability and monitors --------------------------------------------------------

@dataclass
class StabilityReport:
    sup_diff: float
    initial_diff: float
    K: float
    K_visited: float
    T: float
    bound: float
    slack: float
    holds: bool
    steps: int
    diffs: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("sup_diff", "initial_diff", "K", "K_visited", "T",
                                              "bound", "slack", "holds", "steps")}


def stability_pair(cfg: FlowConfig, v0_a: RadialFn, v0_b: RadialFn, T: float,
                   K: Optional[float] = None) -> StabilityReport:
    """Run both data on one step schedule and compare with e^{KT} |u0 - v0|.

    K defaults to max |df/dx| over s in the grid, t in [0, T] and x between
    -M0 and 0, with M0 the largest |u| seen on either trajectory.
    """
    grid = v0_a.grid
    diffs = [float(np.max(np.abs(v0_a.values - v0_b.values)))]
    seen = [max(v0_a.sup_norm(), v0_b.sup_norm())]
    visited = [0.0]

    def cb(states):
        a, b = states
        diffs.append(float(np.max(np.abs(a.v.values - b.v.values))))
        seen.append(max(a.v.sup_norm(), b.v.sup_norm()))
        with np.errstate(all="ignore"):
            for st in states:
                fx = np.abs(cfg.f.dx(grid.nodes[:-1], st.t, st.v.values[:-1]))
                visited.append(float(np.max(fx)) if np.all(np.isfinite(fx)) else math.inf)

    states = run_batch(cfg, [v0_a, v0_b], T, cb, stop_when_steady=False)
    if K is None:
        M0 = max(seen)
        x = -np.concatenate([np.logspace(-12, 0, 121) * M0, np.linspace(0, M0, 401)[1:]])
        S, X = np.meshgrid(grid.nodes, x)
        Kmax = 0.0
        with np.errstate(all="ignore"):
            for t in np.linspace(0.0, T, 5):
                fx = np.abs(cfg.f.dx(S, t, X))
                Kmax = max(Kmax, float(np.max(fx)) if np.all(np.isfinite(fx)) else math.inf)
        K = Kmax
    with np.errstate(over="ignore"):
        bound = math.exp(K * T) * diffs[0] if K * T < 700 else math.inf
    h = grid.h_max
    sup = max(diffs)
    slack = bound + 100 * h * h - sup
    return StabilityReport(sup, diffs[0], K, max(visited), T, bound, slack, bool(slack >= 0),
                           len(states[0].history) - 1, diffs)


@dataclass
class MonitorReport:
    max_ut_over_M: float
    min_ma: float
    max_ma_over_Mp: float
    finite: bool
    min_ma_positive: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def monitors(history: Sequence[dict], p: float) -> MonitorReport:
    ut = np.array([d["sup_ut"] / d["M"] for d in history[1:]] or [0.0])
    mn = min(d["ma_min"] for d in history)
    if math.isinf(p):
        mx = max(d["ma_max"] for d in history)
    else:
        mx = max(d["ma_max"] / d["M"] ** p for d in history)
    vals = [float(np.max(ut)), mn, mx]
    return MonitorReport(vals[0], mn, mx, bool(all(math.isfinite(x) for x in vals)), bool(mn > 0))


def uniform_bound_violation(history: Sequence[dict], u0_norm: float, K1: float, K2: float,
                            h: float) -> float:
    """max over steps of (lower bound) - min u; <= 0 means the bound held."""
    if not K2 > 0 or not math.isfinite(K1):
        return -math.inf
    worst = -math.inf
    for d in history:
        lower = -(u0_norm + K1 / K2) * math.exp(min(K2 * d["t"], 700.0)) - 10 * h * h
        worst = max(worst, lower - d["u_min"])
    return worst


TRAJ_COLUMNS = ("t", "J", "sup_ut", "ma_min", "ma_max", "u_min")


def write_trajectory(path, history: Sequence[dict], header_lines: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        wr = csv.writer(fh)
        wr.writerow(TRAJ_COLUMNS)
        for d in history:
            wr.writerow([f"{d[c]:.17g}" for c in TRAJ_COLUMNS])
