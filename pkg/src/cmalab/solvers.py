"""Static radial solvers: exact inverse of MA and the first eigenpair."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_banded

from .errors import ConvergenceError
from .functionals import energy_E, energy_I, ma_density
from .radial import RadialFn, RadialGrid, psh_project

log = logging.getLogger(__name__)

_GX, _GW = np.polynomial.legendre.leggauss(8)


def _flux_integral(grid: RadialGrid, g) -> np.ndarray:
    """F(s_j) = n int_0^{s_j} g(sigma) sigma^(n-1) dsigma at every node.

    Node values are interpolated linearly (product trapezoid, exact against
    the weight); a callable is integrated by 8-point Gauss-Legendre per cell.
    """
    n, s = grid.n, grid.nodes
    a, b = s[:-1], s[1:]
    h = b - a
    if callable(g):
        x = 0.5 * (a + b)[:, None] + 0.5 * h[:, None] * _GX[None, :]
        gv = np.asarray(g(x), dtype=float) * np.ones_like(x)
        if np.any(gv < 0):
            raise ValueError("density must be nonnegative")
        cell = 0.5 * h * ((gv * x ** (n - 1)) @ _GW)
    else:
        gv = np.asarray(g, dtype=float)
        if gv.shape != (grid.N,):
            raise ValueError(f"expected {grid.N} density values, got shape {gv.shape}")
        k = n // 2 + 2
        gx, gw = np.polynomial.legendre.leggauss(k)
        x = 0.5 * (a + b)[:, None] + 0.5 * h[:, None] * gx[None, :]
        lam = (x - a[:, None]) / h[:, None]
        gi = (1 - lam) * gv[:-1, None] + lam * gv[1:, None]
        cell = 0.5 * h * ((gi * x ** (n - 1)) @ gw)
    return n * np.concatenate([[0.0], np.cumsum(cell)])


def _half_cell_flux(grid: RadialGrid, g: np.ndarray, F: np.ndarray) -> np.ndarray:
    """F at cell midpoints, g linear in the cell as in ``_flux_integral``."""
    n, s = grid.n, grid.nodes
    a, h = s[:-1], np.diff(s)
    gx, gw = np.polynomial.legendre.leggauss(n // 2 + 2)
    x = a[:, None] + 0.25 * h[:, None] * (gx[None, :] + 1.0)
    lam = (x - a[:, None]) / h[:, None]
    gi = (1 - lam) * g[:-1, None] + lam * g[1:, None]
    return np.maximum(F[:-1] + n * 0.25 * h * ((gi * x ** (n - 1)) @ gw), 0.0)


def _slope_integral(grid: RadialGrid, g: Callable, F: np.ndarray) -> np.ndarray:
    """int_{s_j}^{s_j+1} F(sigma)^(1/n) / sigma per cell, by nested Gauss-Legendre."""
    n, s = grid.n, grid.nodes
    a, h = s[:-1], np.diff(s)
    sig = a[:, None] + 0.5 * h[:, None] * (_GX[None, :] + 1.0)            # (cells, 8)
    tau = a[:, None, None] + 0.5 * (sig - a[:, None])[:, :, None] * (_GX[None, None, :] + 1.0)
    gv = np.asarray(g(tau), dtype=float) * np.ones_like(tau)
    part = 0.5 * (sig - a[:, None]) * ((gv * tau ** (n - 1)) @ _GW)
    Fs = np.maximum(F[:-1, None] + n * part, 0.0)
    return 0.5 * h * ((Fs ** (1.0 / n) / sig) @ _GW)


def solve_radial_ma(grid: RadialGrid, g) -> RadialFn:
    """The psh v with v(1) = 0 and MA(v) = g, from the flux identity.

    (s v')^n = n int_0^s g sigma^(n-1), so v' = F^(1/n) / s; at s = 0 the
    limit g(0)^(1/n) is used.  ``g`` is an array of node values or a
    callable of s.  The map is monotone: larger g gives a smaller v.
    """
    if not callable(g):
        gv = np.asarray(g, dtype=float)
        if gv.ndim == 0:
            gv = np.full(grid.N, float(gv))
        if not np.all(np.isfinite(gv)):
            raise ValueError("density must be finite")
        if np.any(gv < 0):
            raise ValueError(f"density must be nonnegative, min is {np.min(gv):.3e}")
        g = gv
    n, s = grid.n, grid.nodes
    F = _flux_integral(grid, g)
    w = np.maximum(F, 0.0) ** (1.0 / n)
    dv = np.empty_like(s)
    dv[1:] = w[1:] / s[1:]
    g0 = float(np.asarray(g(np.array([0.0]))).ravel()[0]) if callable(g) else g[0]
    dv[0] = max(g0, 0.0) ** (1.0 / n)
    if callable(g):
        inc = _slope_integral(grid, g, F)
    else:
        # cell slope F(m)^(1/n) / m at the midpoint m: the discrete flux is then
        # exactly F(m)^(1/n), monotone in m, so the output passes is_psh
        m = grid.midpoints
        inc = _half_cell_flux(grid, g, F) ** (1.0 / n) / m * np.diff(s)
    v = np.zeros_like(s)
    v[:-1] = -np.cumsum(inc[::-1])[::-1]
    return RadialFn(grid, v)


# -- comparison oracle -------------------------------------------------------

@dataclass
class ComparisonVerdict:
    premise: bool          # ma(v1) >= ma(v2) at every node
    conclusion: bool       # v1 <= v2 + slack at every node
    max_excess: float      # max(v1 - v2)
    slack: float

    @property
    def holds(self) -> bool:
        return (not self.premise) or self.conclusion

    def __bool__(self):
        return self.holds


def comparison_check(v1: RadialFn, v2: RadialFn, slack: Optional[float] = None,
                     tol: float = 1e-10) -> ComparisonVerdict:
    if v1.grid is not v2.grid and not np.array_equal(v1.s, v2.s):
        raise ValueError("functions live on different grids")
    if abs(v1.values[-1] - v2.values[-1]) > 1e-12:
        raise ValueError("comparison needs equal boundary values")
    h = v1.grid.h_max
    slack = 10 * h * h if slack is None else slack
    premise = bool(np.all(ma_density(v1.grid, v1.values) >= ma_density(v2.grid, v2.values) - tol))
    diff = v1.values - v2.values
    return ComparisonVerdict(premise, bool(np.all(diff <= slack)), float(np.max(diff)), slack)


# -- eigenpair ----------------------------------------------------------------

@dataclass
class EigenResult:
    lambda1: float
    u1: RadialFn
    iterations: int
    residual: float
    method: str = "inverse_iteration"
    lambda_fixed: float = float("nan")   # scale of the discrete fixed point
    history: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"lambda1": self.lambda1, "residual": self.residual, "iterations": self.iterations,
                "method": self.method, "lambda_fixed": self.lambda_fixed}


def eigen_residual(u: RadialFn, lam: float) -> float:
    """max |MA(u) - (lam (-u))^n| over the nodes (unclamped density)."""
    n = u.grid.n
    g = ma_density(u.grid, u.values)
    return float(np.max(np.abs(g - (lam * np.maximum(-u.values, 0.0)) ** n)))


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / -np.min(v)


def default_tol(grid: RadialGrid) -> float:
    """1e-6, raised to h^2 on coarse grids where the nodal residual floor is O(h^2)."""
    return max(1e-6, grid.h_max**2)


def eigen_inverse_iteration(grid: RadialGrid, tol: Optional[float] = None, max_iter: int = 200,
                            v0: Optional[RadialFn] = None, theta: float = 0.0) -> EigenResult:
    """u_{k+1} = solve_radial_ma((lambda_k (-u_k))^n), renormalized to inf u = -1.

    lambda_k is rayleigh(u_k)^(1/n).  ``theta`` > 0 damps the forcing to
    ((1 - theta) lambda_k)^n, which is the rigidity experiment: then the
    iterates are not renormalized and decay to zero.
    """
    tol = default_tol(grid) if tol is None else tol
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = grid.n
    u = (v0.values if v0 is not None else grid.nodes - 1.0).astype(float)
    if np.min(u) >= 0:
        raise ValueError("initial guess must be negative somewhere")
    if theta == 0.0:
        u = _normalize(u)
    U = RadialFn(grid, u)
    lam = (energy_E(U) / energy_I(U)) ** (1.0 / n)
    hist = [lam]
    res = math.inf
    for k in range(1, max_iter + 1):
        w = solve_radial_ma(grid, (lam * (1.0 - theta) * np.maximum(-u, 0.0)) ** n).values
        if theta > 0.0:
            u = w
            hist.append(float(np.max(np.abs(u))))
            if hist[-1] == 0.0:
                break
            U = RadialFn(grid, u)
            lam = (energy_E(U) / energy_I(U)) ** (1.0 / n)
            continue
        scale = -np.min(w)
        u = w / scale
        U = RadialFn(grid, u)
        lam_new = (energy_E(U) / energy_I(U)) ** (1.0 / n)
        res = eigen_residual(U, lam_new)
        hist.append(lam_new)
        done = abs(lam_new - lam) <= tol * lam and res <= 100 * tol
        lam = lam_new
        log.debug("inverse iteration %d: lambda=%.12g residual=%.3e", k, lam, res)
        if done:
            return EigenResult(lam, U, k, res, "inverse_iteration", lam / scale, hist)
    if theta > 0.0:
        return EigenResult(lam, U, k, math.nan, "rigidity", math.nan, hist)
    raise ConvergenceError(f"inverse iteration did not converge in {max_iter} steps "
                           f"(last residual {res:.3e})", stage="eigen_inverse_iteration",
                           info={"residual": res, "lambda": lam})


def flux_energy(grid: RadialGrid, v: np.ndarray) -> float:
    """E as c_n/(n(n+1)) int s^n (v')^(n+1) ds, midpoint rule on cell slopes.

    Equal to energy_E in the continuum (integrate by parts against the flux
    (s v')^n).  Unlike the nodal form it is convex on the cone and has no
    spurious mode at the one-sided origin stencil.
    """
    n = grid.n
    h = np.diff(grid.nodes)
    slope = np.maximum(np.diff(v) / h, 0.0)
    m = grid.midpoints
    return grid.domain.vol_const / (n * (n + 1)) * float(np.sum(h * m**n * slope ** (n + 1)))


def _dual_weights(grid: RadialGrid) -> np.ndarray:
    """int of sigma^(n-1) over the dual cells [m_{j-1}, m_j] (m_{-1} = 0, m_{N-1} = 1)."""
    n = grid.n
    edges = np.concatenate([[0.0], grid.midpoints, [1.0]])
    return np.diff(edges**n) / n


def _rayleigh_and_grad(grid: RadialGrid, v: np.ndarray):
    """flux_energy / I and its exact gradient with respect to the node values.

    I uses dual-cell weights so the discrete Euler-Lagrange equation is the
    conservative flux scheme, consistent up to the origin.
    """
    n, w = grid.n, _dual_weights(grid)
    cn = grid.domain.vol_const
    h = np.diff(grid.nodes)
    m = grid.midpoints
    slope = np.maximum(np.diff(v) / h, 0.0)
    E = cn / (n * (n + 1)) * np.sum(h * m**n * slope ** (n + 1))
    I = cn / (n + 1) * np.sum(w * np.maximum(-v, 0.0) ** (n + 1))
    flux = cn / n * (m * slope) ** n
    gE = np.zeros_like(v)
    gE[1:] += flux
    gE[:-1] -= flux
    gI = -cn * w * np.maximum(-v, 0.0) ** n
    R = E / I
    gR = (gE - R * gI) / I
    gR[-1] = 0.0
    return R, gR, I


def _descent_residual(grid: RadialGrid, v: np.ndarray, R: float) -> float:
    """Density residual of the descent's own discrete equation (nodes 0..N-2)."""
    n, w = grid.n, _dual_weights(grid)
    h = np.diff(grid.nodes)
    flux = (grid.midpoints * np.maximum(np.diff(v) / h, 0.0)) ** n
    div = np.diff(np.concatenate([[0.0], flux]))
    return float(np.max(np.abs(div / (n * w[:-1]) - R * np.maximum(-v[:-1], 0.0) ** n)))


def _stiffness_solve(grid: RadialGrid, v: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve K x = rhs with K the Hessian of flux_energy (node N pinned)."""
    n = grid.n
    h = np.diff(grid.nodes)
    m = grid.midpoints
    slope = np.maximum(np.diff(v) / h, 1e-8)
    a = grid.domain.vol_const * m**n * slope ** (n - 1) / h
    N = grid.N - 1
    diag = np.zeros(N)
    diag += a[:N]
    diag[1:] += a[: N - 1]
    off = -a[: N - 1]
    ab = np.zeros((3, N))
    ab[0, 1:] = off
    ab[1] = diag
    ab[2, :-1] = off
    x = np.zeros(grid.N)
    x[:-1] = solve_banded((1, 1), ab, rhs[:-1])
    return x


def _close_origin(grid: RadialGrid, v: np.ndarray, lam: float) -> np.ndarray:
    """Set v_0 from the nodal equation at s = 0, where MA = (v')^n.

    The energy minimizer satisfies a natural boundary condition at the
    origin that agrees with the one-sided stencil only to O(h).
    """
    row = grid.D1[0]
    c, idx = row.data, row.indices
    rest = sum(ci * v[i] for ci, i in zip(c, idx) if i != 0)
    c0 = sum(ci for ci, i in zip(c, idx) if i == 0)
    out = v.copy()
    out[0] = -rest / (c0 + lam)
    return _normalize(out)


def eigen_rayleigh_descent(grid: RadialGrid, tol: Optional[float] = None, max_iter: int = 500,
                           v0: Optional[RadialFn] = None, armijo: float = 1e-4) -> EigenResult:
    """Projected, preconditioned gradient descent on E/I over the psh cone.

    E is evaluated in its integrated form (``flux_energy``).  The direction
    is the gradient preconditioned by the frozen-coefficient Hessian of E;
    its unit step is one inverse-iteration step for n = 1 and a 1/n-damped
    one otherwise.  Trial points are projected onto the cone and rescaled to
    inf u = -1 (E/I is scale invariant).  Steps start at 1.0 and halve until
    the Armijo condition holds, so accepted values of E/I never increase.

    Convergence uses the residual of the descent's own discrete equation;
    ``residual`` in the result is the nodal one, as for inverse iteration.
    """
    tol = default_tol(grid) if tol is None else tol
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = grid.n
    v = (v0.values if v0 is not None else grid.nodes - 1.0).astype(float)
    v = _normalize(v)
    v = psh_project(RadialFn(grid, v)).values
    R, gR, I = _rayleigh_and_grad(grid, v)
    hist = [R ** (1.0 / n)]
    own = math.inf

    def result(k):
        lam = R ** (1.0 / n)
        U = RadialFn(grid, _close_origin(grid, v, lam))
        return EigenResult(lam, U, k, eigen_residual(U, lam), "rayleigh_descent", math.nan, hist)

    for k in range(1, max_iter + 1):
        d = -I * _stiffness_solve(grid, v, gR)
        slope = float(gR @ d)
        if slope >= 0:
            d, slope = -gR, -float(gR @ gR)
        alpha = 1.0
        while alpha >= 1e-12:
            trial = v + alpha * d
            trial[-1] = 0.0
            trial = psh_project(RadialFn(grid, trial)).values
            if np.min(trial) < 0:
                trial = _normalize(trial)
                R_t, g_t, I_t = _rayleigh_and_grad(grid, trial)
                if R_t <= R + armijo * alpha * slope:
                    break
            alpha *= 0.5
        if alpha < 1e-12:
            # no decrease left at this resolution
            if _descent_residual(grid, v, R) <= 100 * tol:
                return result(k)
            raise ConvergenceError("line search failed", stage="eigen_rayleigh_descent",
                                   info={"residual": own})
        lam_old = R ** (1.0 / n)
        v, R, gR, I = trial, R_t, g_t, I_t
        lam = R ** (1.0 / n)
        hist.append(lam)
        own = _descent_residual(grid, v, R)
        log.debug("rayleigh descent %d: lambda=%.12g residual=%.3e alpha=%g", k, lam, own, alpha)
        if abs(lam - lam_old) <= tol * lam_old and own <= 100 * tol:
            return result(k)
    raise ConvergenceError(f"Rayleigh descent did not converge in {max_iter} steps "
                           f"(last residual {own:.3e})", stage="eigen_rayleigh_descent",
                           info={"residual": own})
