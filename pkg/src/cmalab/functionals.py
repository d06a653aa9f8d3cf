"""Radial Monge-Ampere operator and the energy functionals built on it."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConeViolation, ConvergenceError
from .radial import RadialFn, RadialGrid

TOL_NEG = 1e-10
GROWTH_CLASSES = ("eigen", "sublinear", "superlinear", "custom")


@dataclass(frozen=True)
class Nonlinearity:
    """Right-hand side psi(s, x) >= 0 for x <= 0.

    ``bounds`` holds the flow-side constants (K1, K2, K3) of the forcing built
    from this nonlinearity when known; ``growth_params`` carries whatever the
    validators measured (theta, sigma, M, A, X_big, ...).
    """

    eval: Callable
    eval_dx: Callable
    growth_class: str = "custom"
    bounds: tuple = (float("nan"), float("nan"), float("nan"))
    growth_params: dict = field(default_factory=dict)
    name: str = "psi"
    # optional closed form of Psi(s, x) = int_x^0 psi^n(s, t) dt, valid for
    # the dimension growth_params["n"]
    antiderivative: Optional[Callable] = None

    def __post_init__(self):
        if self.growth_class not in GROWTH_CLASSES:
            raise ValueError(f"unknown growth class {self.growth_class!r}")

    def __call__(self, s, x):
        return self.eval(s, x)

    def pow_n(self, s, x, n: int):
        return np.asarray(self.eval(s, x), dtype=float) ** n

    def replace(self, **kw) -> "Nonlinearity":
        d = {k: getattr(self, k) for k in ("eval", "eval_dx", "growth_class", "bounds",
                                            "growth_params", "name", "antiderivative")}
        d.update(kw)
        return Nonlinearity(**d)


def eigen_nonlinearity(lambda1: float, n: int = 1) -> Nonlinearity:
    """psi = lambda1 |x|, whose Dirichlet problem is the eigenvalue equation."""
    return Nonlinearity(
        eval=lambda s, x: lambda1 * np.abs(x) * np.ones_like(np.asarray(s, float)),
        eval_dx=lambda s, x: -lambda1 * np.ones_like(np.asarray(x, float) * np.asarray(s, float)),
        growth_class="eigen",
        growth_params={"lambda1": lambda1, "n": n},
        name="eigen",
        antiderivative=lambda s, x: lambda1**n * np.abs(x) ** (n + 1) / (n + 1),
    )


# -- operator -----------------------------------------------------------------

def ma_density(grid: RadialGrid, V: np.ndarray) -> np.ndarray:
    """Unclamped (v')^(n-1) (v' + s v'') for one or a stack of value vectors."""
    n = grid.n
    V = np.asarray(V, dtype=float)
    p = (grid.D1 @ V.T).T
    q = (grid.D2 @ V.T).T
    return p ** (n - 1) * (p + grid.nodes * q)


def ma_rad(v: RadialFn, tol_neg: float = TOL_NEG) -> np.ndarray:
    """Monge-Ampere density of u(z) = v(|z|^2) at the grid nodes.

    Values in [-tol_neg, 0) are clamped to zero; anything more negative means
    the potential is not plurisubharmonic and raises ConeViolation.
    """
    return _clamped(v, ma_density(v.grid, v.values), tol_neg)


def _clamped(v: RadialFn, g: np.ndarray, tol_neg: float, skip_last: bool = False) -> np.ndarray:
    bad = np.flatnonzero(g[:-1] < -tol_neg if skip_last else g < -tol_neg)
    if bad.size:
        j = int(bad[np.argmin(g[bad])])
        raise ConeViolation(f"negative Monge-Ampere density {g[j]:.3e} at s={v.s[j]:.6g}",
                            index=j, value=float(g[j]))
    return np.maximum(g, 0.0)


def clamp_tol(v: RadialFn) -> float:
    """Clamp tolerance used by the energies.

    Central differences of a psh function whose density vanishes to high
    order (e.g. (1 - s)^3 near the boundary) undershoot by O(h^2), so the
    tolerance grows with h^2 times the density scale.
    """
    g = ma_density(v.grid, v.values)
    return max(TOL_NEG, 10.0 * v.grid.h_max**2 * float(np.max(np.abs(g))))


def energy_E(v: RadialFn) -> float:
    # at s = 1 the weight -v(1) is zero, so the one-sided boundary density
    # (which can dip below zero for a discretely psh v) is not checked there
    n = v.grid.n
    g = _clamped(v, ma_density(v.grid, v.values), clamp_tol(v), skip_last=v.values[-1] == 0.0)
    return v.grid.integrate(-v.values * g) / (n + 1)


def energy_I(v: RadialFn) -> float:
    if np.max(v.values) > 1e-12:
        raise ValueError(f"energy_I needs v <= 0, max is {np.max(v.values):.3e}")
    n = v.grid.n
    return v.grid.integrate(np.maximum(-v.values, 0.0) ** (n + 1)) / (n + 1)


_GX, _GW = np.polynomial.legendre.leggauss(20)


def big_psi(nl: Nonlinearity, s, x, n: int, rtol: float = 1e-10, max_level: int = 12,
            exact: bool = True):
    """Psi(s, x) = int_x^0 psi^n(s, t) dt, vectorized over s and x.

    Uses ``nl.antiderivative`` when present (and ``exact``); otherwise
    composite 20-point Gauss-Legendre on [x, 0] with the panel count doubling
    until successive estimates agree to ``rtol``.
    """
    s, x = np.broadcast_arrays(np.asarray(s, float), np.asarray(x, float))
    if np.any(x > 1e-12):
        raise ValueError("big_psi needs x <= 0")
    x = np.minimum(x, 0.0)
    if exact and nl.antiderivative is not None and nl.growth_params.get("n", n) == n:
        return np.asarray(nl.antiderivative(s, x), dtype=float) * np.ones(s.shape)
    flat_s, flat_x = s.ravel(), x.ravel()

    def panels(P):
        # panel k covers [x*(k+1)/P, x*k/P]
        edges = np.linspace(0.0, 1.0, P + 1)
        mid = 0.5 * (edges[1:] + edges[:-1])
        half = 0.5 / P
        t = (mid[:, None] + half * _GX[None, :]).ravel()  # fraction of x
        w = np.tile(_GW * half, P)
        pts = flat_x[:, None] * t[None, :]
        vals = nl.pow_n(flat_s[:, None], pts, n)
        return -flat_x * (vals @ w)

    P = 1
    prev = panels(P)
    for _ in range(max_level):
        P *= 2
        cur = panels(P)
        err = np.abs(cur - prev)
        if np.all(err <= rtol * np.maximum(np.abs(cur), 1e-300) + 1e-300):
            return cur.reshape(s.shape)
        prev = cur
    raise ConvergenceError(f"Psi quadrature did not converge (max err {np.max(err):.3e})",
                           stage="big_psi", info={"max_err": float(np.max(err))})


def functional_J(v: RadialFn, nl: Nonlinearity) -> float:
    n = v.grid.n
    psi_int = big_psi(nl, v.s, v.values, n)
    return energy_E(v) - v.grid.integrate(psi_int)


def rayleigh(v: RadialFn) -> float:
    I = energy_I(v)
    if I <= 0.0 or not np.any(v.values != 0.0):
        raise ValueError("Rayleigh quotient undefined for v = 0")
    return energy_E(v) / I


def _check_nonconstant(v: RadialFn) -> float:
    E = energy_E(v)
    if E <= 0.0:
        raise ValueError("function has zero energy")
    return E


def mt_check(v: RadialFn, gamma: float) -> float:
    """int exp(gamma |v|^(1+1/n) / E(v)^(1/n)) over the ball."""
    n = v.grid.n
    if not 0.0 < gamma < 2 * n:
        raise ValueError(f"gamma must lie in (0, {2 * n}), got {gamma}")
    E = _check_nonconstant(v)
    expo = gamma * np.abs(v.values) ** (1.0 + 1.0 / n) / E ** (1.0 / n)
    return v.grid.integrate(np.exp(expo))


def sobolev_check(v: RadialFn, p: float, gamma: Optional[float] = None) -> float:
    """Ratio ||v||_{L^p} / E(v)^(1/(n+1)); scale invariant."""
    n = v.grid.n
    if p <= 1:
        raise ValueError("p must exceed 1")
    if gamma is not None and not 0.0 < gamma < 2 * n:
        raise ValueError(f"gamma must lie in (0, {2 * n})")
    E = _check_nonconstant(v)
    lp = v.grid.integrate(np.abs(v.values) ** p) ** (1.0 / p)
    return lp / E ** (1.0 / (n + 1))


@dataclass
class FunctionalReport:
    E: float
    I: float
    J: float
    rayleigh: float
    mt_integral: float

    def to_json(self) -> str:
        return json.dumps({k: float(x) for k, x in asdict(self).items()})

    @classmethod
    def from_json(cls, text: str) -> "FunctionalReport":
        d = json.loads(text)
        return cls(**{k: float(d[k]) for k in ("E", "I", "J", "rayleigh", "mt_integral")})


def functional_report(v: RadialFn, nl: Nonlinearity, gamma: float = 1.0) -> FunctionalReport:
    E, I = energy_E(v), energy_I(v)
    return FunctionalReport(
        E=E,
        I=I,
        J=functional_J(v, nl),
        rayleigh=E / I if I > 0 else math.nan,
        mt_integral=mt_check(v, gamma) if E > 0 else math.nan,
    )
