"""Radial discretization of the unit ball in C^n.

A radial potential is written u(z) = v(|z|^2) and every object in the package
lives on the coordinate s = |z|^2 in [0, 1].  The complex Hessian of u has
eigenvalues v'(s) (multiplicity n - 1) and (s v'(s))', so plurisubharmonicity
reduces to ``w = s v'`` being nonnegative and nondecreasing.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

MIN_NODES = 16


@dataclass(frozen=True)
class BallDomain:
    """Unit ball of C^n with the Euclidean Kahler form.

    With omega = sqrt(-1) sum dz_i ^ dz_i-bar we have
    omega^n = n! 2^n dV and therefore
    ``int_ball f(|z|^2) omega^n = n (2 pi)^n int_0^1 f(s) s^(n-1) ds``.
    """

    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"complex dimension must be an integer >= 1, got {self.n}")

    @property
    def vol_const(self) -> float:
        return self.n * (2.0 * math.pi) ** self.n

    @property
    def volume(self) -> float:
        return self.vol_const / self.n

    @staticmethod
    def rho_at(s):
        """Defining function rho = |z|^2 - 1."""
        return np.asarray(s, dtype=float) - 1.0

    # complex Hessian of rho is the identity
    eps0: float = field(default=1.0, init=False)


def _fd_weights(x0: float, xs: np.ndarray, order: int) -> np.ndarray:
    """Fornberg finite difference weights for the ``order``-th derivative at x0."""
    m = len(xs)
    c = np.zeros((m, order + 1))
    c1 = 1.0
    c4 = xs[0] - x0
    c[0, 0] = 1.0
    for i in range(1, m):
        mn = min(i, order)
        c2 = 1.0
        c5 = c4
        c4 = xs[i] - x0
        for j in range(i):
            c3 = xs[i] - xs[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, -1, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3 if k else c4 * c[j, k] / c3
        c1 = c2
    return c[:, order]


def _diff_matrix(s: np.ndarray, order: int) -> sp.csr_matrix:
    """Central three-point rows inside; one-sided fourth-order rows at the ends.

    The end rows use order + 4 points.  Densities often vanish at s = 1 and
    a second-order end error would push them below the clamp tolerance.
    """
    N = len(s)
    m = order + 4
    rows, cols, vals = [], [], []
    for j in range(N):
        if j == 0:
            idx = list(range(m))
        elif j == N - 1:
            idx = list(range(N - m, N))
        else:
            idx = [j - 1, j, j + 1]
        w = _fd_weights(s[j], s[idx], order)
        rows.extend([j] * len(idx))
        cols.extend(idx)
        vals.extend(w)
    return sp.csr_matrix((vals, (rows, cols)), shape=(N, N))


def _product_trapezoid_weights(s: np.ndarray, n: int) -> np.ndarray:
    """Weights integrating the piecewise-linear interpolant against s^(n-1) exactly."""
    k = n // 2 + 2
    gx, gw = np.polynomial.legendre.leggauss(k)
    a, b = s[:-1], s[1:]
    h = b - a
    x = 0.5 * (a + b)[:, None] + 0.5 * h[:, None] * gx[None, :]
    wq = 0.5 * h[:, None] * gw[None, :] * x ** (n - 1)
    left = np.sum(wq * (b[:, None] - x) / h[:, None], axis=1)
    right = np.sum(wq * (x - a[:, None]) / h[:, None], axis=1)
    w = np.zeros_like(s)
    w[:-1] += left
    w[1:] += right
    return w


class RadialGrid:
    """Nodes 0 = s_0 < ... < s_{N-1} = 1 with quadrature and FD operators."""

    def __init__(self, domain: BallDomain, nodes: Sequence[float], clustering: str = "custom"):
        s = np.asarray(nodes, dtype=float).copy()
        if s.ndim != 1 or len(s) < MIN_NODES:
            raise ValueError(f"need at least {MIN_NODES} nodes, got {len(s)}")
        if s[0] != 0.0 or s[-1] != 1.0:
            raise ValueError("grid endpoints must be exactly 0 and 1")
        if np.any(np.diff(s) <= 0):
            raise ValueError("grid nodes must be strictly increasing")
        s.flags.writeable = False
        self.domain = domain
        self.nodes = s
        self.clustering = clustering

    @property
    def n(self) -> int:
        return self.domain.n

    @property
    def N(self) -> int:
        return len(self.nodes)

    @property
    def h_min(self) -> float:
        return float(np.min(np.diff(self.nodes)))

    @property
    def h_max(self) -> float:
        return float(np.max(np.diff(self.nodes)))

    @cached_property
    def quad_weights(self) -> np.ndarray:
        w = _product_trapezoid_weights(self.nodes, self.n)
        w.flags.writeable = False
        return w

    @cached_property
    def D1(self) -> sp.csr_matrix:
        return _diff_matrix(self.nodes, 1)

    @cached_property
    def D2(self) -> sp.csr_matrix:
        return _diff_matrix(self.nodes, 2)

    @cached_property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.nodes[1:] + self.nodes[:-1])

    @cached_property
    def cell_weights(self) -> np.ndarray:
        """Quadrature mass of each cell [s_j, s_{j+1}] against s^(n-1) ds."""
        s = self.nodes
        return (s[1:] ** self.n - s[:-1] ** self.n) / self.n

    def integrate(self, f) -> float:
        """Integral over the ball of the radial function with node values ``f``."""
        f = np.asarray(f, dtype=float)
        if f.shape[-1] != self.N:
            raise ValueError(f"expected {self.N} values, got {f.shape[-1]}")
        if not np.all(np.isfinite(f)):
            raise ValueError("integrand has non-finite values")
        return self.domain.vol_const * (f @ self.quad_weights)

    def __repr__(self):
        return f"RadialGrid(n={self.n}, N={self.N}, clustering={self.clustering!r})"


def make_grid(n: int, N: int, clustering: str = "uniform") -> RadialGrid:
    """Build a radial grid with ``N`` nodes on [0, 1].

    ``boundary_refined`` uses the map s = 0.1 x + 0.9 (1 - (1 - x)^2), which
    keeps the spacing smooth and puts about 28% of the nodes in [0.9, 1].
    """
    if int(N) != N or N < MIN_NODES:
        raise ValueError(f"N must be an integer >= {MIN_NODES}, got {N}")
    domain = BallDomain(int(n))
    x = np.linspace(0.0, 1.0, int(N))
    if clustering == "uniform":
        s = x
    elif clustering == "boundary_refined":
        s = 0.1 * x + 0.9 * (1.0 - (1.0 - x) ** 2)
        s[0], s[-1] = 0.0, 1.0
    else:
        raise ValueError(f"unknown clustering {clustering!r}")
    return RadialGrid(domain, s, clustering)


@dataclass(frozen=True, eq=False)
class RadialFn:
    """Node values of a radial potential v on a grid."""

    grid: RadialGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.grid.N,):
            raise ValueError(f"expected shape ({self.grid.N},), got {v.shape}")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @classmethod
    def from_callable(cls, grid: RadialGrid, fn) -> "RadialFn":
        return cls(grid, np.asarray(fn(grid.nodes), dtype=float) * np.ones(grid.N))

    @property
    def s(self) -> np.ndarray:
        return self.grid.nodes

    def __mul__(self, c: float) -> "RadialFn":
        return RadialFn(self.grid, c * self.values)

    __rmul__ = __mul__

    def __add__(self, other) -> "RadialFn":
        if isinstance(other, RadialFn):
            return RadialFn(self.grid, self.values + other.values)
        return RadialFn(self.grid, self.values + other)

    def __sub__(self, other) -> "RadialFn":
        if isinstance(other, RadialFn):
            return RadialFn(self.grid, self.values - other.values)
        return RadialFn(self.grid, self.values - other)

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def boundary_value(self) -> float:
        return float(self.values[-1])


def d1(v: RadialFn) -> np.ndarray:
    """Second-order first derivative (central inside, one-sided five-point at the ends)."""
    return v.grid.D1 @ v.values


def d2(v: RadialFn) -> np.ndarray:
    """Second-order second derivative (central inside, one-sided six-point at the ends)."""
    return v.grid.D2 @ v.values


def integrate(grid: RadialGrid, f) -> float:
    return grid.integrate(f)


# -- psh cone -----------------------------------------------------------------

def pav(y, weights=None) -> np.ndarray:
    """Weighted least-squares projection of ``y`` onto nondecreasing sequences."""
    y = np.asarray(y, dtype=float)
    if weights is None:
        weights = np.ones_like(y)
    weights = np.asarray(weights, dtype=float)
    if np.any(weights <= 0):
        raise ValueError("weights must be positive")
    # stack of blocks: (weighted mean, total weight, length)
    means, wts, lens = [], [], []
    for yi, wi in zip(y, weights):
        means.append(yi)
        wts.append(wi)
        lens.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            w = wts[-2] + wts[-1]
            m = (means[-2] * wts[-2] + means[-1] * wts[-1]) / w
            ln = lens[-2] + lens[-1]
            del means[-1], wts[-1], lens[-1]
            means[-1], wts[-1], lens[-1] = m, w, ln
    return np.repeat(means, lens)


def cell_slopes(v: RadialFn) -> np.ndarray:
    return np.diff(v.values) / np.diff(v.grid.nodes)


def flux_at_midpoints(v: RadialFn, floor: float = 0.0) -> np.ndarray:
    """Cell values of ``w - floor*s`` with w = s v' sampled at cell midpoints."""
    m = v.grid.midpoints
    return m * cell_slopes(v) - floor * m


def is_psh(v: RadialFn, floor: float = 0.0, tol: float = 1e-12) -> bool:
    """Discrete cone test: midpoint values of s v' - floor s are >= 0 and nondecreasing."""
    y = flux_at_midpoints(v, floor)
    scale = max(1.0, float(np.max(np.abs(y))))
    return bool(y[0] >= -tol * scale and np.all(np.diff(y) >= -tol * scale))


def _reintegrate(grid: RadialGrid, slopes: np.ndarray) -> np.ndarray:
    """Potential with the given cell slopes and v(1) = 0."""
    inc = slopes * np.diff(grid.nodes)
    v = np.zeros(grid.N)
    v[:-1] = -np.cumsum(inc[::-1])[::-1]
    return v


def psh_project(v: RadialFn, floor: float = 0.0) -> RadialFn:
    """Project ``v`` onto {s v' - floor s >= 0 and nondecreasing}, keeping v(1) = 0.

    The flux variable is projected with pool-adjacent-violators weighted by
    the cell masses, clipped at zero, and integrated back from s = 1.  Inputs
    already in the cone are returned unchanged, which makes the map
    idempotent node for node.
    """
    if floor < 0:
        raise ValueError("floor must be nonnegative")
    if abs(v.values[-1]) > 1e-12:
        raise ValueError("psh_project needs v(1) = 0")
    if is_psh(v, floor):
        return v
    grid = v.grid
    y = flux_at_midpoints(v, floor)
    y = np.maximum(pav(y, grid.cell_weights), 0.0)
    m = grid.midpoints
    slopes = (y + floor * m) / m
    return RadialFn(grid, _reintegrate(grid, slopes))


# -- CSV ----------------------------------------------------------------------

def write_csv(path, v: RadialFn, header: Iterable[str] = ("s", "value")) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(list(header))
        for s, x in zip(v.grid.nodes, v.values):
            wr.writerow([f"{s:.17g}", f"{x:.17g}"])


def read_csv(path, n: int) -> RadialFn:
    with open(path, newline="") as fh:
        rd = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(rd)
        if len(header) != 2:
            raise ValueError(f"expected two columns, got {header}")
        rows = [(float(a), float(b)) for a, b in rd]
    s = np.array([r[0] for r in rows])
    vals = np.array([r[1] for r in rows])
    grid = RadialGrid(BallDomain(n), s, "custom")
    return RadialFn(grid, vals)
