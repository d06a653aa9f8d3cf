"""Independent reference values, kept free of any solver code."""

from __future__ import annotations

import math


def bessel_j0(x: float, terms: int = 60) -> float:
    """J_0 from its power series sum_k (-1)^k (x/2)^(2k) / (k!)^2."""
    q = -(0.5 * x) ** 2
    term, parts = 1.0, [1.0]
    for k in range(1, terms):
        term *= q / (k * k)
        parts.append(term)
        if abs(term) < 1e-18:
            break
    return math.fsum(parts)


def j0_first_zero(lo: float = 2.0, hi: float = 3.0, tol: float = 1e-15) -> float:
    """First positive zero of J_0 by bisection on the power series."""
    flo = bessel_j0(lo)
    if flo * bessel_j0(hi) > 0:
        raise ValueError("bracket does not contain a sign change")
    while hi - lo > tol * hi:
        mid = 0.5 * (lo + hi)
        fm = bessel_j0(mid)
        if fm == 0.0:
            return mid
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def lambda1_disc() -> float:
    """First eigenvalue for n = 1.

    With u(z) = v(|z|^2) the equation u_{z zbar} = -lambda u is the Dirichlet
    Laplacian problem on the unit disc with eigenvalue 4 lambda, so
    lambda_1 = j_{0,1}^2 / 4.
    """
    return j0_first_zero() ** 2 / 4.0


def u1_disc(s):
    """Normalized first eigenfunction for n = 1: -J_0(j sqrt(s))."""
    import numpy as np

    j = j0_first_zero()
    return np.array([-bessel_j0(j * math.sqrt(x)) for x in np.atleast_1d(s)])
