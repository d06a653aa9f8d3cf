import math

import numpy as np
import pytest
from scipy.special import jn_zeros, j0

from cmalab.errors import ConvergenceError
from cmalab.functionals import energy_E, energy_I, ma_rad
from cmalab.radial import RadialFn, is_psh
from cmalab.solvers import (comparison_check, eigen_inverse_iteration, eigen_rayleigh_descent,
                            eigen_residual, solve_radial_ma)

from conftest import eigen, grid

LAMBDA_DISC = jn_zeros(0, 1)[0] ** 2 / 4     # n = 1 eigenvalue, Bessel oracle


def test_solve_examples():
    g = grid(1, 256)
    v = solve_radial_ma(g, lambda s: 1.0 + 0 * s)
    assert np.max(np.abs(v.values - (g.nodes - 1))) <= 1e-14
    g2 = grid(2, 256)
    v2 = solve_radial_ma(g2, lambda s: 2 * s**2)
    assert np.max(np.abs(v2.values - (g2.nodes**2 - 1) / 2)) <= 1e-14
    zero = solve_radial_ma(g, np.zeros(g.N))
    assert np.all(zero.values == 0.0)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_solve_round_trip(n):
    g = grid(n, 1024)
    dens = lambda s: 1 + s + np.sin(4 * s) ** 2
    v = solve_radial_ma(g, dens)
    assert is_psh(v) and v.values[-1] == 0.0
    inner = slice(1, -1)
    assert np.max(np.abs(ma_rad(v)[inner] - dens(g.nodes)[inner])) <= 50 * g.h_max**2


def test_array_density_is_second_order():
    errs = []
    for N in (256, 512, 1024):
        g = grid(2, N)
        v = solve_radial_ma(g, 2 * g.nodes**2)
        errs.append(np.max(np.abs(v.values - (g.nodes**2 - 1) / 2)))
    assert 3.0 <= errs[0] / errs[1] <= 5.0 and 3.0 <= errs[1] / errs[2] <= 5.0


def test_solve_rejects_negative_density():
    g = grid(1, 64)
    with pytest.raises(ValueError):
        solve_radial_ma(g, g.nodes - 0.5)
    with pytest.raises(ValueError):
        solve_radial_ma(g, np.full(g.N, np.inf))


def test_comparison_examples():
    g = grid(1, 256)
    big = solve_radial_ma(g, lambda s: 2 + s)
    small = solve_radial_ma(g, lambda s: 1 + 0 * s)
    verdict = comparison_check(big, small)
    assert verdict.premise and verdict.conclusion and verdict
    rev = comparison_check(small, big)
    assert not rev.premise and rev.holds
    assert comparison_check(big, big).max_excess == 0.0
    with pytest.raises(ValueError):
        comparison_check(big, RadialFn(g, big.values + 1.0))


def test_comparison_random_densities(rng):
    g = grid(2, 256)
    for _ in range(20):
        a = rng.uniform(0, 2, 3)
        g1 = a[0] + a[1] * g.nodes + a[2] * g.nodes**3
        g2 = g1 + rng.uniform(0, 1) * (1 + np.cos(g.nodes))
        assert comparison_check(solve_radial_ma(g, g2), solve_radial_ma(g, g1)).holds


def test_eigen_matches_bessel():
    er = eigen(1, 1024)
    assert abs(er.lambda1 - LAMBDA_DISC) <= 1e-6 * LAMBDA_DISC
    s = er.u1.grid.nodes
    ref = -j0(jn_zeros(0, 1)[0] * np.sqrt(s))
    assert np.max(np.abs(er.u1.values - ref)) <= 1e-5


@pytest.mark.parametrize("n", [1, 2, 3])
def test_eigen_result_invariants(n):
    er = eigen(n, 512)
    u = er.u1
    assert abs(np.min(u.values) + 1.0) <= 1e-14
    assert u.values[-1] == 0.0 and is_psh(u)
    gap = abs(energy_E(u) - er.lambda1**n * energy_I(u))
    assert gap <= 10 * er.residual * energy_E(u)
    assert eigen_residual(u, er.lambda1) == pytest.approx(er.residual, rel=1e-12)
    assert er.to_dict()["lambda1"] == er.lambda1


def test_eigen_rescale_invariance():
    g = grid(1, 512)
    base = eigen_inverse_iteration(g)
    other = eigen_inverse_iteration(g, v0=RadialFn(g, 10 * (g.nodes - 1) * (1 + g.nodes)))
    assert abs(base.lambda1 - other.lambda1) <= 1e-9 * base.lambda1
    # eigenfunctions agree to the stopping residual
    assert np.max(np.abs(base.u1.values - other.u1.values)) <= max(base.residual, other.residual)


@pytest.mark.parametrize("n,tol", [(1, 2e-6), (2, 2e-6)])
def test_descent_agrees_with_inverse_iteration(n, tol):
    g = grid(n, 1024)
    ii = eigen(n, 1024)
    rd = eigen_rayleigh_descent(g)
    assert abs(rd.lambda1 - ii.lambda1) <= tol * ii.lambda1
    assert rd.method == "rayleigh_descent"
    assert np.all(np.diff(rd.history) <= 1e-12 * rd.history[0])


def test_descent_from_eigenfunction_stops_quickly():
    er = eigen(1, 1024)
    rd = eigen_rayleigh_descent(er.u1.grid, v0=er.u1)
    assert rd.iterations <= 2


def test_eigen_self_convergence_n2():
    a, b = eigen(2, 2048), eigen(2, 4096)
    h = grid(2, 2048).h_max
    assert abs(a.lambda1 - b.lambda1) <= 4 * h * h * b.lambda1


def test_eigen_non_convergence_raises():
    g = grid(1, 256)
    with pytest.raises(ConvergenceError) as exc:
        eigen_inverse_iteration(g, tol=1e-15, max_iter=3)
    assert exc.value.stage == "eigen_inverse_iteration"
    with pytest.raises(ValueError):
        eigen_inverse_iteration(g, v0=RadialFn(g, np.zeros(g.N)))


def test_rigidity_iterates_decay():
    g = grid(1, 512)
    res = eigen_inverse_iteration(g, theta=0.2, max_iter=20)
    sup = np.array(res.history[1:])
    assert res.method == "rigidity"
    assert np.all(np.diff(sup) < 0)
    # linear for n = 1: each step contracts by (1 - theta) once the shape settles
    assert np.max(np.abs(sup[-5:] / sup[-6:-1] - 0.8)) <= 1e-5
    assert sup[-1] <= 0.02 * sup[0]
    assert math.isnan(res.residual)
