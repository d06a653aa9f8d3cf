import json
import math

import numpy as np
import pytest

from cmalab.drivers import make_sublinear_test, make_superlinear_test
from cmalab.errors import ConeViolation
from cmalab.functionals import (FunctionalReport, Nonlinearity, big_psi, eigen_nonlinearity, energy_E,
                                energy_I, functional_J, functional_report, ma_rad, mt_check, rayleigh,
                                sobolev_check)
from cmalab.radial import RadialFn
from cmalab.solvers import solve_radial_ma

from conftest import eigen, grid


def const_nl(c):
    return Nonlinearity(lambda s, x: c + 0 * np.asarray(x, float) * np.asarray(s, float),
                        lambda s, x: 0 * np.asarray(x, float))


@pytest.mark.parametrize("n", [1, 2, 3])
def test_ma_of_linear_potential(n):
    g = grid(n, 64)
    assert np.max(np.abs(ma_rad(RadialFn(g, g.nodes - 1.0)) - 1.0)) <= 1e-12


@pytest.mark.parametrize("n,expected", [(1, lambda s: 2 * s), (2, lambda s: 2 * s**2)])
def test_ma_of_quadratic(n, expected):
    g = grid(n, 64)
    v = RadialFn(g, (g.nodes**2 - 1) / 2)
    assert np.max(np.abs(ma_rad(v) - expected(g.nodes))) <= 1e-8


def test_cone_violation_reported():
    g = grid(1, 64)
    with pytest.raises(ConeViolation) as exc:
        ma_rad(RadialFn(g, 1.0 - g.nodes))
    assert exc.value.value < 0


def test_energy_golden_values():
    # E(s - 1) = (1/2) c_1 int (1 - s) ds = pi / 2, I(s - 1) = c_1 / 6 = pi / 3
    g = grid(1, 4096)
    v = RadialFn(g, g.nodes - 1.0)
    assert abs(energy_E(v) - math.pi / 2) <= 1e-11
    assert abs(energy_I(v) - math.pi / 3) <= g.h_max**2
    zero = RadialFn(g, np.zeros(g.N))
    assert energy_E(zero) == 0.0 and energy_I(zero) == 0.0


@pytest.mark.parametrize("n", [1, 2, 3])
@pytest.mark.parametrize("c", [0.5, 2.0, 3.0, 10.0])
def test_homogeneity(n, c):
    g = grid(n, 256)
    v = solve_radial_ma(g, lambda s: 1 + s + np.sin(3 * s) ** 2)
    assert abs(energy_E(v * c) - c ** (n + 1) * energy_E(v)) <= 1e-12 * c ** (n + 1) * energy_E(v)
    assert abs(energy_I(v * c) - c ** (n + 1) * energy_I(v)) <= 1e-12 * c ** (n + 1) * energy_I(v)


def test_energy_I_rejects_positive():
    g = grid(1, 32)
    with pytest.raises(ValueError):
        energy_I(RadialFn(g, 1e-6 * np.ones(g.N)))


def test_big_psi_examples():
    nl1 = const_nl(1.0)
    assert big_psi(nl1, 0.3, 0.0, 1) == 0.0
    assert abs(big_psi(nl1, 0.3, -2.0, 1) - 2.0) <= 1e-12
    lin = Nonlinearity(lambda s, x: np.abs(x) + 0 * np.asarray(s, float), lambda s, x: -1.0)
    assert abs(big_psi(lin, 0.5, -1.0, 1) - 0.5) <= 1e-12
    with pytest.raises(ValueError):
        big_psi(nl1, 0.5, 0.1, 1)


@pytest.mark.parametrize("maker", [make_sublinear_test, make_superlinear_test])
@pytest.mark.parametrize("n", [1, 2])
def test_big_psi_quadrature_matches_closed_form(maker, n):
    nl = maker(1.4, n, validate=False)
    x = -np.logspace(-4, 2, 60)
    q = big_psi(nl, 0.5, x, n, exact=False)
    ref = big_psi(nl, 0.5, x, n)
    assert np.max(np.abs(q - ref) / ref) <= 1e-8
    assert np.all(np.diff(ref) > 0)      # |x| growing, Psi growing


def test_J_examples():
    er = eigen(1, 1024)
    g = er.u1.grid
    zero = RadialFn(g, np.zeros(g.N))
    assert functional_J(zero, eigen_nonlinearity(er.lambda1)) == 0.0
    J1 = functional_J(er.u1, eigen_nonlinearity(er.lambda1))
    assert abs(J1) <= 1e-5 * energy_E(er.u1)
    sub = make_sublinear_test(er.lambda1)
    assert functional_J(er.u1 * 1e-2, sub) < 0


def test_first_variation():
    # dJ/de at v in direction phi equals int (MA(v) - psi^n(v)) (-phi)
    g = grid(1, 1024)
    nl = make_sublinear_test(1.4457, validate=False)
    v = solve_radial_ma(g, lambda s: 1 + s)
    phi = RadialFn(g, 0.3 * (g.nodes - 1) * (1 + g.nodes))
    eps = 1e-5
    fd = (functional_J(v + phi * eps, nl) - functional_J(v - phi * eps, nl)) / (2 * eps)
    weak = g.integrate((ma_rad(v) - nl.pow_n(g.nodes, v.values, 1)) * (-phi.values))
    assert abs(fd - weak) <= 1e-4 * abs(weak)


def test_rayleigh():
    er = eigen(1, 1024)
    assert abs(rayleigh(er.u1) - er.lambda1) <= 1e-6 * er.lambda1
    for c in (0.1, 7.0):
        assert abs(rayleigh(er.u1 * c) - rayleigh(er.u1)) <= 1e-12 * er.lambda1
    g = er.u1.grid
    assert rayleigh(RadialFn(g, g.nodes - 1.0)) >= er.lambda1
    with pytest.raises(ValueError):
        rayleigh(RadialFn(g, np.zeros(g.N)))


@pytest.mark.parametrize("n", [1, 2])
def test_rayleigh_bounded_below_by_eigenvalue(n, rng):
    er = eigen(n, 512)
    g = er.u1.grid
    for _ in range(10):
        a = rng.uniform(0.1, 2.0, 3)
        v = solve_radial_ma(g, a[0] + a[1] * g.nodes + a[2] * np.cos(5 * g.nodes) ** 2)
        assert rayleigh(v) >= er.lambda1**n * (1 - 1e-6)


def test_mt_check():
    g = grid(1, 512)
    v = solve_radial_ma(g, lambda s: 1 + s)
    a = mt_check(v, 1.0)
    assert abs(mt_check(v * 5, 1.0) - a) <= 1e-10 * a
    assert math.isfinite(mt_check(RadialFn(g, 1e-3 * (g.nodes - 1)), 1.5))
    tiny = mt_check(v, 1e-12)
    assert abs(tiny - g.domain.volume) <= 1e-9
    with pytest.raises(ValueError):
        mt_check(v, 2.0)
    with pytest.raises(ValueError):
        mt_check(RadialFn(g, np.zeros(g.N)), 1.0)


def test_sobolev_check(rng):
    g = grid(1, 512)
    v = RadialFn(g, g.nodes - 1.0)
    r = sobolev_check(v, 2)
    assert math.isfinite(r) and r > 0
    assert abs(sobolev_check(v * 2, 2) - r) <= 1e-10 * r
    ratios = []
    for _ in range(100):
        a = rng.uniform(0.05, 3.0, 3)
        w = solve_radial_ma(g, a[0] + a[1] * g.nodes**2 + a[2] * np.exp(-g.nodes))
        ratios.append(sobolev_check(w, 3))
    assert np.all(np.isfinite(ratios)) and max(ratios) < 10
    with pytest.raises(ValueError):
        sobolev_check(v, 1.0)


def test_rigidity_chain_never_satisfied():
    # a nonzero psh v with MA(v) <= ((1 - theta) lambda1 |v|)^n cannot exist; the
    # chain E <= (1-theta)^n lambda1^n I < lambda1^n I <= E fails for solver output
    er = eigen(1, 1024)
    v = er.u1
    theta = 0.2
    ok = np.all(ma_rad(v) <= ((1 - theta) * er.lambda1 * np.abs(v.values)) ** 1 + 1e-12)
    assert not ok


def test_report_json_round_trip():
    er = eigen(1, 256)
    rep = functional_report(er.u1, eigen_nonlinearity(er.lambda1))
    text = rep.to_json()
    assert set(json.loads(text)) == {"E", "I", "J", "rayleigh", "mt_integral"}
    assert FunctionalReport.from_json(text) == rep


def test_nonlinearity_rejects_unknown_class():
    with pytest.raises(ValueError):
        Nonlinearity(lambda s, x: x, lambda s, x: 1.0, growth_class="weird")
