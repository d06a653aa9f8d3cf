import math

import numpy as np
import pytest
from scipy.integrate import quad

from cmalab import drivers
from cmalab.drivers import (cutoff, energy_control_probe, eta_cutoff, make_sublinear_test,
                            make_superlinear_test, perturb, run_sublinear, run_superlinear,
                            seed_path, truncate_sublinear, truncate_superlinear)
from cmalab.functionals import big_psi, ma_density
from cmalab.radial import RadialFn

from conftest import eigen, grid, shooting_solution

LAM = 1.4457964907


def test_sublinear_examples():
    nl = make_sublinear_test(LAM)
    assert float(nl(0.3, -1.0)) == pytest.approx(LAM, rel=1e-15)
    assert float(nl(0.3, -1e-9)) / 1e-9 == pytest.approx(2 * LAM, rel=1e-8)
    x = -np.logspace(-8, 8, 200)
    assert np.all(nl(0.5, x) > 0)
    gp = nl.growth_params
    assert gp["limit_small_ok"] and gp["limit_large_ok"]
    assert gp["ratio_small"] >= 1.9 * LAM and gp["ratio_large"] <= 1e-5 * LAM
    with pytest.raises(ValueError):
        make_sublinear_test(0.0)


def test_sublinear_properness_constant():
    nl = make_sublinear_test(LAM)
    K, theta = nl.growth_params["K"], nl.growth_params["theta"]
    x = -np.logspace(-5, 5, 3001)
    assert np.all(nl.pow_n(0.5, x, 1) <= K + (1 - theta) * LAM * np.abs(x) + 1e-12)


def test_superlinear_examples():
    nl = make_superlinear_test(LAM)
    assert float(nl(0.5, -1e-9)) / 1e-9 == pytest.approx(LAM / 2, rel=1e-8)
    gp = nl.growth_params
    assert gp["theta"] == 0.25 and gp["sigma"] == 1.0
    assert np.all(np.diff(gp["gronwall_ratios"]) > 0) and gp["gronwall_ratios"][-1] > LAM
    assert gp["p_growth"] == 3 and not gp["truncate"]
    x = np.array([10.0, 100.0, 1000.0])
    assert np.all(np.diff(np.log(nl(0.5, -x)) - x**2) < 0)


def test_superlinear_integrated_condition_closed_form():
    # int_x^0 psi = (lam/2)(x^2/2 + |x|^3/3) <= (1 - theta)/2 |x| psi(x) for |x| >= 6, theta = 1/4
    theta = 0.25
    for r in np.linspace(6.0, 200.0, 400):
        lhs = quad(lambda t: 0.5 * LAM * (t + t * t), 0.0, r)[0]
        assert lhs == pytest.approx(0.5 * LAM * (r * r / 2 + r**3 / 3), rel=1e-12)
        assert lhs <= (1 - theta) / 2 * r * 0.5 * LAM * (r + r * r)
    nl = make_superlinear_test(LAM)
    assert nl.growth_params["M_emp"] <= 6.0 * 1.01


def test_superlinear_validator_rejects_wrong_nonlinearity():
    with pytest.raises(ValueError):
        drivers.validate_superlinear(make_sublinear_test(LAM, validate=False), LAM, 1)
    with pytest.raises(ValueError):
        drivers.validate_sublinear(make_superlinear_test(LAM, validate=False), LAM, 1)


@pytest.mark.parametrize("n", [1, 2])
def test_antiderivatives_match_quadrature(n):
    for nl in (make_sublinear_test(LAM, n, validate=False), make_superlinear_test(LAM, n, validate=False)):
        if nl.antiderivative is None:
            continue
        x = -np.logspace(-3, 1.5, 40)
        ref = [quad(lambda t: float(nl.pow_n(0.5, -t, n)), 0.0, -xx, epsabs=0, epsrel=1e-13)[0] for xx in x]
        assert np.max(np.abs(big_psi(nl, 0.5, x, n) - ref) / np.array(ref)) <= 1e-10


def test_truncate_sublinear():
    nl = make_sublinear_test(LAM)
    m = 8.0
    tr = truncate_sublinear(nl, m)
    x = -np.linspace(0, m, 200)
    assert np.array_equal(tr(0.5, x), nl(0.5, x))
    far = tr(0.5, -np.array([2 * m, 3 * m, 100 * m]))
    assert np.ptp(far) == 0.0
    # its antiderivative is the integral of psi_m
    xs = -np.array([1.0, m, 1.5 * m, 2 * m, 5 * m])
    ref = [quad(lambda t: float(tr(0.5, -t)), 0.0, -xx, limit=200, epsabs=1e-12)[0] for xx in xs]
    assert np.max(np.abs(big_psi(tr, 0.5, xs, 1) - ref)) <= 1e-8


def test_truncate_superlinear():
    nl = make_superlinear_test(LAM)
    m, p, n = 8.0, 6, 1
    tr, prm = truncate_superlinear(nl, m, p, n)
    x = -np.linspace(0, m, 200)
    assert np.max(np.abs(tr(0.5, x) - nl(0.5, x))) <= 1e-12 * np.max(nl(0.5, x))
    assert prm.B == pytest.approx(0.5 * LAM * (m + m * m))
    assert prm.delta_m == pytest.approx(1 / (prm.B + 1))
    assert prm.K_m == pytest.approx((prm.B + 1) * m ** (1 - p))
    r = np.array([m + prm.delta_m, 20.0, 100.0])
    assert np.allclose(tr.pow_n(0.5, -r, n), prm.K_m * r ** (p - 1), rtol=1e-12)
    # derivative against finite differences across the blend
    xx = -np.linspace(m - 0.1, m + prm.delta_m + 0.1, 50)
    h = 1e-6
    fd = (tr(0.5, xx + h) - tr(0.5, xx - h)) / (2 * h)
    assert np.max(np.abs(fd - tr.eval_dx(0.5, xx))) <= 1e-4 * np.max(np.abs(fd))


def test_cutoff_floor_and_eta():
    nl = make_superlinear_test(LAM)
    d = 0.1
    cu = cutoff(nl, d, 1)
    s = np.linspace(0, 1, 101)
    x = -np.linspace(0, 5, 101)
    S, X = np.meshgrid(s, x)
    assert np.all(cu.pow_n(S, X, 1) >= d * d - 1e-15)
    eta = eta_cutoff(d)
    dist = 1 - np.sqrt(s)
    assert np.all(eta(s)[dist <= d] == 0.0) and np.all(eta(s)[dist >= 2 * d] == 1.0)
    assert cutoff(nl, 0.0, 1) is nl
    with pytest.raises(ValueError):
        cutoff(nl, -1.0, 1)


def test_perturb():
    nl = make_sublinear_test(LAM)
    pe = perturb(nl, 0.01, 1)
    x = -np.linspace(0, 3, 50)
    assert np.allclose(pe.pow_n(0.5, x, 1), nl.pow_n(0.5, x, 1) + 0.01, rtol=0, atol=1e-15)
    assert np.allclose(big_psi(pe, 0.5, x, 1), big_psi(nl, 0.5, x, 1) + 0.01 * np.abs(x), atol=1e-14)
    assert perturb(nl, 0.0, 1) is nl
    with pytest.raises(ValueError):
        perturb(nl, -1e-3, 1)


@pytest.mark.parametrize("kind", ["flux", "bent"])
def test_seed_path_keeps_density_positive(kind):
    er = eigen(1, 256)
    g = er.u1.grid
    v1 = er.u1 * 4.0 + RadialFn(g, 1e-3 * (g.nodes - 1))
    v0 = v1 * 0.01
    pts = seed_path(v0, v1, 9, kind)
    assert pts[0] is v0 and pts[-1] is v1 and len(pts) == 9
    for v in pts:
        assert np.all(ma_density(g, v.values) > 0)
    with pytest.raises(ValueError):
        seed_path(v0, v1, 5, "zigzag")


def test_energy_control_probe():
    g = grid(1, 256)
    one = drivers.Nonlinearity(lambda s, x: 1.0 + 0 * np.asarray(x, float), lambda s, x: 0 * np.asarray(x, float))
    steady = energy_control_probe(RadialFn(g, g.nodes - 1.0), one, 3, 1e-3)
    assert steady["dissipation"] <= 1e-20 and steady["termwise_ok"] and steady["good"]
    er = eigen(1, 256)
    nl = make_superlinear_test(er.lambda1)
    pert = energy_control_probe(er.u1 * 1.3, nl, 3, 1e-3)
    assert pert["dissipation"] > 0 and pert["finite"] and pert["termwise_ok"]
    assert 0 < pert["ratio"] < math.inf


def test_residual_helper():
    g = grid(1, 128)
    v = RadialFn(g, g.nodes - 1.0)
    one = drivers.Nonlinearity(lambda s, x: 1.0 + 0 * np.asarray(x, float), lambda s, x: 0 * np.asarray(x, float))
    assert drivers.residual(v, one) <= 1e-10


def test_sublinear_matches_shooting_oracle():
    er = eigen(1, 256)
    g = er.u1.grid
    nl = make_sublinear_test(er.lambda1)
    rep = run_sublinear(nl, g, u1=er.u1, panel_size=20)
    psi = lambda x: float(nl(0.5, x))
    ref, a = shooting_solution(psi, (-3.0, -0.5), g.nodes)
    assert np.max(np.abs(rep.u.values - ref)) <= 10 * g.h_max**2
    assert rep.J < 0 and rep.checks["minimizes_panel"] and rep.checks["nonzero"]
    assert rep.checks["J_violation_max"] <= 1e-9 and rep.checks["dissipation_min"] >= 0
    assert rep.checks["properness_min_slack"] >= 0
    assert rep.checks["truncation_inactive"]
    assert [tr["eps"] for tr in rep.cascade][-1] == 0.0


def test_superlinear_matches_shooting_oracle():
    er = eigen(1, 256)
    g = er.u1.grid
    nl = make_superlinear_test(er.lambda1)
    rep = run_superlinear(nl, g, u1=er.u1)
    psi = lambda x: float(nl(0.5, x))
    ref, a = shooting_solution(psi, (-3.0, -0.5), g.nodes)
    assert np.max(np.abs(rep.u.values - ref)) <= 10 * g.h_max**2
    assert rep.c > 0 and rep.checks["c_above_lower_bound"]
    assert rep.checks["endpoint_v1_ok"] and rep.checks["endpoint_v0_ok"]
    assert rep.checks["truncation_inactive"] and rep.checks["T0_complement_finite"]
    assert rep.checks["ma_min_positive"] and rep.checks["u_le_0"] and rep.checks["boundary_pinned"]


def test_below_eigenvalue_minimizer_collapses():
    # psi = lam1 |x| / 2 stays below lam1 |x|, so only u = 0 solves the limit problem;
    # the perturbed minimizers shrink linearly with eps
    er = eigen(1, 256)
    lam = er.lambda1
    half = drivers.Nonlinearity(lambda s, x: 0.5 * lam * np.abs(x) + 0 * np.asarray(s, float),
                                lambda s, x: -0.5 * lam + 0 * np.asarray(x, float) * np.asarray(s, float),
                                "sublinear", growth_params={"lambda1": lam, "n": 1, "theta": 0.5, "K": 0.0})
    rep = run_sublinear(half, er.u1.grid, u1=er.u1, panel_size=5,
                        cascade={"m": (8.0,), "eps": (1e-2, 1e-4, 1e-6)})
    sizes = np.array([tr["sup_norm"] for tr in rep.cascade])
    ratio = sizes / np.array([1e-2, 1e-4, 1e-6])
    assert np.ptp(ratio) <= 1e-6 * ratio[0]
    assert sizes[-1] <= 1e-5 and all(tr["J"] >= 0 for tr in rep.cascade)
