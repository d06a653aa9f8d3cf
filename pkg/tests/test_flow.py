import csv
import math

import numpy as np
import pytest

from cmalab import flow
from cmalab.drivers import make_sublinear_test, perturb
from cmalab.functionals import eigen_nonlinearity, ma_rad
from cmalab.mu import LogMu, build_mu
from cmalab.radial import RadialFn
from cmalab.solvers import solve_radial_ma

from conftest import eigen, grid

LOG = LogMu()


def zero_forcing():
    z = lambda s, t, x: np.zeros(np.broadcast(np.asarray(s), np.asarray(x)).shape)
    return flow.Forcing(eval=z, dx=z, K1=0.0, K2=0.0, K3=0.0, name="zero")


def growth_forcing(k):
    return flow.Forcing(eval=lambda s, t, x: k * np.abs(x) + 0 * np.asarray(s, float),
                        dx=lambda s, t, x: k * np.sign(x) + 0 * np.asarray(s, float),
                        K1=0.0, K2=k, K3=k, name="growth")


def linear_forcing(c):
    # f = c x: Lipschitz with K = |c|, f(1, 0, 0) = 0 = log 1
    return flow.Forcing(eval=lambda s, t, x: c * np.asarray(x, float) + 0 * np.asarray(s, float),
                        dx=lambda s, t, x: c + 0 * np.asarray(x, float) * np.asarray(s, float),
                        K1=0.0, K2=abs(c), K3=abs(c), name="linear")


def eigen_setup(n=1, N=512, mu=LOG, **kw):
    er = eigen(n, N)
    f = flow.mu_forcing(eigen_nonlinearity(er.lambda1, n), mu, n)
    return er, flow.FlowConfig(mu=mu, f=f, **kw)


def sublinear_setup(N, eps=0.01, t_end=1.0):
    er = eigen(1, N)
    nl = perturb(make_sublinear_test(er.lambda1), eps, 1)
    f = flow.mu_forcing(nl, LOG, 1)
    v0 = flow.prepare_initial(er.u1, f, LOG)
    return flow.FlowConfig(mu=LOG, f=f, t_end=t_end), v0


def test_config_validation():
    f = zero_forcing()
    with pytest.raises(ValueError):
        flow.FlowConfig(mu=LOG, f=f, dt_init=1.0, dt_max=0.1)
    with pytest.raises(ValueError):
        flow.FlowConfig(mu=LOG, f=f, psh_floor=0.0)
    with pytest.raises(ValueError):
        flow.FlowConfig(mu=LOG, f=f, cfl_safety=1.5)
    with pytest.raises(ValueError):
        flow.FlowConfig(mu=LOG, f=f, scheme="rk4")
    assert flow.FlowConfig(mu=build_mu(4), f=f).p == 4


def test_prepare_initial_constant_case():
    g = grid(1, 256)
    v = RadialFn(g, g.nodes - 1.0)
    out = flow.prepare_initial(v, zero_forcing(), LOG)
    assert np.max(np.abs(out.values - v.values)) <= 1e-12
    with pytest.raises(ValueError):
        flow.prepare_initial(RadialFn(g, g.nodes), zero_forcing(), LOG)


@pytest.mark.parametrize("N", [256, 1024])
def test_prepare_initial_sublinear_compatible(N):
    cfg, v0 = sublinear_setup(N)
    assert flow.compatibility_residual(v0, cfg.f, LOG) <= 1e-8
    # density untouched away from the blend band
    er = eigen(1, N)
    s = v0.grid.nodes
    inner = (s > 0.05) & (s < 0.85)
    # the band density is resampled, so agreement is to discretization error
    assert np.max(np.abs(ma_rad(v0)[inner] - ma_rad(er.u1)[inner])) <= 2 * v0.grid.h_max**2


def test_prepare_initial_reports_infinite_target():
    er = eigen(1, 256)
    f = flow.mu_forcing(make_sublinear_test(er.lambda1), LOG, 1)
    with pytest.raises(ValueError):
        flow.prepare_initial(er.u1, f, LOG)


@pytest.mark.parametrize("scheme", ["linearly_implicit", "explicit"])
def test_zero_forcing_is_stationary(scheme):
    g = grid(1, 64)
    v0 = RadialFn(g, g.nodes - 1.0)
    cfg = flow.FlowConfig(mu=LOG, f=zero_forcing(), scheme=scheme, dt_init=1e-5, dt_max=1e-3)
    st = flow.initial_state(v0, cfg)
    for _ in range(5):
        st = flow.step(st, cfg)
    assert np.max(np.abs(st.v.values - v0.values)) <= 1e-12
    assert len(st.history) == 6


def test_eigen_stationary_to_t10():
    er, cfg = eigen_setup(N=512, t_end=10.0, dt_max=0.5)
    st = flow.run_batch(cfg, [er.u1], stop_when_steady=False)[0]
    assert st.t == pytest.approx(10.0)
    assert max(abs(d["u_min"] + 1.0) for d in st.history) <= 1e-4
    assert np.max(np.abs(st.v.values - er.u1.values)) <= 1e-4


def test_one_step_reduces_residual():
    er, cfg = eigen_setup(N=512)
    g = er.u1.grid
    # perturb the density, not the values, so the boundary behaviour is kept
    v = solve_radial_ma(g, ma_rad(er.u1) * (1 + 0.05 * np.sin(np.pi * g.nodes)))
    st0 = flow.initial_state(v, cfg)
    st1 = flow.step(st0, cfg)

    def r2(u):
        _, R = flow.flow_rhs(g, u.values, 0.0, cfg)
        return math.sqrt(g.integrate(np.concatenate([R[:-1] ** 2, [0.0]])))

    assert r2(st1.v) < r2(st0.v)


@pytest.mark.parametrize("mu", [LOG, build_mu(4)], ids=["log", "p4"])
@pytest.mark.parametrize("k", [0.5, 2.0])
def test_uniform_bound_and_sign(mu, k):
    # f = k |x|: K1 = 0, K2 = k; data with density >= 1 so mu(MA) >= 0
    g = grid(1, 256)
    f = growth_forcing(k)
    v0 = flow.prepare_initial(RadialFn(g, 3 * (g.nodes - 1) + g.nodes**2 - 1), f, mu)
    cfg = flow.FlowConfig(mu=mu, f=f, t_end=2.0, dt_max=0.1, err_tol=1e-3)
    st = flow.run_batch(cfg, [v0], stop_when_steady=False)[0]
    h = st.history
    assert all(d["u_max"] <= 0 for d in h)
    assert all(d["u_bdry"] == 0.0 for d in h)
    assert all(d["ma_min"] > 0 for d in h)
    assert flow.uniform_bound_violation(h, v0.sup_norm(), f.K1, f.K2, g.h_max) <= 0


def test_uniform_bound_fails_when_log_density_negative():
    # MA(u0) = 0.5 + s at the center gives u_t(0) = log 0.5 - k |u0(0)|, steeper
    # than the barrier slope -k |u0|; the bound is not implied by |f| <= K1 + K2|x|
    g = grid(1, 256)
    k = 0.5
    f = growth_forcing(k)
    v0 = flow.prepare_initial(RadialFn(g, 0.5 * (g.nodes - 1) + 0.25 * (g.nodes**2 - 1)), f, LOG)
    cfg = flow.FlowConfig(mu=LOG, f=f, t_end=1.0, dt_max=0.05, err_tol=1e-4)
    st = flow.run_batch(cfg, [v0], stop_when_steady=False)[0]
    assert flow.uniform_bound_violation(st.history, v0.sup_norm(), 0.0, k, g.h_max) > 0.05


def test_error_control_tracks_exponential_growth():
    # density >= 1 gives u >= u0 e^(kt) exactly; plain Euler overshoots the growth
    g = grid(1, 128)
    f = growth_forcing(2.0)
    v0 = flow.prepare_initial(RadialFn(g, 3 * (g.nodes - 1) + g.nodes**2 - 1), f, LOG)
    loose = flow.FlowConfig(mu=LOG, f=f, t_end=3.0, dt_max=0.1)
    tight = flow.FlowConfig(mu=LOG, f=f, t_end=3.0, dt_max=0.1, err_tol=1e-3)
    a = flow.run_batch(loose, [v0], stop_when_steady=False)[0].history
    b = flow.run_batch(tight, [v0], stop_when_steady=False)[0].history
    bound = lambda hist: flow.uniform_bound_violation(hist, v0.sup_norm(), 0.0, 2.0, g.h_max)
    assert bound(a) > 0 >= bound(b)
    assert len(b) > len(a)


def test_J_nonincreasing_and_dissipation_sign():
    cfg, v0 = sublinear_setup(512, t_end=2.0)
    st = flow.run_batch(cfg, [v0], stop_when_steady=False)[0]
    J = np.array([d["J"] for d in st.history])
    assert np.all(np.diff(J) <= 1e-9)
    assert min(d["dissipation_min"] for d in st.history) >= 0.0
    assert J[-1] < J[0]


def test_stability_equal_data():
    er, cfg = eigen_setup(N=256)
    rep = flow.stability_pair(cfg, er.u1, er.u1, 0.5)
    assert rep.sup_diff == 0.0 and rep.holds


def test_stability_eigen_perturbation():
    er, cfg = eigen_setup(N=1024)
    g = er.u1.grid
    vb = er.u1 + RadialFn(g, 1e-3 * (g.nodes - 1.0))
    rep = flow.stability_pair(cfg, er.u1, vb, 1.0)
    assert rep.holds and rep.slack >= 0
    # f_x = n / x is unbounded near u = 0, so the bound is vacuous here; the
    # difference still stays within a few percent of the initial one
    assert rep.K > 1e6 and math.isfinite(rep.K_visited)
    assert rep.sup_diff <= 1.2 * rep.initial_diff
    assert rep.steps > 0 and len(rep.diffs) == rep.steps + 1


def test_stability_u_independent_forcing():
    g = grid(1, 256)
    f = flow.Forcing(eval=lambda s, t, x: 0.3 * np.asarray(s, float) * (1 - np.asarray(s, float)) + 0 * np.asarray(x, float),
                     dx=lambda s, t, x: 0 * np.asarray(x, float) * np.asarray(s, float), name="u-free")
    f.K1, f.K2, f.K3 = flow.estimate_bounds(f, 10.0)
    cfg = flow.FlowConfig(mu=LOG, f=f)
    va = flow.prepare_initial(RadialFn(g, g.nodes - 1.0), f, LOG)
    vb = flow.prepare_initial(RadialFn(g, 1.2 * (g.nodes**2 - 1.0)), f, LOG)
    rep = flow.stability_pair(cfg, va, vb, 1.0)
    assert rep.K == 0.0
    assert rep.sup_diff <= rep.initial_diff + 100 * g.h_max**2


def test_stability_smooth_forcing():
    g = grid(1, 256)
    f = linear_forcing(0.5)
    cfg = flow.FlowConfig(mu=LOG, f=f)
    va = flow.prepare_initial(RadialFn(g, g.nodes**2 - 1.0), f, LOG)
    vb = flow.prepare_initial(RadialFn(g, 0.9 * (g.nodes**2 - 1.0)), f, LOG)
    rep = flow.stability_pair(cfg, va, vb, 1.0)
    assert rep.K == pytest.approx(0.5)
    assert rep.holds


def test_monitors_steady_eigen():
    er, cfg = eigen_setup(N=512, t_end=50.0, steady_tol=1e-7)
    steady = flow.run(cfg, er.u1)
    assert flow.is_steady(steady, cfg)
    rerun = flow.run_batch(cfg, [steady.v], t_end=1.0, stop_when_steady=False)[0]
    mon = flow.monitors(rerun.history, cfg.p)
    assert mon.max_ut_over_M <= cfg.steady_tol
    assert mon.finite and mon.min_ma_positive


def test_monitors_refinement():
    out = []
    for N in (256, 512):
        cfg, v0 = sublinear_setup(N, t_end=1.0)
        st = flow.run_batch(cfg, [v0], stop_when_steady=False)[0]
        out.append(flow.monitors(st.history, cfg.p))
    a, b = out[0].max_ut_over_M, out[1].max_ut_over_M
    assert 0.5 <= a / b <= 2.0
    assert all(m.finite and m.min_ma_positive for m in out)


def test_monitors_power_branch():
    er, cfg = eigen_setup(N=1024, mu=build_mu(4), t_end=0.5)
    st = flow.run_batch(cfg, [er.u1], stop_when_steady=False)[0]
    mon = flow.monitors(st.history, 4)
    assert mon.finite and mon.min_ma_positive
    assert np.max(np.abs(st.v.values - er.u1.values)) <= 1e-4


def test_step_underflow_raises():
    g = grid(1, 64)
    v0 = RadialFn(g, g.nodes - 1.0)
    cfg = flow.FlowConfig(mu=LOG, f=linear_forcing(1e8), dt_init=1.0, dt_max=1.0, cfl_safety=1e-9)
    with pytest.raises(flow.ConvergenceError) as exc:
        flow.step(flow.initial_state(v0, cfg), cfg)
    assert exc.value.stage == "flow_step"
    assert "diagnostics" in exc.value.info


def test_write_trajectory(tmp_path):
    er, cfg = eigen_setup(N=128, t_end=0.1)
    st = flow.run_batch(cfg, [er.u1], stop_when_steady=False)[0]
    path = tmp_path / "trajectory.csv"
    flow.write_trajectory(path, st.history, ["n = 1"])
    lines = path.read_text().splitlines()
    assert lines[0] == "# n = 1"
    rows = list(csv.reader(lines[1:]))
    assert tuple(rows[0]) == flow.TRAJ_COLUMNS
    assert len(rows) - 1 == len(st.history)
    assert float(rows[-1][0]) == pytest.approx(0.1)
