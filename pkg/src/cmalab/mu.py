"""The concave reparametrization mu used by the parabolic flow.

For finite p the function satisfies

* mu(t) = log t for 0 < t <= 1,
* mu(t) = t^(1/p) for t >= e^2,
* mu' > 0 and t^2 mu'' + t mu' <= (t/p) mu'.

It is assembled as mu(t) = tau(log t) with tau(s) = int_0^s e^(x/p) phi(x) dx,
where phi equals e^(-x/p) for x <= 0, equals 1/p for x >= 2, is smooth and
nonincreasing, and has int_0^2 e^(x/p) phi = e^(2/p).  The last condition is
met by bisecting over a one-parameter family phi_k.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError

E2 = math.exp(2.0)
_GX, _GW = np.polynomial.legendre.leggauss(20)


def _h(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = np.exp(-1.0 / x[pos])
    return out


def _dh(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0
    xp = x[pos]
    out[pos] = np.exp(-1.0 / xp) / xp**2
    return out


def smooth_step(x):
    """C-infinity step: 0 for x <= 0, 1 for x >= 1, and S(x) + S(1 - x) = 1."""
    x = np.asarray(x, dtype=float)
    a, b = _h(x), _h(1.0 - x)
    return a / (a + b)


def smooth_step_d(x):
    x = np.asarray(x, dtype=float)
    a, b = _h(x), _h(1.0 - x)
    da, db = _dh(x), _dh(1.0 - x)
    return (da * b + a * db) / (a + b) ** 2


class LogMu:
    """The p = infinity case, mu = log."""

    p = math.inf

    def __call__(self, t):
        return np.log(t)

    def d1(self, t):
        return 1.0 / np.asarray(t, dtype=float)

    def d2(self, t):
        return -1.0 / np.asarray(t, dtype=float) ** 2

    def inverse(self, y):
        return np.exp(y)

    @property
    def thresholds(self):
        return (1.0, math.inf)

    def describe(self) -> dict:
        return {"p": "inf"}


@dataclass
class MuFunction:
    """mu for a finite exponent p > 2 (see module docstring)."""

    p: float
    eps: float
    width: float
    knot: float = float("nan")
    phi_nodes: np.ndarray = field(default=None, repr=False)
    _cum_x: np.ndarray = field(default=None, repr=False)
    _cum_v: np.ndarray = field(default=None, repr=False)

    thresholds = (1.0, E2)

    # phi and its pieces -----------------------------------------------------
    def _g(self, x):
        """g = x for x <= 0, int_0^x (1 - S(y / 2 eps)) dy beyond; g = eps for x >= 2 eps."""
        x = np.asarray(x, dtype=float)
        out = np.where(x <= 0, x, self.eps)
        mid = (x > 0) & (x < 2 * self.eps)
        if np.any(mid):
            xm = x[mid]
            pts = 0.5 * xm[:, None] * (1.0 + _GX[None, :])
            vals = 1.0 - smooth_step(pts / (2 * self.eps))
            out = out.copy()
            out[mid] = 0.5 * xm * (vals @ _GW)
        return out

    def _dg(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x <= 0, 1.0, 1.0 - smooth_step(x / (2 * self.eps)))

    def _blend(self, x, knot):
        return 1.0 - smooth_step((np.asarray(x, dtype=float) - knot) / self.width)

    def phi(self, x, knot=None):
        knot = self.knot if knot is None else knot
        x = np.asarray(x, dtype=float)
        hi = np.exp(-self._g(x) / self.p)
        return 1.0 / self.p + (hi - 1.0 / self.p) * self._blend(x, knot)

    def dphi(self, x, knot=None):
        knot = self.knot if knot is None else knot
        x = np.asarray(x, dtype=float)
        hi = np.exp(-self._g(x) / self.p)
        dhi = -self._dg(x) * hi / self.p
        B = self._blend(x, knot)
        dB = -smooth_step_d((x - knot) / self.width) / self.width
        return dhi * B + (hi - 1.0 / self.p) * dB

    def _breaks(self, knot):
        return np.unique(np.clip([0.0, 2 * self.eps, knot, knot + self.width, 2.0], 0.0, 2.0))

    def _cumulative(self, knot, panels=32):
        """Knots and cumulative integrals of e^(x/p) phi on [0, 2]."""
        br = self._breaks(knot)
        xs = [np.linspace(a, b, panels + 1)[:-1] for a, b in zip(br[:-1], br[1:])]
        xs = np.concatenate(xs + [np.array([2.0])])
        a, b = xs[:-1], xs[1:]
        pts = 0.5 * (a + b)[:, None] + 0.5 * (b - a)[:, None] * _GX[None, :]
        vals = np.exp(pts / self.p) * self.phi(pts, knot)
        inc = 0.5 * (b - a) * (vals @ _GW)
        return xs, np.concatenate([[0.0], np.cumsum(inc)])

    def condition_iv(self, knot=None, panels=32) -> float:
        """int_0^2 e^(x/p) phi(x) dx."""
        knot = self.knot if knot is None else knot
        return float(self._cumulative(knot, panels)[1][-1])

    # tau and mu --------------------------------------------------------------
    def tau(self, s):
        s = np.asarray(s, dtype=float)
        out = np.where(s <= 0, s, np.exp(np.minimum(s, 700.0 * self.p) / self.p))
        # phi = 1/p from knot + width on, so tau = e^(s/p) exactly there
        mid = (s > 0) & (s < min(2.0, self.knot + self.width))
        if np.any(mid):
            sm = s[mid]
            k = np.clip(np.searchsorted(self._cum_x, sm, side="right") - 1, 0, len(self._cum_x) - 2)
            a = self._cum_x[k]
            pts = 0.5 * (a + sm)[:, None] + 0.5 * (sm - a)[:, None] * _GX[None, :]
            vals = np.exp(pts / self.p) * self.phi(pts)
            out = np.array(out, dtype=float)
            out[mid] = self._cum_v[k] + 0.5 * (sm - a) * (vals @ _GW)
        return out

    def dtau(self, s):
        s = np.asarray(s, dtype=float)
        return np.exp(s / self.p) * self.phi(s)

    def d2tau(self, s):
        s = np.asarray(s, dtype=float)
        return np.exp(s / self.p) * (self.phi(s) / self.p + self.dphi(s))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        s = np.log(t)
        out = np.where(t <= 1.0, s, t ** (1.0 / self.p))
        mid = (t > 1.0) & (t < E2)
        if np.any(mid):
            out = np.array(out, dtype=float)
            out[mid] = self.tau(s[mid])
        return out

    def d1(self, t):
        t = np.asarray(t, dtype=float)
        out = np.where(t <= 1.0, 1.0 / t, t ** (1.0 / self.p - 1.0) / self.p)
        mid = (t > 1.0) & (t < E2)
        if np.any(mid):
            out = np.array(out, dtype=float)
            out[mid] = self.dtau(np.log(t[mid])) / t[mid]
        return out

    def d2(self, t):
        t = np.asarray(t, dtype=float)
        q = 1.0 / self.p
        out = np.where(t <= 1.0, -1.0 / t**2, q * (q - 1.0) * t ** (q - 2.0))
        mid = (t > 1.0) & (t < E2)
        if np.any(mid):
            out = np.array(out, dtype=float)
            tm = t[mid]
            sm = np.log(tm)
            out[mid] = (self.d2tau(sm) - self.dtau(sm)) / tm**2
        return out

    def inverse(self, y):
        """mu^{-1}; defined for every real y since mu maps (0, inf) onto R."""
        y = np.asarray(y, dtype=float)
        top = math.exp(2.0 / self.p)
        out = np.where(y <= 0, np.exp(np.minimum(y, 0.0)), np.maximum(y, 0.0) ** self.p)
        mid = (y > 0) & (y < top)
        if np.any(mid):
            ym = y[mid]
            lo, hi = np.zeros_like(ym), np.full_like(ym, 2.0)
            for _ in range(80):
                c = 0.5 * (lo + hi)
                below = self.tau(c) < ym
                lo = np.where(below, c, lo)
                hi = np.where(below, hi, c)
            out = np.array(out, dtype=float)
            out[mid] = np.exp(0.5 * (lo + hi))
        return out

    def describe(self) -> dict:
        return {"p": self.p, "eps": self.eps, "width": self.width, "knot": self.knot}


def default_epsilon(p: float) -> float:
    """Largest eps <= 1e-2 whose plateau loss stays below a quarter of delta."""
    delta = min(0.1, (p - 2.0) / (2.0 * p))
    return min(1e-2, delta / (4.0 * (math.exp(2.0 / p) / p + 1.0)))


def build_mu(p, epsilon: float | None = None, samples: int = 4001, width: float = 0.5,
             tol: float = 1e-14, max_iter: int = 200):
    """Construct mu for exponent ``p`` (``math.inf`` or the string "inf" gives log).

    The knot of phi_k (where phi starts dropping from its plateau to 1/p) is
    bisected on [2 eps, 2 - width] until condition iv holds to ``tol``.  A
    bracket failure means eps is too large for this p.
    """
    if isinstance(p, str):
        if p.strip().lower() not in ("inf", "infinity"):
            raise ValueError(f"bad exponent {p!r}")
        p = math.inf
    if math.isinf(p):
        return LogMu()
    p = float(p)
    if not p > 2:
        raise ValueError(f"mu needs p > 2, got {p}")
    if epsilon is None:
        epsilon = default_epsilon(p)
    # margin from the existence argument: (1 - delta) p > 2
    delta = min(0.1, (p - 2.0) / (2.0 * p))
    mu = MuFunction(p=p, eps=float(epsilon), width=float(width))
    plateau_loss = 2.0 * math.exp(2.0 / p) * (1.0 - math.exp(-epsilon / p)) + 2 * epsilon
    if plateau_loss >= delta:
        raise ConvergenceError(
            f"epsilon={epsilon} too large for p={p}: plateau loss {plateau_loss:.3e} >= delta {delta:.3e}",
            stage="build_mu", info={"delta": delta, "loss": plateau_loss})
    target = math.exp(2.0 / p)
    lo, hi = 2.0 * epsilon, 2.0 - width
    f_lo, f_hi = mu.condition_iv(lo) - target, mu.condition_iv(hi) - target
    if not (f_lo < 0 < f_hi):
        raise ConvergenceError(
            f"bisection bracket failure: integrals {f_lo + target:.12g}, {f_hi + target:.12g} "
            f"do not straddle e^(2/p)={target:.12g}",
            stage="build_mu", info={"I_lo": f_lo + target, "I_hi": f_hi + target})
    best = (math.inf, lo)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f = mu.condition_iv(mid) - target
        best = min(best, (abs(f), mid))
        if abs(f) <= tol or hi - lo < 4e-16:
            break
        if f < 0:
            lo = mid
        else:
            hi = mid
    mid = best[1]
    mu.knot = mid
    mu._cum_x, mu._cum_v = mu._cumulative(mid)
    mu.phi_nodes = mu.phi(np.linspace(0.0, 2.0, samples))
    if abs(mu._cum_v[-1] - target) > 1e-10:
        raise ConvergenceError("condition iv not met after bisection", stage="build_mu",
                               info={"residual": float(mu._cum_v[-1] - target)})
    return mu


# -- certified properties -----------------------------------------------------

def slope_lower(mu, t1: float, t2: float):
    """(lhs, rhs) of (t1 - t2)(mu(t1) - mu(t2)) >= (t1 - t2)(t1^(1/p) - t2^(1/p))."""
    if t1 <= 0 or t2 <= 0:
        raise ValueError("slope inequality needs t1, t2 > 0")
    q = 0.0 if math.isinf(mu.p) else 1.0 / mu.p
    lhs = (t1 - t2) * (float(mu(t1)) - float(mu(t2)))
    rhs = (t1 - t2) * (t1**q - t2**q)
    return lhs, rhs


def concavity_check(n: int, p: float, lam, xi, mu=None) -> float:
    """sum_ij d^2 F / dlam_i dlam_j xi_i xi_j for F(lam) = mu(prod lam)."""
    if p < n:
        raise ValueError(f"concavity needs p >= n, got p={p}, n={n}")
    lam = np.asarray(lam, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if lam.shape[-1] != n or np.any(lam <= 0):
        raise ValueError("lambda must be a positive n-vector")
    mu = build_mu(p) if mu is None else mu
    ma = np.prod(lam, axis=-1)
    m1, m2 = mu.d1(ma), mu.d2(ma)
    r = xi / lam
    return (m2 * ma**2 + m1 * ma) * np.sum(r, axis=-1) ** 2 - m1 * ma * np.sum(r**2, axis=-1)


def _entry(ok, slack, count, **extra):
    d = {"pass": bool(ok), "max_slack": float(slack), "samples": int(count)}
    d.update(extra)
    return d


def certify_mu(mu, samples: int = 100_000, pairs: int = 10_000, forms: int = 1000,
               seed: int = 0) -> dict:
    """Check every structural property of ``mu``; returns a JSON-able report.

    ``max_slack`` is the worst observed value of (violating side - allowed
    side); negative or zero means the property holds with margin.
    """
    rng = np.random.default_rng(seed)
    p = mu.p
    finite = not math.isinf(p)
    q = 1.0 / p if finite else 0.0
    rep = {}

    t_log = np.array([0.5, 1.0])
    err = np.max(np.abs(mu(t_log) - np.log(t_log)))
    rep["log_branch"] = _entry(err <= 1e-10, err - 1e-10, t_log.size)
    if finite:
        t_pow = np.array([E2, 20.0])
        err = np.max(np.abs(mu(t_pow) - t_pow**q))
        rep["power_branch"] = _entry(err <= 1e-10, err - 1e-10, t_pow.size)

    t = np.logspace(-6, 6, samples)
    m1, m2 = mu.d1(t), mu.d2(t)
    rep["mu_prime_positive"] = _entry(np.all(m1 > 0), -float(np.min(m1)), t.size)
    lhs = t**2 * m2 + t * m1
    diff = lhs - (t * q) * m1
    rep["differential_inequality"] = _entry(np.max(diff) <= 1e-8, np.max(diff), t.size)
    # variant with an extra factor t on the right, also asserted
    diff_t = lhs - (t * q) * t * m1
    rep["differential_inequality_t_weighted"] = _entry(np.max(diff_t) <= 1e-8, np.max(diff_t), t.size)
    if finite:
        low = q * t ** (q - 1.0)
        d = np.max(low - m1)
        rep["derivative_lower_bound"] = _entry(d <= 1e-12 * np.max(np.abs(low)), d, t.size)
        from scipy.integrate import quad
        total = 0.0
        br = mu._breaks(mu.knot)
        for a, b in zip(br[:-1], br[1:]):
            total += quad(lambda x: math.exp(x / p) * float(mu.phi(x)), a, b,
                          epsabs=1e-13, epsrel=1e-13, limit=200)[0]
        err = abs(total - math.exp(2.0 / p))
        rep["condition_iv"] = _entry(err <= 1e-10, err - 1e-10, 1, integral=total)

    t1 = np.exp(rng.uniform(-8, 8, pairs))
    t2 = np.exp(rng.uniform(-8, 8, pairs))
    lhs = (t1 - t2) * (mu(t1) - mu(t2))
    rhs = (t1 - t2) * (t1**q - t2**q)
    slack = float(np.max(rhs - lhs))
    rep["slope_inequality"] = _entry(slack <= 1e-10, slack, pairs)

    worst = -math.inf
    count = 0
    pp = p if finite else math.inf
    for n in (1, 2, 3):
        if finite and pp < n:
            continue
        lam = np.exp(rng.uniform(-3, 3, (forms, n)))
        xi = rng.normal(size=(forms, n))
        val = concavity_check(n, pp, lam, xi, mu=mu)
        scale = np.maximum(1.0, mu.d1(np.prod(lam, axis=1)) * np.prod(lam, axis=1)
                           * np.sum((xi / lam) ** 2, axis=1))
        worst = max(worst, float(np.max(val / scale)))
        count += forms
    rep["concavity"] = _entry(worst <= 1e-8, worst, count)

    jumps = []
    for t0 in mu.thresholds:
        if math.isinf(t0):
            continue
        h = 1e-7 * t0
        jumps.append(abs(float(mu(t0 + h) - mu(t0 - h))) - 2 * h * float(mu.d1(t0)))
        jumps.append(abs(float(mu.d1(t0 + h) - mu.d1(t0 - h))))
    j = max(abs(x) for x in jumps)
    rep["branch_agreement"] = _entry(j <= 1e-6, j - 1e-6, len(jumps))

    rep["all_pass"] = all(v["pass"] for v in rep.values() if isinstance(v, dict))
    return rep


def certificate_json(rep: dict) -> str:
    return json.dumps(rep, indent=2, sort_keys=True)
