"""Empirical certification of displacement monotonicity.

The running cost is required to be jointly monotone along couplings: for
square-integrable (X, Xbar, alpha, alphabar),

    E[(D_aL(X, alpha, mu) - D_aL(Xbar, alphabar, mubar)) . (alpha - alphabar)
      + (D_xL(X, alpha, mu) - D_xL(Xbar, alphabar, mubar)) . (X - Xbar)]
        >= C_La E|alpha - alphabar|^2 - C_Lx E|X - Xbar|^2,

with mu, mubar the joint laws of (X, alpha) and (Xbar, alphabar), plus the
analogous one-sided bound -C_G for the terminal cost.  The combination
C_disp = C_La - T C_G - (T^2/2) C_Lx decides whether the equilibrium maps
are contractions on the horizon T.

The condition quantifies over all couplings, so it cannot be verified, only
falsified: estimate_constants runs an adversarial random search over finite
clouds (sizes 2 to 64, scales 0.1 to 10, plus structured displacement
patterns that are exact minimisers for the quadratic catalog) and reports
the sharpest constants consistent with every sample.  check_finite_n plays
the same game for N-player profiles, where each player reads the
leave-one-out empirical measure and the inequality only holds up to a 1/N
defect.
"""

import json
from dataclasses import dataclass, field

import numpy as np

_SIZES = (2, 4, 8, 16, 32, 64)


def _wave_z(terms_pack, X, A, mx, ma):
    # phase + u_x.x + u_a.a + w_x.<x> + w_a.<a>, vectorized over the cloud
    gf, amp, ph, ux, ua, wx, wa = terms_pack
    z = np.broadcast_to(ph, (X.shape[0], ph.shape[0])).copy()
    z += X @ ux.T + A @ ua.T
    z += np.atleast_2d(mx) @ wx.T + np.atleast_2d(ma) @ wa.T
    return z


def _g_d1(gf, z):
    out = np.empty_like(z)
    sin = gf == 0
    out[:, sin] = np.cos(z[:, sin])
    th = np.tanh(z[:, ~sin])
    out[:, ~sin] = 1.0 - th * th
    return out


def grads_l_cloud(model, X, A, mx, ma):
    """(D_xL, D_aL) at every row of the cloud, measure means given.

    mx, ma may be single points or per-row (n, d) arrays, which is how the
    finite-N leave-one-out evaluation feeds them in.
    """
    ka, caa, kx, cxx, gf, amp, ph, ux, ua, wx, wa = model.lpack
    dx = kx * X + cxx * np.atleast_2d(mx)
    da = ka * A + caa * np.atleast_2d(ma)
    if gf.shape[0]:
        z = _wave_z((gf, amp, ph, ux, ua, wx, wa), X, A, mx, ma)
        gp = amp * _g_d1(gf, z)
        dx = dx + gp @ ux
        da = da + gp @ ua
    return dx, da


def grad_g_cloud(model, X, mx):
    """D_xG at every row; mx a point or per-row array."""
    kg, cg, gf, amp, ph, ux, wx = model.gpack
    dx = kg * X + cg * np.atleast_2d(mx)
    if gf.shape[0]:
        z = np.broadcast_to(ph, (X.shape[0], ph.shape[0])).copy()
        z += X @ ux.T + np.atleast_2d(mx) @ wx.T
        gp = amp * _g_d1(gf, z)
        dx = dx + gp @ ux
    return dx


def _pairing_l(model, X, Xb, A, Ab):
    """Left side, E|da|^2 and E|dx|^2 of the running-cost inequality."""
    dxl, dal = grads_l_cloud(model, X, A, X.mean(0), A.mean(0))
    dxlb, dalb = grads_l_cloud(model, Xb, Ab, Xb.mean(0), Ab.mean(0))
    dx = X - Xb
    da = A - Ab
    lhs = float(np.mean(np.sum((dal - dalb) * da + (dxl - dxlb) * dx, axis=1)))
    return lhs, float(np.mean(np.sum(da * da, axis=1))), float(np.mean(np.sum(dx * dx, axis=1)))


def _pairing_g(model, X, Xb):
    gx = grad_g_cloud(model, X, X.mean(0))
    gxb = grad_g_cloud(model, Xb, Xb.mean(0))
    dx = X - Xb
    return float(np.mean(np.sum((gx - gxb) * dx, axis=1))), float(np.mean(np.sum(dx * dx, axis=1)))


@dataclass
class MonotonicityReport:
    """Sharpest constants consistent with every sampled coupling."""

    c_la: float
    c_lx: float
    c_g: float
    c_disp: float
    horizon: float
    trials: int
    witness: dict = field(default_factory=dict)

    def recompute_disp(self):
        return self.c_la - self.horizon * self.c_g - 0.5 * self.horizon**2 * self.c_lx

    @property
    def passed(self):
        return self.c_la > 0.0 and self.c_disp > 0.0

    def as_dict(self):
        return {
            "c_la": self.c_la,
            "c_lx": self.c_lx,
            "c_g": self.c_g,
            "c_disp": self.c_disp,
            "horizon": self.horizon,
            "trials": self.trials,
            "witness": self.witness,
        }

    def to_json(self):
        return json.dumps(self.as_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def _displacements(rng, n, d, mode):
    # structured patterns sharpen the search: mean-zero displacements kill
    # the nonnegative mean-coupling contribution and expose the raw kappa
    raw = rng.standard_normal((n, d))
    if mode == 1:
        raw = raw - raw.mean(axis=0)
    elif mode == 2:
        v = rng.standard_normal(d)
        signs = np.where(rng.random(n) < 0.5, 1.0, -1.0)
        raw = np.outer(signs - signs.mean(), v)
    return raw


def estimate_constants(model, sampler, trials, seed=0):
    """Adversarial search for the displacement-monotonicity constants.

    sampler(rng, n) draws an (n, d) base cloud.  Returns the largest C_La
    (over couplings with identical state marginals, where it is unambiguous)
    and the smallest C_Lx and C_G consistent with all samples; the trial
    count and the worst witnessing coupling are kept in the report.
    """
    assert trials >= 100, "need at least 100 trials for a meaningful search"
    rng = np.random.default_rng(seed)
    d = model.dim
    T = model.horizon

    c_la = np.inf
    c_g = 0.0
    witness = {}
    rows = []
    for t in range(trials):
        n = _SIZES[rng.integers(len(_SIZES))]
        sx = 10.0 ** rng.uniform(-1.0, 1.0)
        sa = 10.0 ** rng.uniform(-1.0, 1.0)
        X = np.asarray(sampler(rng, n), dtype=float).reshape(n, d)
        A = sa * rng.standard_normal((n, d))
        a_mode = int(rng.integers(3))
        Ab = A - sa * _displacements(rng, n, d, a_mode)
        x_mode = int(rng.integers(3))
        if x_mode == 1:
            Xb = X
        else:
            Xb = X - sx * _displacements(rng, n, d, x_mode)

        lhs, a2, x2 = _pairing_l(model, X, Xb, A, Ab)
        if a2 == 0.0 and x2 == 0.0:
            continue
        rows.append((lhs, a2, x2))
        if x2 == 0.0 and a2 > 0.0:
            ratio = lhs / a2
            if ratio < c_la:
                c_la = ratio
                witness = {
                    "ratio": ratio,
                    "x": X.tolist(),
                    "a": A.tolist(),
                    "a_bar": Ab.tolist(),
                }
        glhs, gx2 = _pairing_g(model, X, Xb)
        if gx2 > 0.0:
            c_g = max(c_g, -glhs / gx2)

    assert np.isfinite(c_la), "search produced no pure-control couplings"
    c_lx = 0.0
    for lhs, a2, x2 in rows:
        if x2 > 0.0:
            c_lx = max(c_lx, (c_la * a2 - lhs) / x2)
    c_disp = c_la - T * c_g - 0.5 * T * T * c_lx
    return MonotonicityReport(
        c_la=c_la,
        c_lx=c_lx,
        c_g=c_g,
        c_disp=c_disp,
        horizon=T,
        trials=trials,
        witness=witness,
    )


def _loo_means(V):
    n = V.shape[0]
    return (V.sum(axis=0) - V) / (n - 1)


def finite_n_margin_at(model, x, xb, a, ab, c_la, c_lx):
    """Per-player margin of the leave-one-out inequality at one profile.

    Positive means the finite-N analogue holds at this profile with the
    mean-field constants; the defect is at worst O(1/N).  Degenerate
    (identical) profiles have margin zero by convention.
    """
    x = np.asarray(x, dtype=float)
    xb = np.asarray(xb, dtype=float)
    a = np.asarray(a, dtype=float)
    ab = np.asarray(ab, dtype=float)
    n = x.shape[0]
    assert n >= 2, "profiles need at least two players"
    dx = x - xb
    da = a - ab
    ms = float(np.mean(np.sum(dx * dx, axis=1) + np.sum(da * da, axis=1)))
    if ms == 0.0:
        return 0.0
    s = 1.0 / np.sqrt(ms)
    dx = dx * s
    da = da * s
    xb = x - dx
    ab = a - da

    dxl, dal = grads_l_cloud(model, x, a, _loo_means(x), _loo_means(a))
    dxlb, dalb = grads_l_cloud(model, xb, ab, _loo_means(xb), _loo_means(ab))
    lhs = float(np.sum((dal - dalb) * da + (dxl - dxlb) * dx))
    a2 = float(np.sum(da * da))
    x2 = float(np.sum(dx * dx))
    return (lhs - c_la * a2 + c_lx * x2) / n


def check_finite_n(model, n_players, trials, report=None, sampler=None, seed=0):
    """Minimum leave-one-out margin over adversarial N-player profiles.

    Expected behaviour under quadratic-catalog monotone data: bounded below
    by -C/N.  The mean-field constants come from report, or are estimated
    on the spot with the given (or a default unit-box) sampler.
    """
    assert n_players >= 2, "need at least two players"
    rng = np.random.default_rng(seed)
    d = model.dim
    if sampler is None:
        sampler = lambda r, n: r.uniform(-1.0, 1.0, size=(n, d))
    if report is None:
        report = estimate_constants(model, sampler, max(200, trials), seed=seed + 1)

    worst = np.inf
    for t in range(trials):
        x = np.asarray(sampler(rng, n_players), dtype=float).reshape(n_players, d)
        a = rng.standard_normal((n_players, d))
        mode = int(rng.integers(3))
        da = _displacements(rng, n_players, d, mode)
        if rng.random() < 0.5:
            dx = np.zeros_like(x)
        else:
            dx = _displacements(rng, n_players, d, int(rng.integers(3)))
        m = finite_n_margin_at(model, x, x - dx, a, a - da, report.c_la, report.c_lx)
        worst = min(worst, m)

    # exact minimiser family for the quadratic catalog: no state displacement
    # and a mean-zero control displacement, alternating along one direction
    for j in range(d):
        x = np.asarray(sampler(rng, n_players), dtype=float).reshape(n_players, d)
        a = rng.standard_normal((n_players, d))
        da = np.zeros((n_players, d))
        da[:, j] = np.where(np.arange(n_players) % 2 == 0, 1.0, -1.0)
        da[:, j] -= da[:, j].mean()
        m = finite_n_margin_at(model, x, x, a, a - da, report.c_la, report.c_lx)
        worst = min(worst, m)
    return worst


def control_coercivity(model, n_players, trials=200, seed=0, sampler=None):
    """Smallest ratio LHS / sum|da|^2 over pure-control profile couplings.

    This is the finite-N control convexity constant: when it is not
    positive the best-response iteration has no contraction margin and the
    N-player system is outside the certified regime.
    """
    assert n_players >= 2, "need at least two players"
    rng = np.random.default_rng(seed)
    d = model.dim
    if sampler is None:
        sampler = lambda r, n: r.uniform(-1.0, 1.0, size=(n, d))

    worst = np.inf
    for t in range(trials + d):
        x = np.asarray(sampler(rng, n_players), dtype=float).reshape(n_players, d)
        a = rng.standard_normal((n_players, d))
        if t < trials:
            da = _displacements(rng, n_players, d, int(rng.integers(3)))
        else:
            da = np.zeros((n_players, d))
            da[:, t - trials] = np.where(np.arange(n_players) % 2 == 0, 1.0, -1.0)
            da[:, t - trials] -= da[:, t - trials].mean()
        a2 = float(np.sum(da * da))
        if a2 == 0.0:
            continue
        ab = a - da
        dxl, dal = grads_l_cloud(model, x, a, _loo_means(x), _loo_means(a))
        dxlb, dalb = grads_l_cloud(model, x, ab, _loo_means(x), _loo_means(ab))
        lhs = float(np.sum((dal - dalb) * da, axis=None))
        worst = min(worst, lhs / a2)
    return worst


@dataclass
class Certification:
    """Gate for every downstream experiment: mean-field and finite-N checks."""

    report: MonotonicityReport
    n_players: int
    finite_n_margin: float
    coercivity: float

    @property
    def passed(self):
        return self.report.passed and self.coercivity > 0.0

    def as_dict(self):
        return {
            "report": self.report.as_dict(),
            "n_players": self.n_players,
            "finite_n_margin": self.finite_n_margin,
            "coercivity": self.coercivity,
            "passed": self.passed,
        }

    def to_json(self):
        return json.dumps(self.as_dict(), sort_keys=True, indent=2)


def certify(model, n_players, sampler=None, trials=2000, seed=0):
    """Run both levels of the monotonicity check and combine the verdict."""
    d = model.dim
    if sampler is None:
        sampler = lambda r, n: r.uniform(-1.0, 1.0, size=(n, d))
    report = estimate_constants(model, sampler, trials, seed=seed)
    margin = check_finite_n(
        model, n_players, max(200, trials // 4), report=report, sampler=sampler, seed=seed + 1
    )
    coer = control_coercivity(model, n_players, trials=max(100, trials // 10), seed=seed + 2, sampler=sampler)
    return Certification(
        report=report, n_players=n_players, finite_n_margin=margin, coercivity=coer
    )
