"""Closed forms for linear-quadratic instances, and residual certificates.

When the cost catalog has no smooth terms the adjoint is linear in the
state and the mean, with coefficients solving scalar Riccati equations.
Three systems are covered: the mean-field limit (coefficients P, Q of
y = P x + Q <x>), the open-loop game with n players (coefficients p, q of
y_i = p x_i + q times the leave-one-out mean), and the closed-loop Markov
game (value coefficients a, b, c2 of the quadratic value function).  All
three are integrated backward with classical Runge-Kutta on a fine grid.

fbsde_residual re-inserts any discrete solution into the scheme's own
update equations and reports the defects, which is the certificate used to
separate statistical error from time-discretization error.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import simpson

from . import _kernels as K
from .fbsde import FbsdeSolution, _initial_points, _nf
from .measures import EmpiricalMeasure
from .model import lagrangian


def _require_lq(model):
    if model.interaction.smooth_terms:
        raise ValueError("closed forms cover the purely quadratic catalog only")


def _rk4_backward(f, y_terminal, horizon, steps):
    """Integrate y' = f(t, y) from t = horizon down to 0; values at all nodes."""
    grid = np.linspace(0.0, horizon, steps + 1)
    h = horizon / steps
    out = np.empty((steps + 1, len(y_terminal)))
    out[steps] = y_terminal
    for k in range(steps, 0, -1):
        t = grid[k]
        y = out[k]
        s1 = f(t, y)
        s2 = f(t - 0.5 * h, y - 0.5 * h * s1)
        s3 = f(t - 0.5 * h, y - 0.5 * h * s2)
        s4 = f(t - h, y - h * s3)
        out[k - 1] = y - (h / 6.0) * (s1 + 2.0 * s2 + 2.0 * s3 + s4)
    return grid, out


def _node(grid, t):
    h = grid[1] - grid[0]
    k = int(round(t / h))
    assert 0 <= k < len(grid) and abs(grid[k] - t) < 1e-9 * max(1.0, grid[-1])
    return k


def _coeffs_to_csv(path, grid, named):
    cols = list(named.values())
    arr = np.column_stack([grid] + cols)
    np.savetxt(path, arr, delimiter=",", header=",".join(["t"] + list(named)), comments="")


@dataclass
class MeanFieldRiccati:
    """y = P x + Q <x>; s = P + Q drives the mean."""

    grid: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    kappa_a: float
    c_aa: float

    @property
    def S(self):
        return self.P + self.Q

    def to_csv(self, path):
        _coeffs_to_csv(path, self.grid, {"P": self.P, "Q": self.Q})

    def at(self, t):
        k = _node(self.grid, t)
        return float(self.P[k]), float(self.Q[k])

    def feedback(self, t):
        """Coefficients (on x_i, on the mean) of the optimal control."""
        P, Q = self.at(t)
        s = P + Q
        ka, c = self.kappa_a, self.c_aa
        return -P / ka, -(Q - c * s / (ka + c)) / ka


def riccati_meanfield(model, steps=2000):
    _require_lq(model)
    ka = model.kappa_a
    c = model.interaction.c_aa
    k1 = model.kappa_x
    cxx = model.interaction.c_xx

    def f(t, y):
        P, Q = y
        s = P + Q
        dP = P * P / ka - k1
        dQ = -cxx + P * Q / ka - c * P * s / (ka * (ka + c)) + Q * s / (ka + c)
        return np.array([dP, dQ])

    grid, out = _rk4_backward(
        f, np.array([model.kappa_g, model.interaction.c_g]), model.horizon, steps
    )
    return MeanFieldRiccati(grid, out[:, 0].copy(), out[:, 1].copy(), ka, c)


@dataclass
class NPlayerRiccati:
    """Open-loop adjoint y_i = p x_i + q times the leave-one-out mean."""

    grid: np.ndarray
    p: np.ndarray
    q: np.ndarray
    n_players: int
    kappa_a: float
    c_aa: float

    def to_csv(self, path):
        _coeffs_to_csv(path, self.grid, {"p": self.p, "q": self.q})

    def at(self, t):
        k = _node(self.grid, t)
        return float(self.p[k]), float(self.q[k])

    def feedback(self, t):
        """Coefficients (on x_i, on the sum of all states) of the control."""
        p, q = self.at(t)
        n = self.n_players
        ka, c = self.kappa_a, self.c_aa
        D = ka * (n - 1) - c
        A = -((n - 1) * p - q) / D
        B = (-q + c * (p + q) / (ka + c)) / D
        return A, B


def riccati_nplayer(model, n_players, steps=2000):
    _require_lq(model)
    assert n_players >= 2
    ka = model.kappa_a
    c = model.interaction.c_aa
    D = ka * (n_players - 1) - c
    assert D > 0, "control coupling too strong for this population size"
    k1 = model.kappa_x
    cxx = model.interaction.c_xx
    n = n_players

    def f(t, y):
        p, q = y
        A = -((n - 1) * p - q) / D
        B = (-q + c * (p + q) / (ka + c)) / D
        dp = -k1 - p * (A + B) - q * B
        dq = -cxx - (n - 1) * (p + q) * B - q * A
        return np.array([dp, dq])

    grid, out = _rk4_backward(
        f, np.array([model.kappa_g, model.interaction.c_g]), model.horizon, steps
    )
    return NPlayerRiccati(grid, out[:, 0].copy(), out[:, 1].copy(), n_players, ka, c)


def _closedloop_coeffs(a, b, n, ka, c):
    D = ka * (n - 1) - c
    g1 = (-(n - 1) * a + c * (a + b) / (ka + c)) / D
    g2 = (n - 1) * (-b + c * (a + b) / (ka + c)) / D
    h1 = g2 / (n - 1)
    h2 = g1 + g2 * (n - 2) / (n - 1)
    return g1, g2, h1, h2


def _closedloop_rhs(y, n, ka, c, k1, cxx):
    a, b, c2 = y
    g1, g2, h1, h2 = _closedloop_coeffs(a, b, n, ka, c)
    da = -2.0 * a * g1 - k1 - ka * g1 * g1 - 2.0 * c * g1 * h1 - 2.0 * b * h1
    db = (
        -(b * g1 + a * g2)
        - ka * g1 * g2
        - c * (g1 * h2 + g2 * h1)
        - cxx
        - b * h2
        - c2 * h1
    )
    dc2 = -2.0 * b * g2 - ka * g2 * g2 - 2.0 * c * g2 * h2 - 2.0 * c2 * h2
    return np.array([da, db, dc2])


@dataclass
class ClosedLoopRiccati:
    """Value u_i = a/2 |x_i|^2 + b x_i . xbar + c2/2 |xbar|^2 (+ time offset).

    xbar is the leave-one-out mean; the state-independent offset never
    feeds back into the coefficients and is not tracked.
    """

    grid: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c2: np.ndarray
    n_players: int
    kappa_a: float
    c_aa: float

    def to_csv(self, path):
        _coeffs_to_csv(path, self.grid, {"a": self.a, "b": self.b, "c2": self.c2})

    def at(self, t):
        k = _node(self.grid, t)
        return float(self.a[k]), float(self.b[k]), float(self.c2[k])

    def feedback(self, t):
        """Coefficients (own state, leave-one-out mean) of the Markov control."""
        a, b, _c2 = self.at(t)
        g1, g2, _h1, _h2 = _closedloop_coeffs(
            a, b, self.n_players, self.kappa_a, self.c_aa
        )
        return g1, g2

    def op_norms(self):
        """Operator norm of the adjoint-slope matrix at every node.

        The matrix has a on the diagonal and b/(n-1) off it, so the
        spectrum is {a + b, a - b/(n-1)}.
        """
        off = self.b / (self.n_players - 1)
        return np.maximum(np.abs(self.a + self.b), np.abs(self.a - off))


def riccati_closedloop(model, n_players, steps=2000):
    _require_lq(model)
    assert n_players >= 2
    ka = model.kappa_a
    c = model.interaction.c_aa
    assert ka * (n_players - 1) - c > 0
    k1 = model.kappa_x
    cxx = model.interaction.c_xx

    def f(t, y):
        return _closedloop_rhs(y, n_players, ka, c, k1, cxx)

    grid, out = _rk4_backward(
        f,
        np.array([model.kappa_g, model.interaction.c_g, 0.0]),
        model.horizon,
        steps,
    )
    return ClosedLoopRiccati(
        grid,
        out[:, 0].copy(),
        out[:, 1].copy(),
        out[:, 2].copy(),
        n_players,
        ka,
        c,
    )


def a_matrix_bound(model, n_players, steps=2000):
    """Integral over [0, T] of the squared adjoint-slope operator norm."""
    cl = riccati_closedloop(model, n_players, steps)
    return float(simpson(cl.op_norms() ** 2, x=cl.grid))


def phi_control_closed_form(model, p):
    """Exact best-response fixed point against the full cloud, quadratic catalog."""
    _require_lq(model)
    p = np.atleast_2d(np.asarray(p, dtype=float))
    ka = model.kappa_a
    c = model.interaction.c_aa
    pbar = p.mean(axis=0)
    return -(p - c * pbar / (ka + c)) / ka


def nplayer_control_closed_form(model, p):
    """Exact best-response fixed point against leave-one-out clouds."""
    _require_lq(model)
    p = np.atleast_2d(np.asarray(p, dtype=float))
    n = p.shape[0]
    assert n >= 2
    ka = model.kappa_a
    c = model.interaction.c_aa
    D = ka * (n - 1) - c
    assert D > 0
    sp = p.sum(axis=0)
    return (-(n - 1) * p + c * sp / (ka + c)) / D


def _linear_theta(slopes, intercepts, d, degree):
    # regression representation of y = slope * x + intercept, per node
    S1 = len(slopes)
    theta = np.zeros((S1, _nf(d, degree), d))
    for k in range(S1):
        theta[k, 0, :] = intercepts[k]
        for l in range(d):
            theta[k, 1 + l, l] = slopes[k]
    return theta


def induced_meanfield_solution(model, paths, m0, steps_mult=10, basis_degree=2):
    """Exact-coefficient Euler solution of the mean-field system.

    The feedback uses the continuous-time Riccati coefficients at the left
    node and the cloud's empirical mean, so every defect left in the
    discrete equations is pure time discretization.
    """
    _require_lq(model)
    d = model.dim
    S = paths.steps
    dt = paths.dt
    ric = riccati_meanfield(model, steps=steps_mult * S)
    stride = steps_mult
    x0 = _initial_points(m0, paths, d)
    M = paths.particles
    si = math.sqrt(2.0)
    sc = math.sqrt(2.0 * model.common_noise)
    X = np.empty((M, S + 1, d))
    A = np.empty((M, S, d))
    Y = np.empty((M, S + 1, d))
    X[:, 0, :] = x0
    slopes = np.empty(S + 1)
    intercepts = np.empty((S + 1, d))
    for k in range(S):
        P = ric.P[k * stride]
        Q = ric.Q[k * stride]
        fx, fm = ric.feedback(paths.grid[k])
        m = X[:, k, :].mean(axis=0)
        A[:, k, :] = fx * X[:, k, :] + fm * m
        Y[:, k, :] = P * X[:, k, :] + Q * m
        slopes[k] = P
        intercepts[k] = Q * m
        X[:, k + 1, :] = (
            X[:, k, :]
            + A[:, k, :] * dt
            + si * paths.idio_increments[:, k, :]
            + sc * paths.common_increments[k]
        )
    mT = X[:, S, :].mean(axis=0)
    Y[:, S, :] = ric.P[-1] * X[:, S, :] + ric.Q[-1] * mT
    slopes[S] = ric.P[-1]
    intercepts[S] = ric.Q[-1] * mT
    return FbsdeSolution(
        variant="induced_meanfield",
        grid=paths.grid.copy(),
        x_paths=X,
        y_paths=Y,
        controls=A,
        z_repr=_linear_theta(slopes, intercepts, d, basis_degree),
        basis_degree=basis_degree,
        sigma0=float(model.common_noise),
        terminal_residual=0.0,
        control_residual=0.0,
        iterations=0,
        residual_history=np.empty(0),
        converged=True,
        paths=paths,
    )


def induced_nplayer_solution(model, paths, xi, steps_mult=10, basis_degree=2):
    """Exact-coefficient Euler solution of the open-loop n-player system."""
    _require_lq(model)
    d = model.dim
    S = paths.steps
    dt = paths.dt
    n = paths.particles
    ric = riccati_nplayer(model, n, steps=steps_mult * S)
    stride = steps_mult
    x0 = _initial_points(xi, paths, d)
    si = math.sqrt(2.0)
    sc = math.sqrt(2.0 * model.common_noise)
    X = np.empty((n, S + 1, d))
    A = np.empty((n, S, d))
    Y = np.empty((n, S + 1, d))
    X[:, 0, :] = x0
    slopes = np.empty(S + 1)
    intercepts = np.empty((S + 1, d))
    for k in range(S):
        p = ric.p[k * stride]
        q = ric.q[k * stride]
        At, Bt = ric.feedback(paths.grid[k])
        sx = X[:, k, :].sum(axis=0)
        loo_mean = (sx[None, :] - X[:, k, :]) / (n - 1)
        A[:, k, :] = At * X[:, k, :] + Bt * sx[None, :]
        Y[:, k, :] = p * X[:, k, :] + q * loo_mean
        # cross-sectional representation: y = (p - q/(n-1)) x + q sx/(n-1)
        slopes[k] = p - q / (n - 1)
        intercepts[k] = q * sx / (n - 1)
        X[:, k + 1, :] = (
            X[:, k, :]
            + A[:, k, :] * dt
            + si * paths.idio_increments[:, k, :]
            + sc * paths.common_increments[k]
        )
    p, q = ric.p[-1], ric.q[-1]
    sx = X[:, S, :].sum(axis=0)
    Y[:, S, :] = p * X[:, S, :] + q * (sx[None, :] - X[:, S, :]) / (n - 1)
    slopes[S] = p - q / (n - 1)
    intercepts[S] = q * sx / (n - 1)
    return FbsdeSolution(
        variant="induced_nplayer",
        grid=paths.grid.copy(),
        x_paths=X,
        y_paths=Y,
        controls=A,
        z_repr=_linear_theta(slopes, intercepts, d, basis_degree),
        basis_degree=basis_degree,
        sigma0=float(model.common_noise),
        terminal_residual=0.0,
        control_residual=0.0,
        iterations=0,
        residual_history=np.empty(0),
        converged=True,
        paths=paths,
    )


@dataclass
class ResidualReport:
    """Defects of a discrete solution inserted into its own scheme equations.

    backward_step_rms is the per-step defect (second order in dt for
    exact-coefficient solutions); backward_rms divides by dt and is the
    driver-scale defect (first order).  The backward defect is centered
    across the cloud because the regression intercept absorbs any
    common-mode shift.
    """

    forward_sup: float
    backward_step_rms: float
    backward_rms: float
    control_residual: float
    terminal_sup: float

    def as_dict(self):
        return {
            "forward_sup": self.forward_sup,
            "backward_step_rms": self.backward_step_rms,
            "backward_rms": self.backward_rms,
            "control_residual": self.control_residual,
            "terminal_sup": self.terminal_sup,
        }


def fbsde_residual(model, solution, control_sample=8, newton_tol=1e-12):
    """Re-insert a solution into the discrete forward-backward equations."""
    X = solution.x_paths
    Y = solution.y_paths
    A = solution.controls
    theta = solution.z_repr
    paths = solution.paths
    M, S1, d = X.shape
    S = S1 - 1
    dt = solution.dt
    loo = solution.variant in ("nplayer", "induced_nplayer")
    si = math.sqrt(2.0)
    sc = math.sqrt(2.0 * solution.sigma0)
    dW = paths.idio_increments
    if solution.recentered_idio:
        dW = dW - dW.mean(axis=0, keepdims=True)
    dW0 = paths.common_increments
    lp = model.lpack
    gp = model.gpack

    drift = A * dt + si * dW + sc * dW0[None, :, :]
    fwd = X[:, 1:, :] - X[:, :-1, :] - drift
    forward_sup = float(np.max(np.abs(fwd)))

    sum_sq = 0.0
    count = 0
    for k in range(S):
        Xk = np.ascontiguousarray(X[:, k, :])
        Ak = A[:, k, :]
        V = si * dW[:, k, :] + sc * dW0[k][None, :]
        CV = K.feat_grad_dot(Xk, V, solution.basis_degree) @ theta[k + 1]
        driver = np.empty((M, d))
        if loo:
            sx = Xk.sum(axis=0)
            sa = Ak.sum(axis=0)
            for i in range(M):
                mx = (sx - Xk[i]) / (M - 1)
                ma = (sa - Ak[i]) / (M - 1)
                driver[i] = K.dx_l(Xk[i], Ak[i], mx, ma, lp)
        else:
            mx = Xk.mean(axis=0)
            ma = Ak.mean(axis=0)
            for i in range(M):
                driver[i] = K.dx_l(Xk[i], Ak[i], mx, ma, lp)
        defect = Y[:, k + 1, :] - Y[:, k, :] + driver * dt - CV
        defect = defect - defect.mean(axis=0)
        sum_sq += float(np.sum(defect**2))
        count += defect.size
    backward_step_rms = math.sqrt(sum_sq / count)

    ctrl = 0.0
    ks = sorted(set(np.linspace(0, S - 1, min(control_sample, S)).astype(int)))
    for k in ks:
        Xk = X[:, k, :]
        Ak = A[:, k, :]
        if loo:
            sx = Xk.sum(axis=0)
            sa = Ak.sum(axis=0)
            for i in range(M):
                mx = (sx - Xk[i]) / (M - 1)
                ma = (sa - Ak[i]) / (M - 1)
                a, _rn, _it, _ok = K.newton_a(
                    Xk[i], Y[i, k, :], mx, ma, lp, newton_tol, 50
                )
                ctrl = max(ctrl, float(np.max(np.abs(a - Ak[i]))))
        else:
            mx = Xk.mean(axis=0)
            ma = Ak.mean(axis=0)
            for i in range(M):
                a, _rn, _it, _ok = K.newton_a(
                    Xk[i], Y[i, k, :], mx, ma, lp, newton_tol, 50
                )
                ctrl = max(ctrl, float(np.max(np.abs(a - Ak[i]))))

    term = 0.0
    XT = X[:, S, :]
    if loo:
        sx = XT.sum(axis=0)
        for i in range(M):
            mx = (sx - XT[i]) / (M - 1)
            g = K.dx_g(XT[i], mx, gp)
            term = max(term, float(np.max(np.abs(Y[i, S, :] - g))))
    else:
        mx = XT.mean(axis=0)
        for i in range(M):
            g = K.dx_g(XT[i], mx, gp)
            term = max(term, float(np.max(np.abs(Y[i, S, :] - g))))

    return ResidualReport(
        forward_sup=forward_sup,
        backward_step_rms=backward_step_rms,
        backward_rms=backward_step_rms / dt,
        control_residual=ctrl,
        terminal_sup=term,
    )


def nash_pde_residual(model, n_players, steps=2000, n_clouds=20, times=5, seed=0):
    """Collocation certificate for the closed-loop value coefficients.

    At sampled times and random state clouds the quadratic value's
    time derivative plus transport plus running cost must vanish after
    subtracting the state-independent remainder (the diffusion constant
    and the scalar offset), which is obtained by evaluating the same
    expression at the origin cloud.  Uses the model's own cost primitives,
    so it checks the coefficient algebra end to end.
    """
    _require_lq(model)
    cl = riccati_closedloop(model, n_players, steps)
    n = n_players
    d = model.dim
    rng = np.random.default_rng(seed)
    worst = 0.0
    ks = np.linspace(0.1, 0.9, times)
    for frac in ks:
        k = int(round(frac * steps))
        t = cl.grid[k]
        a, b, c2 = cl.a[k], cl.b[k], cl.c2[k]
        da, db, dc2 = _closedloop_rhs(
            np.array([a, b, c2]),
            n,
            model.kappa_a,
            model.interaction.c_aa,
            model.kappa_x,
            model.interaction.c_xx,
        )
        g1, g2, _h1, _h2 = _closedloop_coeffs(
            a, b, n, model.kappa_a, model.interaction.c_aa
        )
        for _ in range(n_clouds):
            x = rng.uniform(-2.0, 2.0, (n, d))
            sx = x.sum(axis=0)
            xbar = (sx[None, :] - x) / (n - 1)
            alpha = g1 * x + g2 * xbar
            # player 0's value and its pieces
            x0, xb0 = x[0], xbar[0]
            du_dt = (
                0.5 * da * float(x0 @ x0)
                + db * float(x0 @ xb0)
                + 0.5 * dc2 * float(xb0 @ xb0)
            )
            grad_own = a * x0 + b * xb0
            transport = float(alpha[0] @ grad_own)
            for j in range(1, n):
                grad_j = (b * x0 + c2 * xb0) / (n - 1)
                transport += float(alpha[j] @ grad_j)
            others = EmpiricalMeasure(x[1:], alpha[1:])
            run = lagrangian(model, x0, alpha[0], others)
            worst = max(worst, abs(du_dt + transport + run))
    return worst
