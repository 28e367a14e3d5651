"""Forward-backward solvers for the Pontryagin particle systems.

Two time-discretized systems share one engine: the mean-field McKean-Vlasov
system, where the measure each particle responds to is the full cross-finite
particle cloud, and the N-player system, where it is the leave-one-out
cloud.  The scheme is forward Euler plus backward least-squares regression
of conditional expectations on polynomial features of the state, iterated
in a Picard loop until the Y-paths settle.  The backward targets subtract a
fitted martingale increment evaluated at the current state, which is
unbiased and removes most of the Monte Carlo noise; the realized noise
increment (idiosyncratic plus common) is used, so for linear fields the
common-mode terminal randomness drops out of the regression as well.

A homotopy solver ramps the cost data with a parameter lambda from a
trivially solvable linear system to the target system, warm starting each
rung, for instances where plain Picard stalls.  An error-injection
experiment solves a perturbed system against an unperturbed one on shared
noise and reports the aggregates of the stability estimate.
"""

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from . import _kernels as K
from .measures import EmpiricalMeasure


@dataclass
class SchemeConfig:
    """Discretization and iteration knobs shared by the solvers.

    dt is the target step used when generating bundles from a config file;
    the solvers themselves read the step off the bundle they are given.
    """

    dt: float = 1e-2
    picard_tol: float = 1e-8
    picard_max: int = 100
    basis_degree: int = 2
    damping: float = 0.5
    lambda_steps: int = 10
    fp_tol: float = 1e-10
    fp_max: int = 500
    newton_tol: float = 1e-12
    recenter_idio: bool = False

    def __post_init__(self):
        assert self.basis_degree in (1, 2), "basis_degree must be 1 or 2"
        assert self.picard_max >= 2, "need at least two Picard passes"
        assert self.lambda_steps >= 1


@dataclass
class PathBundle:
    """Seed-reproducible Brownian increments on a uniform grid.

    Stream i carries particle i's initial-condition uniforms and
    idiosyncratic increments; stream 0 is the common noise.  Bundles of any
    width drawn from the same seed share their leading streams bit for bit,
    which is what synchronous coupling across population sizes rests on.
    """

    seed: int
    grid: np.ndarray
    idio_increments: np.ndarray
    common_increments: np.ndarray
    initial_uniforms: np.ndarray

    @property
    def particles(self):
        return self.idio_increments.shape[0]

    @property
    def steps(self):
        return self.idio_increments.shape[1]

    @property
    def dim(self):
        return self.idio_increments.shape[2]

    @property
    def dt(self):
        return float(self.grid[1] - self.grid[0])

    @property
    def horizon(self):
        return float(self.grid[-1])

    def subset(self, n):
        """First-n-particles view; shares memory with the parent bundle."""
        assert 1 <= n <= self.particles
        return PathBundle(
            self.seed,
            self.grid,
            self.idio_increments[:n],
            self.common_increments,
            self.initial_uniforms[:n],
        )

    def stream_checksum(self, i):
        """sha256 of particle stream i (0 = common noise)."""
        h = hashlib.sha256()
        if i == 0:
            h.update(self.common_increments.tobytes())
        else:
            h.update(self.initial_uniforms[i - 1].tobytes())
            h.update(self.idio_increments[i - 1].tobytes())
        return h.hexdigest()

    def variance_zscores(self):
        """Per-coordinate |sample variance - dt| in standard-error units."""
        dt = self.dt
        out = []
        for arr in (self.idio_increments.reshape(-1, self.dim), self.common_increments):
            n = arr.shape[0]
            se = dt * math.sqrt(2.0 / (n - 1))
            svar = arr.var(axis=0, ddof=1)
            out.append(np.abs(svar - dt) / se)
        return np.concatenate(out)


def generate_paths(seed, particles, steps, model):
    """Draw a PathBundle for the model's horizon and dimension."""
    assert particles >= 1 and steps >= 1
    d = model.dim
    dt = model.horizon / steps
    root = np.random.SeedSequence(seed)
    children = root.spawn(particles + 1)
    sq = math.sqrt(dt)
    rng0 = np.random.default_rng(children[0])
    common = rng0.standard_normal((steps, d)) * sq
    idio = np.empty((particles, steps, d))
    init_u = np.empty((particles, d))
    for i in range(particles):
        rng = np.random.default_rng(children[i + 1])
        init_u[i] = rng.random(d)
        idio[i] = rng.standard_normal((steps, d)) * sq
    grid = np.linspace(0.0, model.horizon, steps + 1)
    return PathBundle(seed, grid, idio, common, init_u)


class UniformBox:
    """Initial law: independent uniforms on [lo, hi] per coordinate."""

    def __init__(self, lo, hi):
        assert hi > lo
        self.lo = float(lo)
        self.hi = float(hi)

    def sample(self, paths):
        return self.lo + (self.hi - self.lo) * paths.initial_uniforms


class TruncatedGauss:
    """Gaussian truncated to [lo, hi], drawn by inverse CDF.

    Inverse-CDF sampling consumes exactly the bundle's one uniform per
    coordinate, so initial conditions stay coupled across bundle widths.
    """

    def __init__(self, mean, sd, lo, hi):
        assert sd > 0 and hi > lo
        self.mean = float(mean)
        self.sd = float(sd)
        self.lo = float(lo)
        self.hi = float(hi)

    def sample(self, paths):
        a = ndtr((self.lo - self.mean) / self.sd)
        b = ndtr((self.hi - self.mean) / self.sd)
        u = paths.initial_uniforms
        return self.mean + self.sd * ndtri(a + u * (b - a))


def _initial_points(m0, paths, d):
    if hasattr(m0, "sample"):
        x0 = np.asarray(m0.sample(paths), dtype=float)
    elif callable(m0):
        x0 = np.asarray(m0(paths), dtype=float)
    else:
        x0 = np.asarray(m0, dtype=float)
        if x0.ndim == 1:
            x0 = x0.reshape(-1, 1)
    assert x0.shape == (paths.particles, d), "initial points must be (particles, dim)"
    return x0


@dataclass
class FbsdeSolution:
    """Discrete solution paths plus the certificates that back them.

    z_repr holds the per-step regression coefficients of y on the state
    basis; the martingale integrands are carried only through it (one
    common path cannot identify the common-noise loading separately), see
    z_at / z0_at.
    """

    variant: str
    grid: np.ndarray
    x_paths: np.ndarray
    y_paths: np.ndarray
    controls: np.ndarray
    z_repr: np.ndarray
    basis_degree: int
    sigma0: float
    terminal_residual: float
    control_residual: float
    iterations: int
    residual_history: np.ndarray
    converged: bool
    paths: PathBundle
    lambda_iterations: tuple = ()
    recentered_idio: bool = False

    @property
    def particles(self):
        return self.x_paths.shape[0]

    @property
    def steps(self):
        return self.x_paths.shape[1] - 1

    @property
    def dt(self):
        return float(self.grid[1] - self.grid[0])

    def measure_flow(self, k):
        """Empirical measure at grid node k (state-only at the horizon)."""
        S = self.steps
        assert 0 <= k <= S
        if k == S:
            return EmpiricalMeasure(self.x_paths[:, S, :].copy())
        return EmpiricalMeasure(
            self.x_paths[:, k, :].copy(), self.controls[:, k, :].copy()
        )

    def z_at(self, k, x):
        """Idiosyncratic integrand representation sqrt(2) dy/dx at one point."""
        x = np.asarray(x, dtype=float).reshape(-1)
        J = K.feat_jac(x, self.basis_degree)
        return math.sqrt(2.0) * (J.T @ self.z_repr[k]).T

    def z0_at(self, k, x):
        """Common-noise integrand representation sqrt(2 sigma0) dy/dx."""
        x = np.asarray(x, dtype=float).reshape(-1)
        J = K.feat_jac(x, self.basis_degree)
        return math.sqrt(2.0 * self.sigma0) * (J.T @ self.z_repr[k]).T

    def summary(self):
        return {
            "variant": self.variant,
            "particles": int(self.particles),
            "steps": int(self.steps),
            "dt": self.dt,
            "basis_degree": int(self.basis_degree),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "terminal_residual": float(self.terminal_residual),
            "control_residual": float(self.control_residual),
            "residual_history": [float(r) for r in self.residual_history],
            "lambda_iterations": [int(i) for i in self.lambda_iterations],
        }

    def export_summary(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, sort_keys=True, indent=2)
            fh.write("\n")

    def export_csv(self, path):
        """One row per (step, particle): t, i, x, y, control (nan at T)."""
        M = self.particles
        S = self.steps
        d = self.x_paths.shape[2]
        rows = np.empty(((S + 1) * M, 2 + 3 * d))
        r = 0
        for k in range(S + 1):
            for i in range(M):
                rows[r, 0] = self.grid[k]
                rows[r, 1] = i
                rows[r, 2 : 2 + d] = self.x_paths[i, k]
                rows[r, 2 + d : 2 + 2 * d] = self.y_paths[i, k]
                if k < S:
                    rows[r, 2 + 2 * d :] = self.controls[i, k]
                else:
                    rows[r, 2 + 2 * d :] = np.nan
                r += 1
        cols = ["t", "particle"]
        cols += ["x%d" % j for j in range(d)]
        cols += ["y%d" % j for j in range(d)]
        cols += ["a%d" % j for j in range(d)]
        np.savetxt(path, rows, delimiter=",", header=",".join(cols), comments="")


class ContinuationError(RuntimeError):
    """Homotopy stalled; .lambda_reached is the last rung that converged."""

    def __init__(self, msg, lambda_reached):
        super().__init__(msg)
        self.lambda_reached = lambda_reached


def _nf(d, degree):
    return 1 + d + (d * (d + 1) // 2 if degree == 2 else 0)


def _prep_increments(paths, scheme):
    # kernels run time-major; recentring (optional) kills the spurious
    # random walk of the cross-particle mean without touching the law of
    # pairwise differences
    dW = np.ascontiguousarray(np.swapaxes(paths.idio_increments, 0, 1))
    if scheme.recenter_idio:
        dW = dW - dW.mean(axis=1, keepdims=True)
    dW0 = np.ascontiguousarray(paths.common_increments)
    return dW, dW0


def _zero_errors(S, d):
    return np.zeros((S, d)), 0.0, np.zeros((S, d)), 0.0, np.zeros(d), 0.0


def _picard(model, x0, paths, scheme, loo, lam=1.0, cla=None, theta0=None, err=None):
    """Shared Picard engine; returns (solution, converged)."""
    dW, dW0 = _prep_increments(paths, scheme)
    S, M, d = dW.shape
    assert d == model.dim, "bundle dimension does not match the model"
    dt = paths.dt
    degree = scheme.basis_degree
    if cla is None:
        cla = model.kappa_a
    if err is None:
        err = _zero_errors(S, d)
    e1t, e1s, e2t, e2s, e3c, e3s = err
    theta = np.zeros((S + 1, _nf(d, degree), d)) if theta0 is None else theta0.copy()
    sig_i = math.sqrt(2.0)
    sig_c = math.sqrt(2.0 * model.common_noise)
    resp_ma = model.response_reads_control_mean
    lp = model.lpack
    gp = model.gpack
    hist = []
    y_prev = None
    converged = False
    iterations = 0
    for it in range(scheme.picard_max):
        X, A, _yreg, YT, ctrl_res, ok = K.forward_sweep(
            x0, dW, dW0, theta, degree, lp, gp, lam, cla, loo, resp_ma,
            sig_i, sig_c, dt, scheme.damping, scheme.fp_tol, scheme.fp_max,
            scheme.newton_tol, e1t, e1s, e3c, e3s,
        )
        if not ok:
            raise RuntimeError(
                "per-step control fixed point failed during the forward sweep"
            )
        theta, y_pic = K.backward_sweep(
            X, A, YT, dW, dW0, degree, lp, lam, loo, sig_i, sig_c, dt, e2t, e2s
        )
        iterations = it + 1
        if y_prev is not None:
            rel = float(np.sum((y_pic - y_prev) ** 2)) / (
                float(np.sum(y_prev**2)) + 1e-30
            )
            hist.append(rel)
            if rel <= scheme.picard_tol:
                converged = True
                y_prev = y_pic
                break
        y_prev = y_pic
    X, A, y_reg, YT, ctrl_res, ok = K.forward_sweep(
        x0, dW, dW0, theta, degree, lp, gp, lam, cla, loo, resp_ma,
        sig_i, sig_c, dt, scheme.damping, scheme.fp_tol, scheme.fp_max,
        scheme.newton_tol, e1t, e1s, e3c, e3s,
    )
    if not ok:
        raise RuntimeError("per-step control fixed point failed during realization")
    term_res = float(np.max(np.abs(y_reg[S] - YT))) if M > 0 else 0.0
    sol = FbsdeSolution(
        variant="nplayer" if loo else "meanfield",
        grid=paths.grid.copy(),
        x_paths=np.ascontiguousarray(np.swapaxes(X, 0, 1)),
        y_paths=np.ascontiguousarray(np.swapaxes(y_reg, 0, 1)),
        controls=np.ascontiguousarray(np.swapaxes(A, 0, 1)),
        z_repr=theta,
        basis_degree=degree,
        sigma0=float(model.common_noise),
        terminal_residual=term_res,
        control_residual=float(ctrl_res),
        iterations=iterations,
        residual_history=np.asarray(hist),
        converged=converged,
        paths=paths,
        recentered_idio=scheme.recenter_idio,
    )
    return sol, converged


def solve_meanfield(model, m0, paths, scheme=None):
    """Mean-field Pontryagin system on the particle cloud of the bundle.

    m0 is a sampler (UniformBox, TruncatedGauss, any object with .sample,
    or a callable) or an explicit (particles, dim) array.  Raises
    RuntimeError when Picard fails to settle; solve_continuation is the
    fallback for such instances.
    """
    scheme = scheme or SchemeConfig()
    x0 = _initial_points(m0, paths, model.dim)
    sol, converged = _picard(model, x0, paths, scheme, loo=False)
    if not converged:
        raise RuntimeError(
            "Picard did not settle in %d passes (last relative change %.3e); "
            "try solve_continuation" % (scheme.picard_max, sol.residual_history[-1])
        )
    return sol


def solve_nplayer(model, xi, paths, scheme=None):
    """N-player Pontryagin system; particle i responds to the others."""
    scheme = scheme or SchemeConfig()
    assert paths.particles >= 2, "the N-player system needs at least two players"
    x0 = _initial_points(xi, paths, model.dim)
    sol, converged = _picard(model, x0, paths, scheme, loo=True)
    if not converged:
        raise RuntimeError(
            "Picard did not settle in %d passes (last relative change %.3e); "
            "try solve_continuation" % (scheme.picard_max, sol.residual_history[-1])
        )
    return sol


def solve_continuation(model, m0, paths, lambda_steps=None, scheme=None, cla=None):
    """Homotopy from a linear contractive system (lambda 0) to the target.

    The drift at rung lambda is lambda * alpha - (1 - lambda) * cla * y and
    the driver/terminal data are scaled by lambda, so rung 0 is the plainly
    solvable linear system and rung 1 the target; each rung warm starts
    from the previous coefficients.  A stalled rung raises
    ContinuationError carrying the last lambda that settled.
    """
    scheme = scheme or SchemeConfig()
    steps = scheme.lambda_steps if lambda_steps is None else int(lambda_steps)
    assert steps >= 1
    x0 = _initial_points(m0, paths, model.dim)
    theta = None
    reached = 0.0
    lam_iters = []
    sol = None
    for j in range(1, steps + 1):
        lam = j / steps
        try:
            sol, converged = _picard(
                model, x0, paths, scheme, loo=False, lam=lam, cla=cla, theta0=theta
            )
        except RuntimeError as exc:
            raise ContinuationError(
                "homotopy failed at lambda = %.3f (reached %.3f): %s"
                % (lam, reached, exc),
                reached,
            ) from exc
        if not converged:
            raise ContinuationError(
                "homotopy stalled at lambda = %.3f (reached %.3f)" % (lam, reached),
                reached,
            )
        theta = sol.z_repr
        reached = lam
        lam_iters.append(sol.iterations)
    sol.lambda_iterations = tuple(lam_iters)
    return sol


@dataclass
class DecouplingField:
    """Per-step least-squares representation y ~ basis(x, moments).

    With a single common path the moment features are constant across the
    cloud, hence collinear with the intercept; they are then dropped and
    kept_moments records it.
    """

    grid: np.ndarray
    coeffs: np.ndarray
    moment_coeffs: np.ndarray
    rel_residual: np.ndarray
    basis_degree: int
    kept_moments: bool

    def evaluate(self, k, x, mx=None, my=None):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        F = K.features(x, self.basis_degree)
        out = F @ self.coeffs[k]
        if self.kept_moments and mx is not None and my is not None:
            mom = np.concatenate([np.asarray(mx), np.asarray(my)])
            out = out + mom @ self.moment_coeffs[k]
        return out


def regress_decoupling_field(solution, rcond=1e-10):
    """Fit y on features of (x, cross-particle moments) at every grid node.

    The in-sample relative residual is reported per node.  Rank-deficient
    designs (the single-run norm) fall back to the state-only basis with a
    warning.
    """
    X = solution.x_paths
    Y = solution.y_paths
    M, S1, d = X.shape
    degree = solution.basis_degree
    nf = _nf(d, degree)
    coeffs = np.zeros((S1, nf, d))
    mom_coeffs = np.zeros((S1, 2 * d, d))
    rel = np.zeros(S1)
    kept = True
    warned = False
    for k in range(S1):
        F = K.features(X[:, k, :], degree)
        mx = np.tile(X[:, k, :].mean(axis=0), (M, 1))
        my = np.tile(Y[:, k, :].mean(axis=0), (M, 1))
        design = np.hstack([F, mx, my])
        rank = np.linalg.matrix_rank(design, tol=rcond * max(M, design.shape[1]))
        if rank < design.shape[1]:
            if not warned:
                warnings.warn(
                    "moment features are collinear on a single common path; "
                    "falling back to the state-only basis",
                    stacklevel=2,
                )
                warned = True
            kept = False
            sol, _res, _rk, _sv = np.linalg.lstsq(F, Y[:, k, :], rcond=-1)
            coeffs[k] = sol
            fit = F @ sol
        else:
            sol, _res, _rk, _sv = np.linalg.lstsq(design, Y[:, k, :], rcond=-1)
            coeffs[k] = sol[:nf]
            mom_coeffs[k] = sol[nf:]
            fit = design @ sol
        num = float(np.sqrt(np.sum((fit - Y[:, k, :]) ** 2)))
        den = float(np.sqrt(np.sum(Y[:, k, :] ** 2))) + 1e-30
        rel[k] = num / den
    return DecouplingField(
        grid=solution.grid.copy(),
        coeffs=coeffs,
        moment_coeffs=mom_coeffs,
        rel_residual=rel,
        basis_degree=degree,
        kept_moments=kept,
    )


class ConstantError:
    """Constant-in-time error of the declared value (scalar or d-vector)."""

    def __init__(self, value):
        self.value = value

    def add_to(self, et, grid):
        et += np.asarray(self.value, dtype=float)
        return 0.0

    def terminal(self, d):
        return np.broadcast_to(np.asarray(self.value, dtype=float), (d,)).copy(), 0.0


class SinusoidError:
    """amp * sin(freq * t + phase), applied to every coordinate."""

    def __init__(self, amp, freq, phase=0.0):
        self.amp = float(amp)
        self.freq = float(freq)
        self.phase = float(phase)

    def add_to(self, et, grid):
        vals = self.amp * np.sin(self.freq * grid[:-1] + self.phase)
        et += vals[:, None]
        return 0.0

    def terminal(self, d):
        # a terminal sinusoid is just its value at the horizon
        raise ValueError("sinusoid terminal errors need the horizon; use add_to")


class StateProportionalError:
    """eps * X_t, progressively measurable by construction."""

    def __init__(self, eps):
        self.eps = float(eps)

    def add_to(self, et, grid):
        return self.eps

    def terminal(self, d):
        return np.zeros(d), self.eps


@dataclass
class ErrorSpec:
    """Error channels of the perturbed system.

    e1 perturbs the forward drift, e2 the backward driver, e3 the terminal
    condition; each is one descriptor or a tuple of them.  xi_shift moves
    the initial points of the perturbed system.
    """

    e1: object = None
    e2: object = None
    e3: object = None
    xi_shift: object = None

    def realize(self, grid, d, horizon):
        S = len(grid) - 1
        e1t = np.zeros((S, d))
        e1s = 0.0
        e2t = np.zeros((S, d))
        e2s = 0.0
        e3c = np.zeros(d)
        e3s = 0.0
        for desc in _as_tuple(self.e1):
            e1s += desc.add_to(e1t, grid)
        for desc in _as_tuple(self.e2):
            e2s += desc.add_to(e2t, grid)
        for desc in _as_tuple(self.e3):
            if isinstance(desc, SinusoidError):
                e3c += desc.amp * math.sin(desc.freq * horizon + desc.phase)
            else:
                c, s = desc.terminal(d)
                e3c += c
                e3s += s
        return e1t, e1s, e2t, e2s, e3c, e3s


def _as_tuple(x):
    if x is None:
        return ()
    if isinstance(x, (tuple, list)):
        return tuple(x)
    return (x,)


@dataclass
class StabilityReport:
    """Aggregates of the perturbation bound, unperturbed vs perturbed."""

    sup_dx2: float
    sup_dy2: float
    int_da2: float
    rhs: float
    ratio: float
    n_players: int

    def as_dict(self):
        return {
            "sup_dx2": self.sup_dx2,
            "sup_dy2": self.sup_dy2,
            "int_da2": self.int_da2,
            "rhs": self.rhs,
            "ratio": self.ratio,
            "n_players": self.n_players,
        }


def perturbed_stability_experiment(model, paths, errors, m0=None, scheme=None):
    """Solve perturbed and unperturbed N-player systems on shared noise.

    Returns the three left-side aggregates (sup_t sum|dX|^2, sup_t
    sum|dY|^2, int sum|da|^2), the realized right side sum(|dxi|^2+|E3|^2)
    + int sum(|E1|^2+|E2|^2), and their ratio.
    """
    scheme = scheme or SchemeConfig()
    if m0 is None:
        m0 = UniformBox(-1.0, 1.0)
    d = model.dim
    x0 = _initial_points(m0, paths, d)
    shift = np.zeros_like(x0)
    if errors.xi_shift is not None:
        shift = shift + np.asarray(errors.xi_shift, dtype=float)
    base, ok_base = _picard(model, x0, paths, scheme, loo=True)
    if not ok_base:
        raise RuntimeError("unperturbed solve did not converge")
    err = errors.realize(paths.grid, d, paths.horizon)
    pert, ok_pert = _picard(model, x0 + shift, paths, scheme, loo=True, err=err)
    if not ok_pert:
        raise RuntimeError("perturbed solve did not converge")
    dt = paths.dt
    dx2 = np.sum((pert.x_paths - base.x_paths) ** 2, axis=(0, 2))
    dy2 = np.sum((pert.y_paths - base.y_paths) ** 2, axis=(0, 2))
    da2 = np.sum((pert.controls - base.controls) ** 2, axis=(0, 2))
    e1t, e1s, e2t, e2s, e3c, e3s = err
    Xp = pert.x_paths
    S = pert.steps
    e1_sq = 0.0
    e2_sq = 0.0
    for k in range(S):
        e1_real = e1t[k][None, :] + e1s * Xp[:, k, :]
        e2_real = e2t[k][None, :] + e2s * Xp[:, k, :]
        e1_sq += float(np.sum(e1_real**2)) * dt
        e2_sq += float(np.sum(e2_real**2)) * dt
    e3_real = e3c[None, :] + e3s * Xp[:, S, :]
    rhs = float(np.sum(shift**2)) + float(np.sum(e3_real**2)) + e1_sq + e2_sq
    lhs = float(dx2.max()) + float(dy2.max()) + float(np.sum(da2) * dt)
    ratio = lhs / rhs if rhs > 0.0 else 0.0
    return StabilityReport(
        sup_dx2=float(dx2.max()),
        sup_dy2=float(dy2.max()),
        int_da2=float(np.sum(da2) * dt),
        rhs=rhs,
        ratio=ratio,
        n_players=paths.particles,
    )
