"""Cost data for mean field games of controls.

A model is a quadratic core plus a small catalog of bounded smooth
perturbations.  The running cost is

    L(x, a, mu) = kappa_x/2 |x|^2 + kappa_a/2 |a|^2
                  + c_aa a.<a>_mu + c_xx x.<x>_mu + sum of wave terms

and the terminal cost is

    G(x, m) = kappa_g/2 |x|^2 + c_g x.<x>_m + sum of wave terms,

where a wave term is amp * g(u_x.x + u_a.a + w_x.<x> + w_a.<a> + phase)
with g either sine or tanh.  Every derivative the solvers need is analytic,
so regularity is guaranteed by construction instead of promised by user
callables.  The Hamiltonian comes from Legendre duality in the control.
"""

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import _kernels as K

_G_KINDS = {"sin": 0, "tanh": 1}
# sup |g''| per primitive, used for the strict-convexity margin
_G_D2_MAX = {"sin": 1.0, "tanh": 4.0 / (3.0 * math.sqrt(3.0))}


@dataclass(frozen=True)
class SmoothTerm:
    """One bounded perturbation amp * g(u_x.x + u_a.a + w_x.<x> + w_a.<a> + phase).

    target selects the cost it enters: "L" (running) or "G" (terminal).
    Terminal terms must not load on controls (u_a = w_a = 0).
    """

    target: str = "L"
    g: str = "sin"
    amp: float = 0.0
    u_x: tuple = (0.0,)
    u_a: tuple = (0.0,)
    w_x: tuple = (0.0,)
    w_a: tuple = (0.0,)
    phase: float = 0.0


@dataclass(frozen=True)
class InteractionSpec:
    """Coefficients of the mean couplings and the smooth perturbations."""

    c_aa: float = 0.0
    c_xx: float = 0.0
    c_g: float = 0.0
    smooth_terms: tuple = ()


def _vec(v, d, what):
    out = np.atleast_1d(np.asarray(v, dtype=float))
    if out.shape != (d,):
        raise ValueError("%s must have length %d" % (what, d))
    return out


@dataclass
class ModelSpec:
    dim: int = 1
    horizon: float = 1.0
    common_noise: float = 0.0
    kappa_x: float = 0.0
    kappa_a: float = 1.0
    kappa_g: float = 0.0
    interaction: InteractionSpec = field(default_factory=InteractionSpec)

    def __post_init__(self):
        assert self.dim >= 1, "dim must be a positive integer"
        assert self.horizon > 0.0, "horizon must be positive"
        assert self.common_noise >= 0.0, "common_noise must be non-negative"
        assert self.kappa_a > 0.0, "kappa_a must be positive"
        d = self.dim
        margin = self.kappa_a
        for term in self.interaction.smooth_terms:
            if term.target not in ("L", "G"):
                raise ValueError("term target must be 'L' or 'G'")
            if term.g not in _G_KINDS:
                raise ValueError("term primitive must be 'sin' or 'tanh'")
            ux = _vec(term.u_x, d, "u_x")
            ua = _vec(term.u_a, d, "u_a")
            _vec(term.w_x, d, "w_x")
            wa = _vec(term.w_a, d, "w_a")
            if term.target == "G" and (np.any(ua != 0.0) or np.any(wa != 0.0)):
                raise ValueError("terminal terms must not involve controls")
            if term.target == "L":
                margin -= abs(term.amp) * _G_D2_MAX[term.g] * float(ua @ ua)
        # keep D_aa L uniformly positive definite so Newton cannot stall
        assert margin > 0.0, "smooth terms break strict convexity in a"
        self.control_convexity_floor = margin

    @cached_property
    def lpack(self):
        d = self.dim
        terms = [t for t in self.interaction.smooth_terms if t.target == "L"]
        nt = len(terms)
        gf = np.array([_G_KINDS[t.g] for t in terms], dtype=np.int64)
        amp = np.array([t.amp for t in terms], dtype=float)
        ph = np.array([t.phase for t in terms], dtype=float)
        ux = np.zeros((nt, d))
        ua = np.zeros((nt, d))
        wx = np.zeros((nt, d))
        wa = np.zeros((nt, d))
        for j, t in enumerate(terms):
            ux[j] = _vec(t.u_x, d, "u_x")
            ua[j] = _vec(t.u_a, d, "u_a")
            wx[j] = _vec(t.w_x, d, "w_x")
            wa[j] = _vec(t.w_a, d, "w_a")
        return (
            float(self.kappa_a),
            float(self.interaction.c_aa),
            float(self.kappa_x),
            float(self.interaction.c_xx),
            gf,
            amp,
            ph,
            ux,
            ua,
            wx,
            wa,
        )

    @cached_property
    def gpack(self):
        d = self.dim
        terms = [t for t in self.interaction.smooth_terms if t.target == "G"]
        nt = len(terms)
        gf = np.array([_G_KINDS[t.g] for t in terms], dtype=np.int64)
        amp = np.array([t.amp for t in terms], dtype=float)
        ph = np.array([t.phase for t in terms], dtype=float)
        ux = np.zeros((nt, d))
        wx = np.zeros((nt, d))
        for j, t in enumerate(terms):
            ux[j] = _vec(t.u_x, d, "u_x")
            wx[j] = _vec(t.w_x, d, "w_x")
        return (
            float(self.kappa_g),
            float(self.interaction.c_g),
            gf,
            amp,
            ph,
            ux,
            wx,
        )

    @cached_property
    def reads_control_mean(self):
        """Whether the cost value itself involves <a>."""
        if self.interaction.c_aa != 0.0:
            return True
        for t in self.interaction.smooth_terms:
            if t.target == "L" and np.any(_vec(t.w_a, self.dim, "w_a") != 0.0):
                return True
        return False

    @cached_property
    def response_reads_control_mean(self):
        """Whether the best response (through D_aL) involves <a>.

        False makes the best-response maps constant in the control cloud, so
        the fixed-point solvers settle them in a single Newton batch.
        """
        if self.interaction.c_aa != 0.0:
            return True
        d = self.dim
        for t in self.interaction.smooth_terms:
            if t.target != "L":
                continue
            if np.any(_vec(t.u_a, d, "u_a") != 0.0) and np.any(
                _vec(t.w_a, d, "w_a") != 0.0
            ):
                return True
        return False


def _point(v, d, what):
    out = np.asarray(v, dtype=float)
    if out.ndim == 0:
        out = out.reshape(1)
    if out.shape != (d,):
        raise ValueError("%s must be a point of length %d" % (what, d))
    return out


def _measure_means(model, mu):
    """State and control means the cost formulas read off the measure."""
    d = model.dim
    mx = np.asarray(mu.mean_x, dtype=float)
    if mx.shape != (d,):
        raise ValueError("measure state dimension does not match the model")
    if mu.a is not None:
        ma = np.asarray(mu.mean_a, dtype=float)
        if ma.shape != (d,):
            raise ValueError("measure control dimension does not match the model")
    else:
        if model.reads_control_mean:
            raise ValueError("model couples through <a> but measure has no controls")
        ma = np.zeros(d)
    return mx, ma


def lagrangian(model, x, a, mu):
    """Running cost L(x, a, mu)."""
    d = model.dim
    x = _point(x, d, "x")
    a = _point(a, d, "a")
    mx, ma = _measure_means(model, mu)
    return float(K.lag_val(x, a, mx, ma, model.lpack))


def d_a_L(model, x, a, mu):
    x = _point(x, model.dim, "x")
    a = _point(a, model.dim, "a")
    mx, ma = _measure_means(model, mu)
    return K.da_l(x, a, mx, ma, model.lpack)


def d_x_L(model, x, a, mu):
    x = _point(x, model.dim, "x")
    a = _point(a, model.dim, "a")
    mx, ma = _measure_means(model, mu)
    return K.dx_l(x, a, mx, ma, model.lpack)


def terminal_cost(model, x, m):
    """Terminal cost G(x, m); m may be a joint measure, only <x> is read."""
    x = _point(x, model.dim, "x")
    mx = np.asarray(m.mean_x, dtype=float)
    if mx.shape != (model.dim,):
        raise ValueError("measure state dimension does not match the model")
    return float(K.g_cost(x, mx, model.gpack))


def d_x_G(model, x, m):
    x = _point(x, model.dim, "x")
    mx = np.asarray(m.mean_x, dtype=float)
    if mx.shape != (model.dim,):
        raise ValueError("measure state dimension does not match the model")
    return K.dx_g(x, mx, model.gpack)


def optimal_control(model, x, p, mu, newton_tol=1e-12, max_iters=50):
    """Minimizer of a -> a.p + L(x, a, mu), by damped Newton.

    The stationarity residual |D_aL(x, a*, mu) + p| is driven below
    newton_tol; failure raises RuntimeError with the last residual.
    """
    x = _point(x, model.dim, "x")
    p = _point(p, model.dim, "p")
    mx, ma = _measure_means(model, mu)
    a, res, iters, ok = K.newton_a(x, p, mx, ma, model.lpack, newton_tol, max_iters)
    if not ok:
        raise RuntimeError(
            "optimal_control Newton stalled after %d iterations, residual %.3e"
            % (iters, res)
        )
    return a


def hamiltonian(model, x, p, mu):
    """H(x, p, mu) = sup_a { -a.p - L(x, a, mu) }."""
    a = optimal_control(model, x, p, mu)
    p = _point(p, model.dim, "p")
    return float(-a @ p - lagrangian(model, x, a, mu))


def grad_p_H(model, x, p, mu):
    """D_p H = -a*, by the envelope theorem."""
    return -optimal_control(model, x, p, mu)


def grad_x_H(model, x, p, mu):
    """D_x H = -D_x L at the optimal control, same code path as d_x_L."""
    a = optimal_control(model, x, p, mu)
    return -d_x_L(model, x, a, mu)


def grad_mu_H(model, x, p, mu, y):
    """Measure derivative of H at support point y, as an (x-part, a-part) pair.

    Equals -D_mu L(x, a*, mu)(y); for the mean-coupled catalog the value is
    constant in y, but y is validated against the measure's joint dimension.
    """
    d = model.dim
    x = _point(x, d, "x")
    a = optimal_control(model, x, p, mu)
    mx, ma = _measure_means(model, mu)
    joint = d + (d if mu.a is not None else 0)
    y = np.asarray(y, dtype=float)
    if y.ndim == 0:
        y = y.reshape(1)
    if y.shape != (joint,):
        raise ValueError("y must be a support point of length %d" % joint)
    ka, caa, kx, cxx, gf, amp, ph, ux, ua, wx, wa = model.lpack
    vx = cxx * x.copy()
    va = caa * a.copy()
    for t in range(gf.shape[0]):
        z = ph[t] + ux[t] @ x + ua[t] @ a + wx[t] @ mx + wa[t] @ ma
        gp = amp[t] * K.g_d1(int(gf[t]), float(z))
        vx += gp * wx[t]
        va += gp * wa[t]
    return -vx, -va


def flat_d_L(model, x, a, mu, y):
    """Centered flat derivative of mu -> L(x, a, mu) at support point y."""
    d = model.dim
    x = _point(x, d, "x")
    a = _point(a, d, "a")
    mx, ma = _measure_means(model, mu)
    joint = d + (d if mu.a is not None else 0)
    y = np.asarray(y, dtype=float)
    if y.ndim == 0:
        y = y.reshape(1)
    if y.shape != (joint,):
        raise ValueError("y must be a support point of length %d" % joint)
    yx = y[:d]
    ya = y[d:] if joint > d else np.zeros(d)
    ka, caa, kx, cxx, gf, amp, ph, ux, ua, wx, wa = model.lpack
    v = cxx * float(x @ (yx - mx)) + caa * float(a @ (ya - ma))
    for t in range(gf.shape[0]):
        z = ph[t] + ux[t] @ x + ua[t] @ a + wx[t] @ mx + wa[t] @ ma
        gp = amp[t] * K.g_d1(int(gf[t]), float(z))
        v += gp * (float(wx[t] @ (yx - mx)) + float(wa[t] @ (ya - ma)))
    return v


def flat_d_G(model, x, m, y):
    """Centered flat derivative of m -> G(x, m) at support point y."""
    d = model.dim
    x = _point(x, d, "x")
    mx = np.asarray(m.mean_x, dtype=float)
    if mx.shape != (d,):
        raise ValueError("measure state dimension does not match the model")
    y = np.asarray(y, dtype=float)
    if y.ndim == 0:
        y = y.reshape(1)
    yx = y[:d]
    kg, cg, gf, amp, ph, ux, wx = model.gpack
    v = cg * float(x @ (yx - mx))
    for t in range(gf.shape[0]):
        z = ph[t] + ux[t] @ x + wx[t] @ mx
        gp = amp[t] * K.g_d1(int(gf[t]), float(z))
        v += gp * float(wx[t] @ (yx - mx))
    return v
