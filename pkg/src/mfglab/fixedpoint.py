"""Best-response fixed points on particle clouds.

Two closely related equations: the measure map Phi, where every particle
responds to the full cloud including itself, and the finite-player profile
a^N, where particle i responds to the leave-one-out cloud of the others.
Both are solved by damped Picard iteration with adaptive damping; the
returned clouds carry a re-application residual no larger than tol.
"""

import numpy as np

from . import _kernels as K
from .measures import EmpiricalMeasure, wasserstein2


class FixedPointError(RuntimeError):
    """Picard iteration failed; .residuals holds the history."""

    def __init__(self, msg, residuals):
        super().__init__(msg)
        self.residuals = np.asarray(residuals)


def _pair(arr, d, what):
    out = np.asarray(arr, dtype=float)
    if out.ndim == 1:
        out = out.reshape(-1, 1)
    if out.ndim != 2 or out.shape[1] != d:
        raise ValueError("%s must be an (n, %d) array" % (what, d))
    return out


def solve_phi(model, nu, damping=0.5, tol=1e-10, max_iters=500):
    """Fixed point of mu -> {(x_i, -D_pH(x_i, y_i, mu))} over the cloud nu.

    nu pairs states with adjoint variables: nu.x are the x_i, nu.a the y_i.
    The returned joint measure keeps the first marginal exactly (same x
    rows) and its controls re-apply to within tol.
    """
    assert nu.a is not None, "nu must pair states with adjoint variables"
    assert 0.0 < damping <= 1.0, "damping must lie in (0, 1]"
    x = _pair(nu.x, model.dim, "nu.x")
    y = _pair(nu.a, model.dim, "nu.a")
    a0 = np.zeros_like(y)
    newton_tol = min(1e-12, 0.01 * tol)
    a, hist, iters, ok = K.phi_sweep(
        x,
        y,
        a0,
        model.lpack,
        model.response_reads_control_mean,
        damping,
        tol,
        max_iters,
        newton_tol,
    )
    if not ok:
        raise FixedPointError(
            "phi iteration did not reach tol %.1e in %d iterations "
            "(last residual %.3e); a smaller damping may help" % (tol, iters, hist[-1]),
            hist,
        )
    return EmpiricalMeasure(x.copy(), a)


def solve_a_n(model, x, p, tol=1e-10, max_iters=500, damping=0.5):
    """Finite-player best responses: a^i = -D_pH(x^i, p^i, leave-one-out cloud).

    Returns the (N, d) control profile, componentwise residual below tol.
    """
    x = _pair(x, model.dim, "x")
    p = _pair(p, model.dim, "p")
    assert x.shape == p.shape, "x and p must have matching shapes"
    assert x.shape[0] >= 2, "finite-player profile needs N >= 2"
    assert 0.0 < damping <= 1.0, "damping must lie in (0, 1]"
    a0 = np.zeros_like(p)
    newton_tol = min(1e-12, 0.01 * tol)
    a, hist, iters, ok = K.an_sweep(
        x,
        p,
        a0,
        model.lpack,
        model.response_reads_control_mean,
        damping,
        tol,
        max_iters,
        newton_tol,
    )
    if not ok:
        raise FixedPointError(
            "a^N iteration did not reach tol %.1e in %d iterations "
            "(last residual %.3e); a smaller damping may help" % (tol, iters, hist[-1]),
            hist,
        )
    return a


def phi_an_discrepancy(model, x, p, tol=1e-10, max_iters=500, damping=0.5):
    """Squared d2 between the Phi cloud and the finite-player cloud on (x, p)."""
    x = _pair(x, model.dim, "x")
    p = _pair(p, model.dim, "p")
    mu_phi = solve_phi(
        model, EmpiricalMeasure(x, p), damping=damping, tol=tol, max_iters=max_iters
    )
    a_n = solve_a_n(model, x, p, tol=tol, max_iters=max_iters, damping=damping)
    return wasserstein2(mu_phi, EmpiricalMeasure(x, a_n)) ** 2


def estimate_lipschitz(map_kind, model, sampler, trials):
    """Worst observed output/input distance ratio over sampled input pairs.

    sampler is a zero-argument callable returning ((x, p), (x_bar, p_bar)).
    For map_kind "phi" both distances are d2 on joint clouds; for "a_n" they
    are root-sum-square over particles.  Pairs at zero input distance are
    skipped.
    """
    assert map_kind in ("phi", "a_n"), "map_kind must be 'phi' or 'a_n'"
    assert trials >= 2, "need at least two trials"
    worst = 0.0
    used = 0
    for _ in range(trials):
        (x, p), (xb, pb) = sampler()
        x = _pair(x, model.dim, "x")
        p = _pair(p, model.dim, "p")
        xb = _pair(xb, model.dim, "x_bar")
        pb = _pair(pb, model.dim, "p_bar")
        if map_kind == "phi":
            d_in = wasserstein2(EmpiricalMeasure(x, p), EmpiricalMeasure(xb, pb))
            if d_in == 0.0:
                continue
            out = solve_phi(model, EmpiricalMeasure(x, p))
            outb = solve_phi(model, EmpiricalMeasure(xb, pb))
            d_out = wasserstein2(out, outb)
        else:
            d_in = float(np.sqrt(np.sum((x - xb) ** 2) + np.sum((p - pb) ** 2)))
            if d_in == 0.0:
                continue
            a = solve_a_n(model, x, p)
            ab = solve_a_n(model, xb, pb)
            d_out = float(np.sqrt(np.sum((a - ab) ** 2)))
        worst = max(worst, d_out / d_in)
        used += 1
    assert used > 0, "all sampled pairs were identical"
    return worst
