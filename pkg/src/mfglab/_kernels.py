"""Low-level numerical kernels shared by both backends.

Everything here is written in the numba-compatible subset of numpy (scalars,
ndarrays, flat tuples; explicit loops instead of fancy indexing) and wrapped
with jit_kernel, so the exact same source runs compiled or interpreted.

Cost-model coefficients travel as two flat tuples built by ModelSpec:

    lpack = (ka, caa, kx, cxx, gf, amp, ph, ux, ua, wx, wa)
    gpack = (kg, cg, gfg, ampg, phg, uxg, wxg)

where gf/gfg are int64 arrays selecting the bounded primitive (0 sine,
1 tanh) and the remaining arrays carry one row per smooth term.
"""

import math

import numpy as np

from ._backend import jit_kernel


@jit_kernel
def g_val(kind, z):
    if kind == 0:
        return math.sin(z)
    return math.tanh(z)


@jit_kernel
def g_d1(kind, z):
    if kind == 0:
        return math.cos(z)
    t = math.tanh(z)
    return 1.0 - t * t


@jit_kernel
def g_d2(kind, z):
    if kind == 0:
        return -math.sin(z)
    t = math.tanh(z)
    return -2.0 * t * (1.0 - t * t)


@jit_kernel
def lag_val(x, a, mx, ma, lpack):
    """Running cost at one point, means of the measure given explicitly."""
    ka, caa, kx, cxx, gf, amp, ph, ux, ua, wx, wa = lpack
    d = x.shape[0]
    v = 0.0
    for l in range(d):
        v += 0.5 * kx * x[l] * x[l] + 0.5 * ka * a[l] * a[l]
        v += caa * a[l] * ma[l] + cxx * x[l] * mx[l]
    for t in range(gf.shape[0]):
        z = ph[t]
        for l in range(d):
            z += ux[t, l] * x[l] + ua[t, l] * a[l]
            z += wx[t, l] * mx[l] + wa[t, l] * ma[l]
        v += amp[t] * g_val(gf[t], z)
    return v


@jit_kernel
def da_l(x, a, mx, ma, lpack):
    ka, caa, kx, cxx, gf, amp, ph, ux, ua, wx, wa = lpack
    d = x.shape[0]
    out = np.empty(d)
    for l in range(d):
        out[l] = ka * a[l] + caa * ma[l]
    for t in range(gf.shape[0]):
        z = ph[t]
        for l in range(d):
            z += ux[t, l] * x[l] + ua[t, l] * a[l]
            z += wx[t, l] * mx[l] + wa[t, l] * ma[l]
        gp = amp[t] * g_d1(gf[t], z)
        for l in range(d):
            out[l] += gp * ua[t, l]
    return out


@jit_kernel
def dx_l(x, a, mx, ma, lpack):
    ka, caa, kx, cxx, gf, amp, ph, ux, ua, wx, wa = lpack
    d = x.shape[0]
    out = np.empty(d)
    for l in range(d):
        out[l] = kx * x[l] + cxx * mx[l]
    for t in range(gf.shape[0]):
        z = ph[t]
        for l in range(d):
            z += ux[t, l] * x[l] + ua[t, l] * a[l]
            z += wx[t, l] * mx[l] + wa[t, l] * ma[l]
        gp = amp[t] * g_d1(gf[t], z)
        for l in range(d):
            out[l] += gp * ux[t, l]
    return out


@jit_kernel
def daa_l(x, a, mx, ma, lpack):
    ka, caa, kx, cxx, gf, amp, ph, ux, ua, wx, wa = lpack
    d = x.shape[0]
    out = np.zeros((d, d))
    for l in range(d):
        out[l, l] = ka
    for t in range(gf.shape[0]):
        z = ph[t]
        for l in range(d):
            z += ux[t, l] * x[l] + ua[t, l] * a[l]
            z += wx[t, l] * mx[l] + wa[t, l] * ma[l]
        gpp = amp[t] * g_d2(gf[t], z)
        for l in range(d):
            for m in range(d):
                out[l, m] += gpp * ua[t, l] * ua[t, m]
    return out


@jit_kernel
def g_cost(x, mx, gpack):
    kg, cg, gfg, ampg, phg, uxg, wxg = gpack
    d = x.shape[0]
    v = 0.0
    for l in range(d):
        v += 0.5 * kg * x[l] * x[l] + cg * x[l] * mx[l]
    for t in range(gfg.shape[0]):
        z = phg[t]
        for l in range(d):
            z += uxg[t, l] * x[l] + wxg[t, l] * mx[l]
        v += ampg[t] * g_val(gfg[t], z)
    return v


@jit_kernel
def dx_g(x, mx, gpack):
    kg, cg, gfg, ampg, phg, uxg, wxg = gpack
    d = x.shape[0]
    out = np.empty(d)
    for l in range(d):
        out[l] = kg * x[l] + cg * mx[l]
    for t in range(gfg.shape[0]):
        z = phg[t]
        for l in range(d):
            z += uxg[t, l] * x[l] + wxg[t, l] * mx[l]
        gp = ampg[t] * g_d1(gfg[t], z)
        for l in range(d):
            out[l] += gp * uxg[t, l]
    return out


@jit_kernel
def newton_a(x, p, mx, ma, lpack, tol, max_iters):
    """Solve D_aL(x, a, mu) + p = 0 for a, means frozen.

    Damped Newton with step halving; the quadratic-part solution seeds the
    iteration, so purely quadratic models converge in zero steps.
    Returns (a, residual_inf_norm, iterations, ok).
    """
    ka = lpack[0]
    caa = lpack[1]
    d = x.shape[0]
    a = np.empty(d)
    for l in range(d):
        a[l] = -(p[l] + caa * ma[l]) / ka
    r = da_l(x, a, mx, ma, lpack)
    rn = 0.0
    for l in range(d):
        r[l] += p[l]
        rn = max(rn, abs(r[l]))
    it = 0
    while rn > tol and it < max_iters:
        if d == 1:
            jaa = daa_l(x, a, mx, ma, lpack)[0, 0]
            step = r / jaa
        else:
            step = np.linalg.solve(daa_l(x, a, mx, ma, lpack), r)
        s = 1.0
        accepted = False
        for _half in range(30):
            anew = a - s * step
            rnew = da_l(x, anew, mx, ma, lpack)
            rn_new = 0.0
            for l in range(d):
                rnew[l] += p[l]
                rn_new = max(rn_new, abs(rnew[l]))
            if rn_new < rn:
                a = anew
                r = rnew
                rn = rn_new
                accepted = True
                break
            s *= 0.5
        it += 1
        if not accepted:
            break
    return a, rn, it, rn <= tol


@jit_kernel
def batch_newton(X, P, mx, ma, lpack, tol, max_iters):
    """Per-particle optimal control against a frozen measure (mx, ma)."""
    n = X.shape[0]
    d = X.shape[1]
    A = np.empty((n, d))
    worst = 0.0
    ok = True
    for i in range(n):
        ai, rn, _it, oki = newton_a(X[i], P[i], mx, ma, lpack, tol, max_iters)
        for l in range(d):
            A[i, l] = ai[l]
        worst = max(worst, rn)
        ok = ok and oki
    return A, worst, ok


@jit_kernel
def colsum_canonical(X):
    """Column sums accumulated in sorted order.

    Makes cloud statistics independent of particle order at the bit level,
    so the fixed-point solvers are exactly permutation-equivariant.
    """
    n = X.shape[0]
    d = X.shape[1]
    out = np.empty(d)
    buf = np.empty(n)
    for l in range(d):
        for i in range(n):
            buf[i] = X[i, l]
        b = np.sort(buf)
        s = 0.0
        for i in range(n):
            s += b[i]
        out[l] = s
    return out


@jit_kernel
def phi_sweep(X, Y, A0, lpack, resp_ma, damping, tol, max_iters, newton_tol):
    """Fixed point of the best-response map with full-cloud means.

    resp_ma says whether the best response actually reads <a>; when it does
    not, the map is constant in a and one Newton batch settles it exactly.
    Otherwise: damped Jacobi iteration, halving the damping whenever an
    iteration fails to make headway.  The reported residual
    max_i |a_i - T(a)_i| is measured before the update that follows it, so
    on success it certifies the returned cloud.
    Returns (A, hist, iters, ok).
    """
    n = X.shape[0]
    d = X.shape[1]
    A = A0.copy()
    T = np.empty((n, d))
    hist = np.empty(max_iters)
    ma = np.empty(d)
    mx = colsum_canonical(X)
    for l in range(d):
        mx[l] = mx[l] / n
    if not resp_ma:
        for l in range(d):
            ma[l] = 0.0
        for i in range(n):
            ai, _rn, _nit, oki = newton_a(
                X[i], Y[i], mx, ma, lpack, newton_tol, 50
            )
            if not oki:
                hist[0] = _rn
                return A, hist[:1], 1, False
            for l in range(d):
                T[i, l] = ai[l]
        hist[0] = 0.0
        return T, hist[:1], 1, True
    dampcur = damping
    prev = 1e300
    for it in range(max_iters):
        sa = colsum_canonical(A)
        for l in range(d):
            ma[l] = sa[l] / n
        for i in range(n):
            ai, _rn, _nit, oki = newton_a(
                X[i], Y[i], mx, ma, lpack, newton_tol, 50
            )
            if not oki:
                return A, hist[: it + 1], it + 1, False
            for l in range(d):
                T[i, l] = ai[l]
        res = 0.0
        for i in range(n):
            for l in range(d):
                res = max(res, abs(A[i, l] - T[i, l]))
        hist[it] = res
        if res <= tol:
            return A, hist[: it + 1], it + 1, True
        if res > 0.999 * prev:
            dampcur *= 0.5
        for i in range(n):
            for l in range(d):
                A[i, l] = (1.0 - dampcur) * A[i, l] + dampcur * T[i, l]
        prev = res
    return A, hist, max_iters, False


@jit_kernel
def an_sweep(X, Y, A0, lpack, resp_ma, damping, tol, max_iters, newton_tol):
    """Fixed point of the N-player best response (leave-one-out means)."""
    n = X.shape[0]
    d = X.shape[1]
    A = A0.copy()
    T = np.empty((n, d))
    hist = np.empty(max_iters)
    mxi = np.empty(d)
    mai = np.empty(d)
    sx = colsum_canonical(X)
    if not resp_ma:
        for l in range(d):
            mai[l] = 0.0
        for i in range(n):
            for l in range(d):
                mxi[l] = (sx[l] - X[i, l]) / (n - 1)
            ai, _rn, _nit, oki = newton_a(
                X[i], Y[i], mxi, mai, lpack, newton_tol, 50
            )
            if not oki:
                hist[0] = _rn
                return A, hist[:1], 1, False
            for l in range(d):
                T[i, l] = ai[l]
        hist[0] = 0.0
        return T, hist[:1], 1, True
    dampcur = damping
    prev = 1e300
    for it in range(max_iters):
        sa = colsum_canonical(A)
        for i in range(n):
            for l in range(d):
                mxi[l] = (sx[l] - X[i, l]) / (n - 1)
                mai[l] = (sa[l] - A[i, l]) / (n - 1)
            ai, _rn, _nit, oki = newton_a(
                X[i], Y[i], mxi, mai, lpack, newton_tol, 50
            )
            if not oki:
                return A, hist[: it + 1], it + 1, False
            for l in range(d):
                T[i, l] = ai[l]
        res = 0.0
        for i in range(n):
            for l in range(d):
                res = max(res, abs(A[i, l] - T[i, l]))
        hist[it] = res
        if res <= tol:
            return A, hist[: it + 1], it + 1, True
        if res > 0.999 * prev:
            dampcur *= 0.5
        for i in range(n):
            for l in range(d):
                A[i, l] = (1.0 - dampcur) * A[i, l] + dampcur * T[i, l]
        prev = res
    return A, hist, max_iters, False


@jit_kernel
def features(X, degree):
    """Polynomial regression basis: constant, linear, upper-triangle quadratic."""
    n = X.shape[0]
    d = X.shape[1]
    if degree == 1:
        nf = 1 + d
    else:
        nf = 1 + d + d * (d + 1) // 2
    F = np.empty((n, nf))
    for i in range(n):
        F[i, 0] = 1.0
        for j in range(d):
            F[i, 1 + j] = X[i, j]
        if degree == 2:
            c = 1 + d
            for j in range(d):
                for k in range(j, d):
                    F[i, c] = X[i, j] * X[i, k]
                    c += 1
    return F


@jit_kernel
def feat_grad_dot(X, V, degree):
    """Row i, column f holds grad_x basis_f(X_i) . V_i."""
    n = X.shape[0]
    d = X.shape[1]
    if degree == 1:
        nf = 1 + d
    else:
        nf = 1 + d + d * (d + 1) // 2
    G = np.empty((n, nf))
    for i in range(n):
        G[i, 0] = 0.0
        for j in range(d):
            G[i, 1 + j] = V[i, j]
        if degree == 2:
            c = 1 + d
            for j in range(d):
                for k in range(j, d):
                    G[i, c] = X[i, j] * V[i, k] + X[i, k] * V[i, j]
                    c += 1
    return G


@jit_kernel
def feat_jac(x, degree):
    """Jacobian d basis_f / d x_l of the basis at one point, shape (nf, d)."""
    d = x.shape[0]
    if degree == 1:
        nf = 1 + d
    else:
        nf = 1 + d + d * (d + 1) // 2
    J = np.zeros((nf, d))
    for j in range(d):
        J[1 + j, j] = 1.0
    if degree == 2:
        c = 1 + d
        for j in range(d):
            for k in range(j, d):
                J[c, j] += x[k]
                J[c, k] += x[j]
                c += 1
    return J


@jit_kernel
def forward_sweep(
    x0,
    dW,
    dW0,
    theta,
    degree,
    lpack,
    gpack,
    lam,
    cla,
    loo,
    resp_ma,
    sig_i,
    sig_c,
    dt,
    damping,
    fp_tol,
    fp_max,
    newton_tol,
    e1t,
    e1s,
    e3c,
    e3s,
):
    """One forward Euler pass given a regression representation of Y.

    Time-major inputs: dW (S, M, d) idiosyncratic, dW0 (S, d) common,
    theta (S+1, nf, d).  The per-step control cloud solves the full- or
    leave-one-out-mean best-response fixed point (loo switches), warm
    started from the previous step.  lam scales cost-driven parts for the
    continuation ladder; at lam < 1 an extra -(1-lam)*cla*Y drift keeps the
    system contractive.  e1t/e1s inject a forward drift error, e3c/e3s a
    terminal one.

    Returns (X, A, Yreg, YT, ctrl_res, ok): X (S+1, M, d), controls
    A (S, M, d), Yreg the theta-evaluated Y at every node, YT the exact
    terminal condition at X[S], ctrl_res the worst per-step fixed-point
    certificate.
    """
    S = dW.shape[0]
    M = dW.shape[1]
    d = dW.shape[2]
    X = np.empty((S + 1, M, d))
    A = np.empty((S, M, d))
    Yreg = np.empty((S + 1, M, d))
    for i in range(M):
        for l in range(d):
            X[0, i, l] = x0[i, l]
    Aw = np.zeros((M, d))
    ctrl_res = 0.0
    ok = True
    for k in range(S):
        F = features(X[k], degree)
        Yk = F @ theta[k]
        for i in range(M):
            for l in range(d):
                Yreg[k, i, l] = Yk[i, l]
        if loo:
            Ak, hist, _its, okk = an_sweep(
                X[k], Yk, Aw, lpack, resp_ma, damping, fp_tol, fp_max, newton_tol
            )
        else:
            Ak, hist, _its, okk = phi_sweep(
                X[k], Yk, Aw, lpack, resp_ma, damping, fp_tol, fp_max, newton_tol
            )
        ctrl_res = max(ctrl_res, hist[hist.shape[0] - 1])
        if not okk:
            ok = False
        for i in range(M):
            for l in range(d):
                A[k, i, l] = Ak[i, l]
                Aw[i, l] = Ak[i, l]
                drift = lam * Ak[i, l] - (1.0 - lam) * cla * Yk[i, l]
                drift += e1t[k, l] + e1s * X[k, i, l]
                X[k + 1, i, l] = (
                    X[k, i, l]
                    + drift * dt
                    + sig_i * dW[k, i, l]
                    + sig_c * dW0[k, l]
                )
    F = features(X[S], degree)
    Yk = F @ theta[S]
    for i in range(M):
        for l in range(d):
            Yreg[S, i, l] = Yk[i, l]
    YT = np.empty((M, d))
    mx = np.empty(d)
    if loo:
        sx = np.empty(d)
        for l in range(d):
            s = 0.0
            for i in range(M):
                s += X[S, i, l]
            sx[l] = s
        for i in range(M):
            for l in range(d):
                mx[l] = (sx[l] - X[S, i, l]) / (M - 1)
            gi = dx_g(X[S, i], mx, gpack)
            for l in range(d):
                YT[i, l] = lam * gi[l] + e3c[l] + e3s * X[S, i, l]
    else:
        for l in range(d):
            s = 0.0
            for i in range(M):
                s += X[S, i, l]
            mx[l] = s / M
        for i in range(M):
            gi = dx_g(X[S, i], mx, gpack)
            for l in range(d):
                YT[i, l] = lam * gi[l] + e3c[l] + e3s * X[S, i, l]
    return X, A, Yreg, YT, ctrl_res, ok


@jit_kernel
def backward_sweep(
    X,
    A,
    YT,
    dW,
    dW0,
    degree,
    lpack,
    lam,
    loo,
    sig_i,
    sig_c,
    dt,
    e2t,
    e2s,
):
    """One least-squares backward pass; returns (theta, Ypic).

    Regression target at step k: Y_{k+1} minus the fitted martingale
    increment (previous slope dotted with this step's realized noise, a
    control variate that is unbiased because the slope is evaluated at X_k)
    plus the running-cost gradient times dt.  The terminal row of Ypic keeps
    the exact terminal values; theta[S] is their least-squares projection.
    """
    S = dW.shape[0]
    M = dW.shape[1]
    d = dW.shape[2]
    if degree == 1:
        nf = 1 + d
    else:
        nf = 1 + d + d * (d + 1) // 2
    theta = np.empty((S + 1, nf, d))
    Ypic = np.empty((S + 1, M, d))
    F = features(X[S], degree)
    sol, _res, _rank, _sv = np.linalg.lstsq(F, YT, -1.0)
    for f in range(nf):
        for l in range(d):
            theta[S, f, l] = sol[f, l]
    for i in range(M):
        for l in range(d):
            Ypic[S, i, l] = YT[i, l]
    V = np.empty((M, d))
    T = np.empty((M, d))
    mx = np.empty(d)
    ma = np.empty(d)
    sx = np.empty(d)
    sa = np.empty(d)
    for k in range(S - 1, -1, -1):
        Xk = X[k]
        Ak = A[k]
        F = features(Xk, degree)
        for i in range(M):
            for l in range(d):
                V[i, l] = sig_i * dW[k, i, l] + sig_c * dW0[k, l]
        CV = feat_grad_dot(Xk, V, degree) @ theta[k + 1]
        if loo:
            for l in range(d):
                s = 0.0
                t = 0.0
                for i in range(M):
                    s += Xk[i, l]
                    t += Ak[i, l]
                sx[l] = s
                sa[l] = t
            for i in range(M):
                for l in range(d):
                    mx[l] = (sx[l] - Xk[i, l]) / (M - 1)
                    ma[l] = (sa[l] - Ak[i, l]) / (M - 1)
                dl = dx_l(Xk[i], Ak[i], mx, ma, lpack)
                for l in range(d):
                    T[i, l] = (
                        Ypic[k + 1, i, l]
                        - CV[i, l]
                        + (lam * dl[l] + e2t[k, l] + e2s * Xk[i, l]) * dt
                    )
        else:
            for l in range(d):
                s = 0.0
                t = 0.0
                for i in range(M):
                    s += Xk[i, l]
                    t += Ak[i, l]
                mx[l] = s / M
                ma[l] = t / M
            for i in range(M):
                dl = dx_l(Xk[i], Ak[i], mx, ma, lpack)
                for l in range(d):
                    T[i, l] = (
                        Ypic[k + 1, i, l]
                        - CV[i, l]
                        + (lam * dl[l] + e2t[k, l] + e2s * Xk[i, l]) * dt
                    )
        sol, _res, _rank, _sv = np.linalg.lstsq(F, T, -1.0)
        for f in range(nf):
            for l in range(d):
                theta[k, f, l] = sol[f, l]
        Yk = F @ sol
        for i in range(M):
            for l in range(d):
                Ypic[k, i, l] = Yk[i, l]
    return theta, Ypic


@jit_kernel
def frozen_forward(
    x0, dW, dW0, theta, degree, lpack, mxs, mas, sig_i, sig_c, dt, newton_tol
):
    """Forward simulation against a frozen measure flow and frozen theta.

    mxs/mas (S, d) are the state/control means the particles respond to;
    nothing is re-estimated, so particles are conditionally independent
    copies of the representative player.  Returns (X, A, worst, ok).
    """
    S = dW.shape[0]
    M = dW.shape[1]
    d = dW.shape[2]
    X = np.empty((S + 1, M, d))
    A = np.empty((S, M, d))
    for i in range(M):
        for l in range(d):
            X[0, i, l] = x0[i, l]
    worst = 0.0
    ok = True
    for k in range(S):
        F = features(X[k], degree)
        Yk = F @ theta[k]
        Ak, wk, okk = batch_newton(X[k], Yk, mxs[k], mas[k], lpack, newton_tol, 50)
        worst = max(worst, wk)
        ok = ok and okk
        for i in range(M):
            for l in range(d):
                A[k, i, l] = Ak[i, l]
                X[k + 1, i, l] = (
                    X[k, i, l]
                    + Ak[i, l] * dt
                    + sig_i * dW[k, i, l]
                    + sig_c * dW0[k, l]
                )
    return X, A, worst, ok
