"""Empirical measures and exact Wasserstein-2 distances.

Clouds are uniform-weight particle measures, either state-only or joint
state/control.  Distances are exact optimal matchings: a sort for total
dimension one, an assignment solve otherwise, and a brute-force permutation
scan kept as an independent oracle.  fg_rate evaluates the classical
empirical-measure convergence reference rate r_{d,p}(N).
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

# the common-refinement expansion stays exact but cubic; keep it desk scale
_LCM_CAP = 4096


def _cloud(arr, what):
    out = np.asarray(arr, dtype=float)
    if out.ndim == 1:
        out = out.reshape(-1, 1)
    if out.ndim != 2 or out.shape[0] < 1:
        raise ValueError("%s must be an (n, d) array with n >= 1" % what)
    return out


@dataclass
class EmpiricalMeasure:
    """Uniform empirical measure; x is (n, dx), a an optional (n, da)."""

    x: np.ndarray
    a: np.ndarray = None

    def __post_init__(self):
        self.x = _cloud(self.x, "x")
        if self.a is not None:
            self.a = _cloud(self.a, "a")
            if self.a.shape[0] != self.x.shape[0]:
                raise ValueError("x and a must have the same particle count")

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def dim_x(self):
        return self.x.shape[1]

    @property
    def dim_a(self):
        return 0 if self.a is None else self.a.shape[1]

    @property
    def mean_x(self):
        return self.x.mean(axis=0)

    @property
    def mean_a(self):
        assert self.a is not None, "measure carries no control marginal"
        return self.a.mean(axis=0)

    @property
    def points(self):
        """Joint support points, x-coords then a-coords."""
        if self.a is None:
            return self.x
        return np.hstack((self.x, self.a))

    def x_marginal(self):
        return EmpiricalMeasure(self.x)

    def a_marginal(self):
        assert self.a is not None, "measure carries no control marginal"
        return EmpiricalMeasure(self.a)

    def second_moment(self):
        """M2: mean squared norm of the joint support points."""
        return float(np.mean(np.sum(self.points**2, axis=1)))

    def to_csv(self, path):
        np.savetxt(path, self.points, delimiter=",")

    @staticmethod
    def from_csv(path, dim_x, dim_a=0):
        pts = np.loadtxt(path, delimiter=",", ndmin=2)
        if pts.shape[1] != dim_x + dim_a:
            raise ValueError("csv has %d columns, expected %d" % (pts.shape[1], dim_x + dim_a))
        if dim_a == 0:
            return EmpiricalMeasure(pts)
        return EmpiricalMeasure(pts[:, :dim_x], pts[:, dim_x:])


def leave_one_out(m, i):
    """Drop particle i (1-based) from an N-point cloud, N >= 2."""
    n = m.n
    if n < 2:
        raise ValueError("leave_one_out needs at least two particles")
    if not 1 <= i <= n:
        raise ValueError("particle index must lie in 1..%d" % n)
    keep = np.arange(n) != (i - 1)
    if m.a is None:
        return EmpiricalMeasure(m.x[keep])
    return EmpiricalMeasure(m.x[keep], m.a[keep])


def _matched_points(mu, nu):
    P = mu.points
    Q = nu.points
    if P.shape[1] != Q.shape[1]:
        raise ValueError("clouds live in different dimensions")
    n, m = P.shape[0], Q.shape[0]
    if n != m:
        common = math.lcm(n, m)
        if common > _LCM_CAP:
            raise ValueError(
                "common refinement needs %d points, cap is %d" % (common, _LCM_CAP)
            )
        P = np.repeat(P, common // n, axis=0)
        Q = np.repeat(Q, common // m, axis=0)
    return P, Q


def wasserstein2(mu, nu):
    """Exact d2 between two uniform clouds.

    Equal counts are matched exactly (sorting in total dimension one, an
    assignment solve otherwise); unequal counts go through the lcm common
    refinement, which preserves exactness for uniform weights.
    """
    P, Q = _matched_points(mu, nu)
    if P.shape[1] == 1:
        diff = np.sort(P[:, 0]) - np.sort(Q[:, 0])
        return float(np.sqrt(np.mean(diff**2)))
    C = cdist(P, Q, "sqeuclidean")
    rows, cols = linear_sum_assignment(C)
    return float(np.sqrt(C[rows, cols].mean()))


def wasserstein2_bruteforce(mu, nu):
    """Permutation-scan d2 oracle; refuses clouds beyond 8 points."""
    import itertools

    P = mu.points
    Q = nu.points
    if P.shape[1] != Q.shape[1]:
        raise ValueError("clouds live in different dimensions")
    if P.shape[0] != Q.shape[0]:
        raise ValueError("brute force needs equal point counts")
    n = P.shape[0]
    if n > 8:
        raise ValueError("brute force refuses n > 8 (factorial blowup)")
    C = cdist(P, Q, "sqeuclidean")
    best = math.inf
    for perm in itertools.permutations(range(n)):
        cost = 0.0
        for i, j in enumerate(perm):
            cost += C[i, j]
        best = min(best, cost)
    return float(np.sqrt(best / n))


def fg_rate(d, p, N):
    """Empirical-measure W2 reference rate r_{d,p}(N): sampling plus moment tail."""
    if d < 1 or N < 1:
        raise ValueError("need d >= 1 and N >= 1")
    if p <= 2:
        raise ValueError("rate needs p > 2")
    if abs(p - 4.0) < 1e-12:
        raise ValueError("p = 4 is excluded")
    if d > 2 and abs(p - d / (d - 2.0)) < 1e-12:
        raise ValueError("p = d/(d-2) is excluded")
    tail = N ** (-(p - 2.0) / p)
    if d < 4:
        return N**-0.5 + tail
    if d == 4:
        return N**-0.5 * math.log(1.0 + N) + tail
    return N ** (-2.0 / d) + tail
