import numpy as np
import pytest

from mfglab import model as mdl
from mfglab.fixedpoint import (
    FixedPointError,
    estimate_lipschitz,
    phi_an_discrepancy,
    solve_a_n,
    solve_phi,
)
from mfglab.measures import EmpiricalMeasure
from mfglab.model import InteractionSpec, ModelSpec, SmoothTerm


def coupled_model(c_aa=0.5, dim=1):
    return ModelSpec(
        dim=dim, kappa_a=1.0, interaction=InteractionSpec(c_aa=c_aa, c_xx=0.2)
    )


def test_phi_hand_example():
    m = ModelSpec(dim=1, kappa_a=1.0, interaction=InteractionSpec(c_aa=1.0))
    nu = EmpiricalMeasure(np.array([[0.0], [1.0]]), np.array([[0.0], [2.0]]))
    out = solve_phi(m, nu)
    np.testing.assert_allclose(out.a.ravel(), [0.5, -1.5], atol=1e-9)
    np.testing.assert_allclose(out.mean_a, [-0.5], atol=1e-9)


def test_phi_separable_is_pushforward():
    rng = np.random.default_rng(0)
    m = ModelSpec(dim=2, kappa_a=1.0, kappa_x=0.5)
    y = rng.standard_normal((6, 2))
    nu = EmpiricalMeasure(rng.standard_normal((6, 2)), y)
    out = solve_phi(m, nu)
    # constant best response: exact in one Newton batch
    np.testing.assert_array_equal(out.a, -y)


def test_phi_first_marginal_exact():
    rng = np.random.default_rng(1)
    m = coupled_model()
    x = rng.standard_normal((8, 1))
    nu = EmpiricalMeasure(x, rng.standard_normal((8, 1)))
    out = solve_phi(m, nu)
    np.testing.assert_array_equal(out.x, x)


def test_phi_reapplication_certificate():
    rng = np.random.default_rng(2)
    m = coupled_model(c_aa=0.8)
    nu = EmpiricalMeasure(rng.standard_normal((12, 1)), rng.standard_normal((12, 1)))
    out = solve_phi(m, nu, tol=1e-10)
    for i in range(out.n):
        best = mdl.optimal_control(m, out.x[i], nu.a[i], out)
        assert np.max(np.abs(out.a[i] - best)) <= 1e-10


def test_a_n_hand_example():
    m = ModelSpec(dim=1, kappa_a=1.0, interaction=InteractionSpec(c_aa=0.5))
    a = solve_a_n(m, np.zeros((2, 1)), np.array([[1.0], [0.0]]))
    np.testing.assert_allclose(a.ravel(), [-4.0 / 3.0, 2.0 / 3.0], atol=1e-9)


def test_a_n_separable():
    rng = np.random.default_rng(3)
    m = ModelSpec(dim=1, kappa_a=1.0)
    p = rng.standard_normal((5, 1))
    np.testing.assert_array_equal(solve_a_n(m, rng.standard_normal((5, 1)), p), -p)


def test_a_n_reapplication_certificate():
    rng = np.random.default_rng(4)
    m = coupled_model(c_aa=0.7)
    x = rng.standard_normal((10, 1))
    p = rng.standard_normal((10, 1))
    a = solve_a_n(m, x, p, tol=1e-10)
    from mfglab.measures import leave_one_out

    cloud = EmpiricalMeasure(x, a)
    for i in range(10):
        best = mdl.optimal_control(m, x[i], p[i], leave_one_out(cloud, i + 1))
        assert np.max(np.abs(a[i] - best)) <= 1e-10


def test_a_n_exchangeability():
    rng = np.random.default_rng(5)
    m = coupled_model(c_aa=0.6)
    x = rng.standard_normal((7, 1))
    p = rng.standard_normal((7, 1))
    a = solve_a_n(m, x, p)
    for _ in range(5):
        sigma = rng.permutation(7)
        a_perm = solve_a_n(m, x[sigma], p[sigma])
        np.testing.assert_array_equal(a_perm, a[sigma])


def test_discrepancy_separable_and_small():
    rng = np.random.default_rng(6)
    m = ModelSpec(dim=1, kappa_a=1.0)
    x = rng.standard_normal((16, 1))
    p = rng.standard_normal((16, 1))
    assert phi_an_discrepancy(m, x, p) <= 1e-10


def test_discrepancy_scaling_of_bound():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((8, 1))
    p = rng.standard_normal((8, 1))
    rhs = float(np.sum(x**2) + np.sum(p**2))
    rhs2 = float(np.sum((2 * x) ** 2) + np.sum((2 * p) ** 2))
    assert rhs2 == 4.0 * rhs


def _ols_slope(xs, ys):
    xs = np.log(np.asarray(xs, dtype=float))
    ys = np.log(np.asarray(ys, dtype=float))
    xc = xs - xs.mean()
    return float((xc @ (ys - ys.mean())) / (xc @ xc))


def test_discrepancy_decay_slope():
    # N^2 * disc / Sigma should decay like 1/N once disc is d2^2
    rng = np.random.default_rng(8)
    m = coupled_model(c_aa=0.5)
    ns = [8, 16, 32, 64]
    means = []
    for n in ns:
        vals = []
        for _ in range(10):
            x = rng.standard_normal((n, 1))
            p = rng.standard_normal((n, 1))
            disc = phi_an_discrepancy(m, x, p)
            sigma = float(np.sum(x**2) + np.sum(p**2))
            vals.append(n * disc / (sigma / n))
        means.append(np.mean(vals))
    slope = _ols_slope(ns, means)
    assert abs(slope + 1.0) <= 0.3


def test_lipschitz_phi_ratio_one():
    rng = np.random.default_rng(9)
    m = ModelSpec(dim=1, kappa_a=1.0)

    def sampler():
        x = rng.standard_normal((6, 1))
        return (x, rng.standard_normal((6, 1))), (x, rng.standard_normal((6, 1)))

    r = estimate_lipschitz("phi", m, sampler, trials=10)
    assert abs(r - 1.0) <= 1e-14


def test_lipschitz_a_n_ratio_half():
    rng = np.random.default_rng(10)
    m = ModelSpec(dim=1, kappa_a=2.0)

    def sampler():
        x = rng.standard_normal((6, 1))
        return (x, rng.standard_normal((6, 1))), (x, rng.standard_normal((6, 1)))

    r = estimate_lipschitz("a_n", m, sampler, trials=10)
    assert abs(r - 0.5) <= 1e-15


def test_lipschitz_grows_with_coupling():
    # mean-centered control differences isolate the direction whose response
    # gain is 1/(kappa_a - c/(N-1)), strictly increasing in the coupling
    pairs = []
    rng = np.random.default_rng(11)
    for _ in range(8):
        x = rng.standard_normal((6, 1))
        p = rng.standard_normal((6, 1))
        dp = rng.standard_normal((6, 1))
        dp -= dp.mean()
        pairs.append(((x, p), (x, p + dp)))
    fitted = []
    for c in (0.0, 0.3, 0.6):
        m = ModelSpec(dim=1, kappa_a=1.0, interaction=InteractionSpec(c_aa=c))
        it = iter(pairs)
        fitted.append(estimate_lipschitz("a_n", m, lambda: next(it), trials=len(pairs)))
    assert np.isfinite(fitted).all()
    assert fitted[0] < fitted[1] < fitted[2]


def test_divergence_reports_history():
    nu = EmpiricalMeasure(np.array([[0.0], [1.0]]), np.array([[0.0], [2.0]]))
    bad = ModelSpec(dim=1, kappa_a=1.0, interaction=InteractionSpec(c_aa=-5.0))
    with pytest.raises(FixedPointError) as exc:
        solve_phi(bad, nu, max_iters=200)
    assert len(exc.value.residuals) == 200
    with pytest.raises(FixedPointError):
        solve_a_n(bad, np.zeros((4, 1)), np.ones((4, 1)), max_iters=200)


def test_input_contracts():
    m = coupled_model()
    with pytest.raises(AssertionError):
        solve_phi(m, EmpiricalMeasure(np.zeros((3, 1))))
    with pytest.raises(AssertionError):
        solve_a_n(m, np.zeros((1, 1)), np.zeros((1, 1)))
    with pytest.raises(AssertionError):
        solve_phi(m, EmpiricalMeasure(np.zeros((3, 1)), np.zeros((3, 1))), damping=0.0)
