import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfglab.measures import (
    EmpiricalMeasure,
    fg_rate,
    leave_one_out,
    wasserstein2,
    wasserstein2_bruteforce,
)


def test_leave_one_out_examples():
    m = EmpiricalMeasure(np.array([[0.0], [1.0]]))
    out = leave_one_out(m, 1)
    np.testing.assert_array_equal(out.x, [[1.0]])

    m3 = EmpiricalMeasure(np.array([[0.0], [1.0], [2.0]]), np.array([[5.0], [6.0], [7.0]]))
    out = leave_one_out(m3, 2)
    np.testing.assert_array_equal(out.x, [[0.0], [2.0]])
    np.testing.assert_array_equal(out.a, [[5.0], [7.0]])


def test_leave_one_out_sizes_and_errors():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(2, 65))
        m = EmpiricalMeasure(rng.standard_normal((n, 2)))
        i = int(rng.integers(1, n + 1))
        assert leave_one_out(m, i).n == n - 1
    with pytest.raises(ValueError):
        leave_one_out(EmpiricalMeasure(np.zeros((1, 1))), 1)
    with pytest.raises(ValueError):
        leave_one_out(EmpiricalMeasure(np.zeros((3, 1))), 0)
    with pytest.raises(ValueError):
        leave_one_out(EmpiricalMeasure(np.zeros((3, 1))), 4)


def test_wasserstein_hand_values():
    x = EmpiricalMeasure(np.array([[1.0, 2.0]]))
    y = EmpiricalMeasure(np.array([[4.0, 6.0]]))
    assert abs(wasserstein2(x, y) - 5.0) <= 1e-15

    a = EmpiricalMeasure(np.array([0.0, 2.0]))
    b = EmpiricalMeasure(np.array([1.0, 3.0]))
    assert abs(wasserstein2(a, b) - 1.0) <= 1e-15
    assert wasserstein2(a, a) == 0.0

    assert wasserstein2_bruteforce(a, b) == wasserstein2(a, b)
    same = EmpiricalMeasure(np.array([0.0, 1.0]))
    assert wasserstein2_bruteforce(same, same) == 0.0


def test_wasserstein_matches_bruteforce():
    rng = np.random.default_rng(42)
    for _ in range(60):
        d = int(rng.integers(1, 4))
        n = int(rng.integers(1, 7))
        mu = EmpiricalMeasure(rng.standard_normal((n, d)))
        nu = EmpiricalMeasure(rng.standard_normal((n, d)))
        assert abs(wasserstein2(mu, nu) - wasserstein2_bruteforce(mu, nu)) <= 1e-12


def test_wasserstein_joint_clouds():
    rng = np.random.default_rng(1)
    mu = EmpiricalMeasure(rng.standard_normal((5, 1)), rng.standard_normal((5, 1)))
    nu = EmpiricalMeasure(rng.standard_normal((5, 1)), rng.standard_normal((5, 1)))
    assert abs(wasserstein2(mu, nu) - wasserstein2_bruteforce(mu, nu)) <= 1e-12


def test_wasserstein_unequal_counts_lcm():
    rng = np.random.default_rng(2)
    mu = EmpiricalMeasure(rng.standard_normal((2, 2)))
    nu = EmpiricalMeasure(rng.standard_normal((3, 2)))
    # replicate by hand to the lcm and compare against the brute-force oracle
    mu6 = EmpiricalMeasure(np.repeat(mu.x, 3, axis=0))
    nu6 = EmpiricalMeasure(np.repeat(nu.x, 2, axis=0))
    assert abs(wasserstein2(mu, nu) - wasserstein2_bruteforce(mu6, nu6)) <= 1e-12


def test_wasserstein_errors():
    with pytest.raises(ValueError):
        wasserstein2(
            EmpiricalMeasure(np.zeros((2, 1))), EmpiricalMeasure(np.zeros((2, 2)))
        )
    with pytest.raises(ValueError):
        # lcm(1023, 1024) far beyond the refinement cap
        wasserstein2(
            EmpiricalMeasure(np.zeros((1023, 2))), EmpiricalMeasure(np.zeros((1024, 2)))
        )
    with pytest.raises(ValueError):
        wasserstein2_bruteforce(
            EmpiricalMeasure(np.zeros((9, 1))), EmpiricalMeasure(np.zeros((9, 1)))
        )
    with pytest.raises(ValueError):
        wasserstein2_bruteforce(
            EmpiricalMeasure(np.zeros((2, 1))), EmpiricalMeasure(np.zeros((3, 1)))
        )


@st.composite
def small_cloud(draw):
    n = draw(st.integers(1, 5))
    d = draw(st.integers(1, 3))
    vals = draw(
        st.lists(
            st.floats(-50, 50, allow_nan=False, allow_infinity=False),
            min_size=n * d,
            max_size=n * d,
        )
    )
    return EmpiricalMeasure(np.array(vals).reshape(n, d))


@settings(max_examples=80, deadline=None)
@given(small_cloud(), small_cloud(), small_cloud())
def test_metric_axioms(mu, nu, rho):
    if not (mu.dim_x == nu.dim_x == rho.dim_x):
        return
    assert wasserstein2(mu, mu) <= 1e-12
    assert abs(wasserstein2(mu, nu) - wasserstein2(nu, mu)) <= 1e-9
    assert wasserstein2(mu, rho) <= wasserstein2(mu, nu) + wasserstein2(nu, rho) + 1e-9


def test_second_moment_and_marginals():
    m = EmpiricalMeasure(np.array([[1.0, 0.0], [0.0, 2.0]]), np.array([[2.0], [0.0]]))
    # (1 + 4)/2 joint with controls: (1+4 + 4+0)/2
    assert m.second_moment() == 4.5
    assert m.x_marginal().second_moment() == 2.5
    assert m.a_marginal().second_moment() == 2.0
    np.testing.assert_allclose(m.mean_x, [0.5, 1.0])
    np.testing.assert_allclose(m.mean_a, [1.0])


def test_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    m = EmpiricalMeasure(rng.standard_normal((4, 2)), rng.standard_normal((4, 2)))
    path = tmp_path / "cloud.csv"
    m.to_csv(path)
    back = EmpiricalMeasure.from_csv(path, 2, 2)
    np.testing.assert_allclose(back.x, m.x, atol=1e-12)
    np.testing.assert_allclose(back.a, m.a, atol=1e-12)

    mx = EmpiricalMeasure(rng.standard_normal((3, 1)))
    path2 = tmp_path / "marginal.csv"
    mx.to_csv(path2)
    np.testing.assert_allclose(EmpiricalMeasure.from_csv(path2, 1).x, mx.x, atol=1e-12)
    with pytest.raises(ValueError):
        EmpiricalMeasure.from_csv(path, 3, 0)


def test_fg_rate_values():
    assert abs(fg_rate(3, 6, 100) - (0.1 + 100 ** (-2.0 / 3.0))) <= 1e-12
    assert abs(fg_rate(3, 6, 100) - 0.1464158883) <= 1e-9
    assert abs(fg_rate(5, 3, 32) - (32**-0.4 + 32 ** (-1.0 / 3.0))) <= 1e-12
    assert abs(fg_rate(5, 3, 32) - 0.5649802625) <= 1e-9
    assert abs(fg_rate(4, 8, 1) - (math.log(2.0) + 1.0)) <= 1e-12


def test_fg_rate_monotone_in_n():
    for d, p in [(1, 3), (3, 6), (4, 8), (5, 3), (8, 2.5)]:
        vals = [fg_rate(d, p, n) for n in (1, 2, 4, 8, 16, 64, 256)]
        assert all(a > b for a, b in zip(vals, vals[1:]))


def test_fg_rate_domain_errors():
    with pytest.raises(ValueError):
        fg_rate(3, 2.0, 10)
    with pytest.raises(ValueError):
        fg_rate(3, 4.0, 10)
    with pytest.raises(ValueError):
        fg_rate(3, 3.0, 10)  # d/(d-2) = 3
    with pytest.raises(ValueError):
        fg_rate(0, 3.0, 10)
    with pytest.raises(ValueError):
        fg_rate(3, 3.5, 0)


def test_leave_one_out_distance_bound():
    # d2^2(m, m^{-i}) <= C/N^2 * sum |points|^2 with one fitted constant
    rng = np.random.default_rng(5)
    fitted = 0.0
    for _ in range(40):
        n = int(rng.integers(4, 33))
        m = EmpiricalMeasure(rng.standard_normal((n, 2)) * rng.uniform(0.5, 3.0))
        i = int(rng.integers(1, n + 1))
        d2 = wasserstein2(m, leave_one_out(m, i))
        ssq = float(np.sum(m.points**2))
        if ssq == 0.0:
            continue
        fitted = max(fitted, d2**2 * n**2 / ssq)
    assert 0.0 < fitted <= 8.0
