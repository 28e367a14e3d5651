"""Path bundles, the two particle solvers, continuation, and stability."""

import json
import math

import numpy as np
import pytest

from mfglab import fbsde
from mfglab.model import InteractionSpec, ModelSpec


def zero_cost_model(sigma0=0.3):
    # no running state cost, no terminal cost, no interaction
    return ModelSpec(dim=1, horizon=1.0, common_noise=sigma0, kappa_a=1.0)


def decoupled_lq():
    # kappa_a = kappa_g = 1, T = 1: adjoint slope P(0) = 1/(2 - 0) = 0.5
    return ModelSpec(dim=1, horizon=1.0, kappa_a=1.0, kappa_g=1.0)


def coupled_lq():
    return ModelSpec(
        dim=1,
        horizon=1.0,
        kappa_x=0.3,
        kappa_a=1.0,
        kappa_g=0.8,
        interaction=InteractionSpec(c_aa=0.4, c_xx=0.2, c_g=0.3),
    )


@pytest.fixture(scope="module")
def coupled_solution():
    model = coupled_lq()
    paths = fbsde.generate_paths(11, 8, 100, model)
    return model, paths, fbsde.solve_nplayer(model, fbsde.UniformBox(-1.0, 1.0), paths)


@pytest.fixture(scope="module")
def decoupled_solution():
    model = decoupled_lq()
    paths = fbsde.generate_paths(3, 64, 200, model)
    return model, paths, fbsde.solve_meanfield(model, fbsde.UniformBox(0.5, 1.5), paths)


def test_bundle_reproducible_and_width_coupled():
    model = zero_cost_model()
    big = fbsde.generate_paths(7, 16, 50, model)
    again = fbsde.generate_paths(7, 16, 50, model)
    assert np.array_equal(big.idio_increments, again.idio_increments)
    assert np.array_equal(big.common_increments, again.common_increments)
    assert np.array_equal(big.initial_uniforms, again.initial_uniforms)
    # a narrower bundle from the same seed shares the leading streams
    small = fbsde.generate_paths(7, 5, 50, model)
    assert np.array_equal(small.idio_increments, big.idio_increments[:5])
    assert np.array_equal(small.common_increments, big.common_increments)
    assert small.stream_checksum(0) == big.stream_checksum(0)
    assert small.stream_checksum(3) == big.stream_checksum(3)
    sub = big.subset(5)
    assert np.array_equal(sub.idio_increments, small.idio_increments)
    assert sub.stream_checksum(5) == small.stream_checksum(5)
    assert big.grid[0] == 0.0 and big.grid[-1] == 1.0
    assert big.dt == pytest.approx(0.02)
    assert big.particles == 16 and big.steps == 50 and big.dim == 1


def test_bundle_variance_within_five_se():
    # 1e5 idiosyncratic draws
    paths = fbsde.generate_paths(123, 1000, 100, zero_cost_model())
    assert float(paths.variance_zscores().max()) < 5.0


def test_initial_samplers():
    paths = fbsde.generate_paths(3, 200, 10, zero_cost_model())
    box = fbsde.UniformBox(-2.0, 1.0)
    x = box.sample(paths)
    assert x.shape == (200, 1)
    assert x.min() >= -2.0 and x.max() <= 1.0
    assert np.array_equal(x, box.sample(paths))
    tg = fbsde.TruncatedGauss(0.5, 1.0, -1.0, 2.0)
    y = tg.sample(paths)
    assert y.min() >= -1.0 and y.max() <= 2.0
    # inverse CDF consumes the bundle uniform directly
    from scipy.special import ndtr, ndtri

    a = ndtr((-1.0 - 0.5) / 1.0)
    b = ndtr((2.0 - 0.5) / 1.0)
    want = 0.5 + ndtri(a + paths.initial_uniforms * (b - a))
    assert np.allclose(y, want, atol=0.0)


def test_explicit_initial_points_accepted():
    model = decoupled_lq()
    paths = fbsde.generate_paths(5, 4, 20, model)
    x0 = np.array([0.1, 0.4, -0.2, 0.9])
    sol = fbsde.solve_meanfield(model, x0, paths)
    assert np.array_equal(sol.x_paths[:, 0, 0], x0)
    with pytest.raises(AssertionError):
        fbsde.solve_meanfield(model, np.zeros((3, 1)), paths)


def test_zero_cost_solution_is_pathwise_explicit():
    model = zero_cost_model(sigma0=0.3)
    paths = fbsde.generate_paths(7, 16, 50, model)
    m0 = fbsde.UniformBox(-1.0, 1.0)
    sol = fbsde.solve_meanfield(model, m0, paths)
    assert sol.iterations == 2 and sol.converged
    assert float(np.abs(sol.y_paths).max()) == 0.0
    assert float(np.abs(sol.controls).max()) == 0.0
    assert sol.terminal_residual == 0.0
    # X = xi + sqrt(2) W + sqrt(2 sigma0) W0, exactly as the scheme adds it
    si = math.sqrt(2.0)
    sc = math.sqrt(2.0 * 0.3)
    x = m0.sample(paths)
    assert np.array_equal(sol.x_paths[:, 0, :], x)
    for k in range(paths.steps):
        x = x + si * paths.idio_increments[:, k, :] + sc * paths.common_increments[k]
        assert np.array_equal(sol.x_paths[:, k + 1, :], x)


def test_zero_cost_two_players():
    model = zero_cost_model(sigma0=0.0)
    paths = fbsde.generate_paths(21, 2, 30, model)
    sol = fbsde.solve_nplayer(model, np.array([[0.3], [-0.7]]), paths)
    assert float(np.abs(sol.y_paths).max()) == 0.0
    want = np.array([0.3, -0.7]).reshape(2, 1, 1) + math.sqrt(2.0) * np.cumsum(
        paths.idio_increments, axis=1
    )
    assert np.allclose(sol.x_paths[:, 1:, :], want, atol=1e-12)


def test_meanfield_adjoint_matches_linear_feedback(decoupled_solution):
    # Y0 = P(0) X0 with P(0) = 0.5; bias is O(dt)
    _model, _paths, sol = decoupled_solution
    assert sol.converged
    ratio = sol.y_paths[:, 0, 0] / sol.x_paths[:, 0, 0]
    assert np.all(np.abs(ratio - 0.5) < 1e-4)
    assert sol.terminal_residual <= 1e-12
    # control = -Y throughout for kappa_a = 1
    assert np.allclose(sol.controls, -sol.y_paths[:, :-1, :], atol=1e-12)


def test_measure_flow_satisfies_fixed_point(coupled_solution):
    from mfglab.measures import leave_one_out
    from mfglab.model import optimal_control

    model, paths, sol = coupled_solution
    assert sol.control_residual <= 1e-9
    for k in (0, 50, 99):
        flow = sol.measure_flow(k)
        for i in range(sol.particles):
            mu = leave_one_out(flow, i + 1)
            a = optimal_control(model, sol.x_paths[i, k], sol.y_paths[i, k], mu)
            assert np.max(np.abs(a - sol.controls[i, k])) < 1e-8
    terminal = sol.measure_flow(sol.steps)
    assert terminal.a is None
    assert terminal.n == sol.particles


def test_solution_deterministic_bitwise():
    model = coupled_lq()
    paths = fbsde.generate_paths(11, 8, 100, model)
    a = fbsde.solve_nplayer(model, fbsde.UniformBox(-1.0, 1.0), paths)
    b = fbsde.solve_nplayer(model, fbsde.UniformBox(-1.0, 1.0), paths)
    assert np.array_equal(a.x_paths, b.x_paths)
    assert np.array_equal(a.y_paths, b.y_paths)
    assert np.array_equal(a.controls, b.controls)
    assert np.array_equal(a.z_repr, b.z_repr)


def test_picard_residuals_decrease_monotonically(coupled_solution):
    _model, _paths, sol = coupled_solution
    hist = sol.residual_history
    assert len(hist) >= 3
    assert np.all(np.diff(hist) < 0.0)
    assert hist[-1] <= 1e-8


def test_relabeling_particles_relabels_the_solution():
    # exact up to regression round-off: least-squares row order is not
    # bit-invariant under permutation
    model = coupled_lq()
    paths = fbsde.generate_paths(11, 8, 100, model)
    x0 = fbsde.UniformBox(-1.0, 1.0).sample(paths)
    perm = np.random.default_rng(0).permutation(8)
    permuted = fbsde.PathBundle(
        paths.seed,
        paths.grid,
        paths.idio_increments[perm],
        paths.common_increments,
        paths.initial_uniforms[perm],
    )
    s1 = fbsde.solve_nplayer(model, x0, paths)
    s2 = fbsde.solve_nplayer(model, x0[perm], permuted)
    assert np.max(np.abs(s2.x_paths - s1.x_paths[perm])) < 1e-12
    assert np.max(np.abs(s2.y_paths - s1.y_paths[perm])) < 1e-12
    assert np.max(np.abs(s2.controls - s1.controls[perm])) < 1e-12


def test_continuation_agrees_with_direct_solve():
    model = coupled_lq()
    paths = fbsde.generate_paths(11, 8, 100, model)
    m0 = fbsde.UniformBox(-1.0, 1.0)
    direct = fbsde.solve_meanfield(model, m0, paths)
    homotopy = fbsde.solve_continuation(model, m0, paths, lambda_steps=5)
    assert len(homotopy.lambda_iterations) == 5
    assert np.max(np.abs(homotopy.x_paths - direct.x_paths)) < 1e-4
    assert np.max(np.abs(homotopy.y_paths - direct.y_paths)) < 1e-4


def test_finer_ladder_makes_rungs_cheaper():
    model = coupled_lq()
    paths = fbsde.generate_paths(11, 8, 100, model)
    m0 = fbsde.UniformBox(-1.0, 1.0)
    maxes = []
    means = []
    for steps in (2, 5, 10):
        sol = fbsde.solve_continuation(model, m0, paths, lambda_steps=steps)
        maxes.append(max(sol.lambda_iterations))
        means.append(float(np.mean(sol.lambda_iterations)))
    assert maxes[0] > maxes[1] > maxes[2]
    assert means[0] > means[1] > means[2]


def test_continuation_stall_reports_progress():
    model = coupled_lq()
    paths = fbsde.generate_paths(11, 8, 100, model)
    scheme = fbsde.SchemeConfig(picard_max=2, picard_tol=1e-15)
    with pytest.raises(fbsde.ContinuationError) as err:
        fbsde.solve_continuation(
            model, fbsde.UniformBox(-1.0, 1.0), paths, lambda_steps=3, scheme=scheme
        )
    assert err.value.lambda_reached == 0.0
    assert "lambda" in str(err.value)


def test_picard_failure_points_to_continuation():
    model = coupled_lq()
    paths = fbsde.generate_paths(11, 8, 100, model)
    scheme = fbsde.SchemeConfig(picard_max=2, picard_tol=1e-15)
    with pytest.raises(RuntimeError, match="solve_continuation"):
        fbsde.solve_meanfield(model, fbsde.UniformBox(-1.0, 1.0), paths, scheme)


def test_decoupling_field_recovers_riccati_slope(decoupled_solution):
    _model, _paths, sol = decoupled_solution
    with pytest.warns(UserWarning, match="collinear"):
        field = fbsde.regress_decoupling_field(sol)
    assert not field.kept_moments
    slope = field.coeffs[0][1, 0]
    assert abs(slope - 0.5) < 0.005
    assert float(field.rel_residual.max()) < 1e-10
    assert float(np.abs(field.moment_coeffs).max()) == 0.0
    # evaluate() reproduces the in-sample fit
    got = field.evaluate(0, sol.x_paths[:, 0, :])
    assert np.allclose(got, sol.y_paths[:, 0, :], atol=1e-10)


def test_decoupling_field_vanishes_for_zero_cost():
    model = zero_cost_model()
    paths = fbsde.generate_paths(7, 32, 50, model)
    sol = fbsde.solve_meanfield(model, fbsde.UniformBox(-1.0, 1.0), paths)
    with pytest.warns(UserWarning):
        field = fbsde.regress_decoupling_field(sol)
    assert float(np.abs(field.coeffs).max()) <= 1e-8


def test_decoupling_field_linear_growth(decoupled_solution):
    _model, _paths, sol = decoupled_solution
    with pytest.warns(UserWarning):
        field = fbsde.regress_decoupling_field(sol)
    m2 = math.sqrt(sol.measure_flow(0).second_moment())
    xs = np.linspace(-10.0, 10.0, 101).reshape(-1, 1)
    vals = field.evaluate(0, xs)
    fitted_c = float(
        np.max(np.abs(vals[:, 0]) / (1.0 + np.abs(xs[:, 0]) + m2))
    )
    assert fitted_c < 1.0


def test_stability_report_zero_for_no_errors():
    model = coupled_lq()
    paths = fbsde.generate_paths(11, 8, 50, model)
    rep = fbsde.perturbed_stability_experiment(model, paths, fbsde.ErrorSpec())
    assert rep.sup_dx2 == 0.0 and rep.sup_dy2 == 0.0 and rep.int_da2 == 0.0
    assert rep.rhs == 0.0 and rep.ratio == 0.0


def test_stability_ratio_stable_across_population_sizes():
    model = coupled_lq()
    ratios = []
    for n in (4, 8, 16, 32):
        paths = fbsde.generate_paths(11, n, 50, model)
        spec = fbsde.ErrorSpec(xi_shift=0.05)
        rep = fbsde.perturbed_stability_experiment(model, paths, spec)
        ratios.append(rep.ratio)
    assert max(ratios) / min(ratios) < 2.0


def test_stability_scales_quadratically_in_error_size():
    model = coupled_lq()
    paths = fbsde.generate_paths(11, 8, 50, model)
    eps = np.array([1e-3, 1e-2, 1e-1])
    lhs = []
    for e in eps:
        spec = fbsde.ErrorSpec(e1=fbsde.ConstantError(e))
        rep = fbsde.perturbed_stability_experiment(model, paths, spec)
        lhs.append(rep.sup_dx2 + rep.sup_dy2 + rep.int_da2)
    slope = np.polyfit(np.log(eps), np.log(lhs), 1)[0]
    assert abs(slope - 2.0) < 0.2


def test_error_catalog_realization():
    grid = np.linspace(0.0, 1.0, 11)
    spec = fbsde.ErrorSpec(
        e1=(fbsde.ConstantError(0.01), fbsde.StateProportionalError(0.02)),
        e2=fbsde.SinusoidError(0.05, 3.0, 0.2),
        e3=fbsde.ConstantError([0.3]),
    )
    e1t, e1s, e2t, e2s, e3c, e3s = spec.realize(grid, 1, 1.0)
    assert np.allclose(e1t, 0.01) and e1s == 0.02
    assert float(np.abs(e2t).max()) <= 0.05 and e2s == 0.0
    assert np.allclose(e2t[:, 0], 0.05 * np.sin(3.0 * grid[:-1] + 0.2))
    assert np.allclose(e3c, [0.3]) and e3s == 0.0
    with pytest.raises(ValueError):
        fbsde.SinusoidError(0.1, 1.0).terminal(1)


def test_fourth_moments_stable_as_population_grows():
    model = ModelSpec(dim=1, horizon=1.0, common_noise=0.2, kappa_a=1.0, kappa_g=1.0)
    sups = []
    for m in (64, 128, 256):
        paths = fbsde.generate_paths(5, m, 50, model)
        sol = fbsde.solve_meanfield(model, fbsde.UniformBox(-1.0, 1.0), paths)
        m4 = (np.abs(sol.x_paths) ** 4).sum(axis=2).mean(axis=0)
        sups.append(float(m4.max()))
    assert max(sups) / min(sups) < 2.0


def test_initial_adjoint_lipschitz_constant_stable_in_n():
    model = coupled_lq()
    h = 0.07
    consts = []
    for n in (4, 8, 16, 32):
        paths = fbsde.generate_paths(9, n, 50, model)
        x0 = fbsde.UniformBox(-1.0, 1.0).sample(paths)
        base = fbsde.solve_nplayer(model, x0, paths)
        shifted = fbsde.solve_nplayer(model, x0 + h, paths)
        dy0 = shifted.y_paths[:, 0, :] - base.y_paths[:, 0, :]
        consts.append(float(np.sum(dy0**2) / (n * h * h)))
    assert max(consts) / min(consts) < 1.5


def test_adjoint_slope_representation(coupled_solution, decoupled_solution):
    _m, _p, sol = decoupled_solution
    z = sol.z_at(0, np.array([1.0]))
    assert z.shape == (1, 1)
    assert abs(z[0, 0] - math.sqrt(2.0) * 0.5) < 1e-3
    assert float(np.abs(sol.z0_at(0, np.array([1.0]))).max()) == 0.0
    _model, _paths, coupled = coupled_solution
    z0 = coupled.z0_at(0, np.array([1.0]))
    assert z0.shape == (1, 1)


def test_solution_export_roundtrip(tmp_path, coupled_solution):
    _model, _paths, sol = coupled_solution
    csv = tmp_path / "paths.csv"
    sol.export_csv(csv)
    rows = np.loadtxt(csv, delimiter=",", skiprows=1)
    assert rows.shape == ((sol.steps + 1) * sol.particles, 5)
    k, i = 17, 3
    r = rows[k * sol.particles + i]
    assert r[0] == sol.grid[k] and r[1] == i
    assert r[2] == sol.x_paths[i, k, 0]
    assert r[3] == sol.y_paths[i, k, 0]
    assert r[4] == sol.controls[i, k, 0]
    assert np.all(np.isnan(rows[-sol.particles :, 4]))
    out = tmp_path / "summary.json"
    sol.export_summary(out)
    summary = json.loads(out.read_text())
    assert summary["variant"] == "nplayer"
    assert summary["converged"] is True
    assert summary["iterations"] == sol.iterations
    assert summary["terminal_residual"] == sol.terminal_residual
    assert len(summary["residual_history"]) == len(sol.residual_history)


def test_nplayer_needs_two_particles():
    model = zero_cost_model(0.0)
    paths = fbsde.generate_paths(1, 1, 10, model)
    with pytest.raises(AssertionError):
        fbsde.solve_nplayer(model, np.array([[0.0]]), paths)


def test_bundle_model_dimension_checked():
    paths = fbsde.generate_paths(1, 4, 10, zero_cost_model())
    wide = ModelSpec(dim=2, horizon=1.0, kappa_a=1.0)
    with pytest.raises(AssertionError):
        fbsde.solve_meanfield(wide, np.zeros((4, 2)), paths)
