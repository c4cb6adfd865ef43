import json
import math

import numpy as np
import pytest

from app.core.errors import InvalidInputError, RejectedPlanError
from app.services.field_service import (
    CouplingPlan,
    QuadraticField,
    correlation_at,
    couple,
    diagnostics,
    diagnostic_axis,
    dump_field,
    eval_jet,
    fluctuation_variance_grid,
    from_coefficients,
    identity_plan,
    philox_generator,
    sample,
)
from app.services.spectral_service import SpectralMeasure, builtin_measure, kernel_eval, perturbed_measure


def _atom(x: float) -> SpectralMeasure:
    return builtin_measure("atoms", {"atoms": [((x, 0.0), 1.0)]})


def test_sample_is_deterministic(rpw) -> None:
    x = np.array([0.3, -1.7])
    first = sample(rpw, 11)
    second = sample(rpw, 11)
    np.testing.assert_array_equal(first.coeffs, second.coeffs)
    assert eval_jet(first, x)[0] == eval_jet(second, x)[0]
    assert not np.array_equal(sample(rpw, 12).coeffs, first.coeffs)


def test_negative_seed_rejected(rpw) -> None:
    with pytest.raises(InvalidInputError):
        sample(rpw, -1)


def test_streams_are_independent() -> None:
    a = philox_generator(3, 0).standard_normal(4)
    b = philox_generator(3, 1).standard_normal(4)
    assert not np.array_equal(a, b)


def test_forced_coefficients_single_atom() -> None:
    fld = from_coefficients(_atom(1.0), [[1.0, 0.0]])
    f, grad, hess = eval_jet(fld, (0.0, 0.0))
    assert f == pytest.approx(1.0)
    np.testing.assert_allclose(grad, [0.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(hess, [[-1.0, 0.0], [0.0, 0.0]], atol=1e-15)

    f, grad, _ = eval_jet(fld, (math.pi / 2, 0.0))
    assert f == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_allclose(grad, [-1.0, 0.0], atol=1e-15)

    xs = np.linspace(-3.0, 3.0, 13)
    values, grads, _ = fld.jet(np.column_stack([xs, np.zeros_like(xs)]))
    np.testing.assert_allclose(values, np.cos(xs), atol=1e-15)
    np.testing.assert_allclose(grads[:, 0], -np.sin(xs), atol=1e-15)


def test_jet_matches_finite_differences(rpw) -> None:
    fld = sample(rpw, 5)
    h = 1e-5
    basis = np.eye(2)
    for x in [np.array([0.2, 0.4]), np.array([-2.5, 1.1]), np.array([3.3, -0.7])]:
        f, grad, hess = eval_jet(fld, x)
        fd_grad = np.array([(fld.jet(x + h * e)[0] - fld.jet(x - h * e)[0]) / (2 * h) for e in basis])
        fd_hess = np.array([(fld.jet(x + h * e)[1] - fld.jet(x - h * e)[1]) / (2 * h) for e in basis])
        np.testing.assert_allclose(grad, fd_grad, rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(hess, fd_hess, rtol=1e-6, atol=1e-8)
        np.testing.assert_array_equal(hess, hess.T)


def test_grid_jet_matches_pointwise_jet(rpw) -> None:
    fld = sample(rpw, 2)
    xs = np.linspace(-2.0, 2.0, 7)
    ys = np.linspace(-1.0, 3.0, 5)
    grid = fld.grid_jet(xs, ys)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    f, grad, hess = fld.jet(np.column_stack([X.ravel(), Y.ravel()]))
    np.testing.assert_allclose(grid.f.ravel(), f, atol=1e-12)
    np.testing.assert_allclose(grid.fx.ravel(), grad[:, 0], atol=1e-12)
    np.testing.assert_allclose(grid.fy.ravel(), grad[:, 1], atol=1e-12)
    np.testing.assert_allclose(grid.fxx.ravel(), hess[:, 0, 0], atol=1e-12)
    np.testing.assert_allclose(grid.fxy.ravel(), hess[:, 0, 1], atol=1e-12)
    np.testing.assert_allclose(grid.fyy.ravel(), hess[:, 1, 1], atol=1e-12)


def test_quadratic_field_jet() -> None:
    fld = QuadraticField.radial(0.5)
    f, grad, hess = eval_jet(fld, (3.0, 4.0))
    assert f == pytest.approx(12.5)
    np.testing.assert_allclose(grad, [3.0, 4.0])
    np.testing.assert_allclose(hess, np.eye(2))
    grid = fld.grid_jet(np.array([3.0]), np.array([4.0]))
    assert grid.f[0, 0] == pytest.approx(12.5)
    assert fld.negated().jet(np.array([3.0, 4.0]))[0] == pytest.approx(-12.5)


def test_marginal_variance_is_one() -> None:
    m = builtin_measure("rpw_circle", {"M": 16})
    values = np.array([sample(m, seed).jet(np.zeros(2))[0] for seed in range(4000)])
    se = values.var(ddof=1) * math.sqrt(2.0 / values.size)
    assert abs(values.var(ddof=1) - 1.0) <= 3.0 * se
    kurtosis = float(np.mean(values**4) / np.mean(values**2) ** 2)
    assert 2.7 <= kurtosis <= 3.3


def test_identity_coupling_gives_equal_fields(rpw) -> None:
    cp = couple(rpw, rpw, identity_plan(rpw), seed=4)
    x = np.array([[0.5, -0.2], [1.5, 2.5]])
    np.testing.assert_array_equal(cp.field1.jet(x)[0], cp.field2.jet(x)[0])
    np.testing.assert_array_equal(cp.field1.coeffs, sample(rpw, 4).coeffs)
    diag = diagnostics(cp, R=2.0, grid_spacing=0.25)
    assert diag.sigma_D == 0.0
    assert diag.beta == 0.0
    np.testing.assert_allclose(correlation_at(cp, x), 1.0)


def test_fluctuation_variance_matches_cosine_form() -> None:
    m1 = builtin_measure("rpw_circle", {"M": 12})
    m2 = perturbed_measure(m1, 0.1)
    plan = CouplingPlan(sources=m1.atoms, targets=m2.atoms, weights=m1.weights)
    cp = couple(m1, m2, plan, seed=0)
    axis = diagnostic_axis(2.0, 0.25)
    X, Y = np.meshgrid(axis, axis, indexing="ij")
    phase = np.outer(X.ravel(), plan.sources[:, 0] - plan.targets[:, 0]) + np.outer(Y.ravel(), plan.sources[:, 1] - plan.targets[:, 1])
    variance = fluctuation_variance_grid(cp, axis, axis)[(0, 0)]
    expected = (2.0 - 2.0 * np.cos(phase)) @ plan.weights
    np.testing.assert_allclose(variance.ravel(), expected, atol=1e-13)

    same = couple(m1, m1, identity_plan(m1), seed=0)
    for values in fluctuation_variance_grid(same, axis, axis).values():
        assert np.all(values == 0.0)


def test_matched_pair_difference_field() -> None:
    eps = 0.1
    m1, m2 = _atom(1.0), _atom(1.0 + eps)
    plan = CouplingPlan(sources=[[1.0, 0.0]], targets=[[1.0 + eps, 0.0]], weights=[1.0])
    cp = couple(m1, m2, plan, seed=9)
    a, b = cp.field1.coeffs[0]
    for x1 in (0.3, 1.7, -2.2):
        point = np.array([x1, 0.4])
        expected = a * (math.cos(x1) - math.cos((1 + eps) * x1)) + b * (math.sin(x1) - math.sin((1 + eps) * x1))
        assert cp.field1.jet(point)[0] - cp.field2.jet(point)[0] == pytest.approx(expected, abs=1e-14)


def test_correlation_single_pair() -> None:
    plan = CouplingPlan(sources=[[1.0, 0.0]], targets=[[2.0, 0.0]], weights=[1.0])
    cp = couple(_atom(1.0), _atom(2.0), plan, seed=0)
    assert correlation_at(cp, (0.0, 0.0)) == 1.0
    assert correlation_at(cp, (math.pi, 0.0)) == pytest.approx(-1.0)


def test_correlation_matches_monte_carlo() -> None:
    m1 = builtin_measure("rpw_circle", {"M": 8})
    m2 = perturbed_measure(m1, 0.3)
    plan = CouplingPlan(sources=m1.atoms, targets=m2.atoms, weights=m1.weights)
    x = np.array([1.3, 0.8])
    products = []
    for seed in range(3000):
        cp = couple(m1, m2, plan, seed)
        products.append(cp.field1.jet(x)[0] * cp.field2.jet(x)[0])
    products = np.array(products)
    se = products.std(ddof=1) / math.sqrt(products.size)
    assert abs(products.mean() - correlation_at(cp, x)) <= 3.0 * se


def test_plan_marginal_mismatch_rejected(rpw) -> None:
    m2 = perturbed_measure(rpw, 0.1)
    with pytest.raises(RejectedPlanError):
        couple(rpw, m2, identity_plan(rpw), seed=0)
    with pytest.raises(RejectedPlanError):
        CouplingPlan(sources=[[1.0, 0.0]], targets=[[1.0, 0.0]], weights=[0.0])


def test_sigma_d_matches_fine_grid() -> None:
    eps, R = 1e-3, 5.0
    plan = CouplingPlan(sources=[[1.0, 0.0]], targets=[[1.0 + eps, 0.0]], weights=[1.0])
    cp = couple(_atom(1.0), _atom(1.0 + eps), plan, seed=1)
    diag = diagnostics(cp, R=R)
    fine = diagnostic_axis(R, 0.005)
    worst = max(float(v.max()) for v in fluctuation_variance_grid(cp, fine, fine).values())
    assert diag.sigma_D == pytest.approx(math.sqrt(worst), rel=0.01)
    assert diag.sigma_D > 0.0


def test_sigma_d_bounds_correlation_defect() -> None:
    m1 = builtin_measure("rpw_circle", {"M": 12})
    m2 = perturbed_measure(m1, 0.05)
    plan = CouplingPlan(sources=m1.atoms, targets=m2.atoms, weights=m1.weights)
    cp = couple(m1, m2, plan, seed=0)
    diag = diagnostics(cp, R=3.0, grid_spacing=0.1)
    axis = diagnostic_axis(3.0, 0.1)
    X, Y = np.meshgrid(axis, axis, indexing="ij")
    rho = correlation_at(cp, np.column_stack([X.ravel(), Y.ravel()]))
    assert np.all(1.0 - rho <= diag.sigma_D**2 / 2.0 + 1e-12)


def test_empty_diagnostics_grid_rejected(rpw) -> None:
    cp = couple(rpw, rpw, identity_plan(rpw), seed=0)
    with pytest.raises(InvalidInputError):
        diagnostics(cp, R=0.1, grid_spacing=1.0)


def test_dump_field_formats(tmp_path) -> None:
    fld = sample(builtin_measure("rpw_circle", {"M": 8}), 3)
    csv_path = dump_field(fld, R=1.0, n=4, path=tmp_path / "field.csv")
    lines = csv_path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "x,y,f,f_x,f_y,f_xx,f_xy,f_yy"
    assert len(lines) == 17

    raw_path = dump_field(fld, R=1.0, n=4, path=tmp_path / "field.raw", fmt="raw")
    data = np.frombuffer(raw_path.read_bytes(), dtype="<f8").reshape(4, 4, 6)
    axis = np.linspace(-1.0, 1.0, 4)
    np.testing.assert_allclose(data[..., 0], fld.grid_jet(axis, axis).f)
    header = json.loads((tmp_path / "field.raw.json").read_text(encoding="utf-8"))
    assert header["n"] == 4 and header["seed"] == 3
    assert header["columns"][0] == "f"


def test_covariance_is_stationary(small_rpw) -> None:
    t = np.array([0.7, -0.4])
    bases = np.array([[0.0, 0.0], [2.5, 1.0], [-4.0, 3.0]])
    points = np.vstack([bases, bases + t])
    values = np.array([sample(small_rpw, seed).jet(points)[0] for seed in range(3000)])
    products = values[:, :3] * values[:, 3:]
    expected = kernel_eval(small_rpw, t)
    means = products.mean(axis=0)
    ses = products.std(axis=0, ddof=1) / math.sqrt(products.shape[0])
    for mean, se in zip(means, ses):
        assert abs(mean - expected) <= 4.0 * se


def test_beta_stays_under_concentration_envelope() -> None:
    R = 2.0
    m1 = builtin_measure("rpw_circle", {"M": 16})
    m2 = perturbed_measure(m1, 0.05)
    plan = CouplingPlan(sources=m1.atoms, targets=m2.atoms, weights=m1.weights)
    reports = [diagnostics(couple(m1, m2, plan, seed), R=R, grid_spacing=0.1) for seed in range(10)]
    sigma = reports[0].sigma_D
    assert all(r.sigma_D == sigma for r in reports)
    mean_beta = float(np.mean([r.beta for r in reports]))
    assert 0.0 < mean_beta <= 10.0 * sigma * math.sqrt(math.log(R + 2.0))


def test_disagreement_area_matches_arccos_correlation() -> None:
    R = 3.0
    m1 = builtin_measure("rpw_circle", {"M": 16})
    m2 = perturbed_measure(m1, 0.2)
    plan = CouplingPlan(sources=m1.atoms, targets=m2.atoms, weights=m1.weights)
    axis = np.linspace(-R, R, 49)
    X, Y = np.meshgrid(axis, axis, indexing="ij")
    rho = correlation_at(couple(m1, m2, plan, 0), np.column_stack([X.ravel(), Y.ravel()]))
    oracle = float(np.mean(np.arccos(np.clip(rho, -1.0, 1.0)))) / math.pi

    fractions = []
    for seed in range(100):
        cp = couple(m1, m2, plan, seed)
        product = cp.field1.grid_jet(axis, axis).f * cp.field2.grid_jet(axis, axis).f
        fractions.append(float(np.mean(product < 0.0)))
    fractions = np.array(fractions)
    se = fractions.std(ddof=1) / math.sqrt(fractions.size)
    assert oracle > 0.0
    assert abs(fractions.mean() - oracle) <= 3.0 * se
