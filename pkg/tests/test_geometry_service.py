import math

import numpy as np
import pytest
from scipy import integrate

from app.core.config import settings
from app.core.errors import BoundaryCriticalPointError, InvalidInputError
from app.services.field_service import QuadraticField, couple, identity_plan, sample
from app.services.geometry_service import (
    Domain,
    boundary_flux,
    bulk_curvature_integral,
    bulk_difference_decomposition,
    critical_point_scan,
    curvature_at,
    curvature_moment_sequence,
    extract_segments,
    identity_report,
    level_continuity_scan,
    level_length,
    one_sided_sentinel,
)


def test_domain_validation() -> None:
    dom = Domain(R=2.0, grid_n=16)
    assert dom.volume == 16.0
    assert dom.axis[0] == -2.0 and dom.axis[-1] == 2.0
    with pytest.raises(InvalidInputError):
        Domain(R=0.0)
    with pytest.raises(InvalidInputError):
        Domain(R=1.0, grid_n=8)


def test_curvature_of_radial_field() -> None:
    fld = QuadraticField.radial(0.5)
    for r in (0.5, 1.0, 2.5):
        sample_point = curvature_at(fld, (r / math.sqrt(2), r / math.sqrt(2)))
        assert sample_point.defined
        assert sample_point.kappa == pytest.approx(1.0 / r)


def test_curvature_linear_and_critical_point() -> None:
    assert curvature_at(QuadraticField.linear_form((0.6, 0.8)), (1.0, -2.0)).kappa == 0.0
    at_center = curvature_at(QuadraticField.radial(0.5), (0.0, 0.0))
    assert not at_center.defined
    assert at_center.kappa is None
    assert at_center.grad_norm == 0.0


def test_curvature_flips_with_field_sign(rpw) -> None:
    fld = sample(rpw, 3)
    neg = fld.negated()
    rng = np.random.default_rng(1)
    for point in rng.uniform(-5.0, 5.0, size=(1000, 2)):
        kappa = curvature_at(fld, point).kappa
        flipped = curvature_at(neg, point).kappa
        if kappa is not None:
            assert flipped == -kappa


def test_level_length_linear_field() -> None:
    fld = QuadraticField.linear_form((1.0, 0.0))
    for n in (16, 17, 64):
        result = level_length(fld, Domain(R=1.0, grid_n=n), 0.0)
        assert result.length == pytest.approx(2.0, abs=1e-12)
    assert level_length(fld, Domain(R=1.0, grid_n=32), 1.5).length == 0.0


def test_level_length_circle() -> None:
    fld = QuadraticField.radial(1.0)
    result = level_length(fld, Domain(R=2.0, grid_n=512), 1.0)
    assert result.length == pytest.approx(2.0 * math.pi, rel=0.005)
    assert result.segment_count > 0


def test_saddle_cells_produce_two_segments() -> None:
    # f = x y has a saddle at the origin; {xy = c} is two hyperbola branches running from x = c to x = 1.
    c = 1e-3
    fld = QuadraticField(quadratic=((0.0, 1.0), (1.0, 0.0)))
    dom = Domain(R=1.0, grid_n=16)
    branch, _ = integrate.quad(lambda x: math.sqrt(1.0 + (c / x**2) ** 2), c, 1.0, limit=200)
    result = level_length(fld, dom, c)
    assert result.length == pytest.approx(2.0 * branch, rel=0.01)
    segments = extract_segments(fld, dom, c)
    assert segments.shape[1:] == (2, 2)


def test_bulk_integral_zero_for_linear_field() -> None:
    fld = QuadraticField.linear_form((0.6, 0.8))
    result = bulk_curvature_integral(fld, Domain(R=1.0, grid_n=64), -0.3, 0.4)
    assert result.value == 0.0
    assert result.near_critical_volume == 0.0


def test_radial_identity_closed_form() -> None:
    fld = QuadraticField.radial(0.5)
    dom = Domain(R=3.0, grid_n=512)
    report = identity_report(fld, dom, 0.5, 2.0)
    two_pi = 2.0 * math.pi
    assert report.measure_b - report.measure_a == pytest.approx(two_pi, rel=0.005)
    assert report.bulk_integral == pytest.approx(two_pi, rel=0.005)
    assert report.boundary_flux == 0.0
    assert abs(report.residual) <= 0.005 * two_pi
    assert report.near_critical_volume == 0.0


def test_bulk_integral_odd_under_sign_flip() -> None:
    fld = QuadraticField.radial(0.5)
    dom = Domain(R=3.0, grid_n=128)
    plus = bulk_curvature_integral(fld, dom, 0.5, 2.0).value
    minus = bulk_curvature_integral(fld.negated(), dom, -2.0, -0.5).value
    assert minus == pytest.approx(-plus, rel=1e-12)


def test_boundary_flux_examples() -> None:
    fld = QuadraticField.linear_form((1.0, 0.0))
    dom = Domain(R=1.0, grid_n=64)
    assert boundary_flux(fld, dom, -0.5, 0.5) == 0.0
    assert boundary_flux(fld, dom, -2.0, 2.0) == pytest.approx(0.0, abs=1e-12)
    assert boundary_flux(QuadraticField.radial(0.5), Domain(R=3.0, grid_n=64), 0.5, 2.0) == 0.0


def test_boundary_critical_point_raises() -> None:
    # Gradient vanishes along the whole line x = 1, which is the right face.
    fld = QuadraticField(constant=0.0, linear=(-1.0, 0.0), quadratic=((1.0, 0.0), (0.0, 0.0)))
    with pytest.raises(BoundaryCriticalPointError) as info:
        boundary_flux(fld, Domain(R=1.0, grid_n=32), -1.0, 1.0)
    assert info.value.face == "x=+R"


def test_linear_identity_residual_vanishes() -> None:
    fld = QuadraticField.linear_form((0.6, 0.8), offset=0.1)
    dom = Domain(R=1.0, grid_n=64)
    report = identity_report(fld, dom, -0.4, 0.5)
    assert report.bulk_integral == 0.0
    # Level lengths are exact for a linear field; the flux indicator is resolved to one boundary node.
    assert abs(report.residual) <= 2.0 * (2.0 * dom.R / dom.grid_n)


def test_rpw_identity_residual_is_small(small_rpw) -> None:
    fld = sample(small_rpw, 0)
    report = identity_report(fld, Domain(R=2.0, grid_n=256), 0.0, 0.5)
    assert report.normalized_residual <= 0.05


def test_one_sided_band_uses_sentinel(small_rpw) -> None:
    fld = sample(small_rpw, 1)
    dom = Domain(R=2.0, grid_n=128)
    grid = dom.grid(fld)
    a = one_sided_sentinel(grid)
    assert a < grid.f.min()
    assert level_length(fld, dom, a, grid=grid).length == 0.0
    report = identity_report(fld, dom, a, 0.0)
    assert report.measure_a == 0.0


def test_level_continuity_scan() -> None:
    linear = QuadraticField.linear_form((1.0, 0.0))
    gaps = level_continuity_scan(linear, Domain(R=1.0, grid_n=64), 0.0, [0.25, 0.125, 0.0625])
    assert all(gap == pytest.approx(0.0, abs=1e-12) for _, gap in gaps)

    circle = QuadraticField.radial(1.0)
    dom = Domain(R=2.0, grid_n=512)
    for delta, gap in level_continuity_scan(circle, dom, 1.0, [0.5, 0.25]):
        assert gap == pytest.approx(2.0 * math.pi * (math.sqrt(1.0 + delta) - 1.0), rel=0.02)

    with pytest.raises(InvalidInputError):
        level_continuity_scan(linear, Domain(R=1.0, grid_n=16), 0.0, [0.1, 0.2])


def test_level_length_refinement_consistency(small_rpw) -> None:
    fld = sample(small_rpw, 2)
    coarse = level_length(fld, Domain(R=3.0, grid_n=256), 0.0).length
    fine = level_length(fld, Domain(R=3.0, grid_n=512), 0.0).length
    assert abs(fine - coarse) <= 0.01 * fine


def test_decomposition_identity_coupling(small_rpw) -> None:
    cp = couple(small_rpw, small_rpw, identity_plan(small_rpw), seed=3)
    report = bulk_difference_decomposition(cp, Domain(R=2.0, grid_n=64))
    assert report.delta_length == 0.0
    assert report.bulk_both_negative == 0.0
    assert report.bulk_field1_disagreement == 0.0
    assert report.bulk_field2_disagreement == 0.0
    assert report.disagreement_area == 0.0
    assert report.disagreement_boundary_length == 0.0
    assert report.boundary_total == 0.0


def test_critical_point_scan_finds_saddle() -> None:
    saddle = critical_point_scan(QuadraticField(quadratic=((1.0, 0.0), (0.0, -1.0))), Domain(R=1.0, grid_n=32))
    assert saddle.count == 1
    np.testing.assert_allclose(saddle.points[0], [0.0, 0.0], atol=1e-9)
    assert saddle.hessian_det[0] == pytest.approx(-1.0)
    assert saddle.is_morse()

    flat = critical_point_scan(QuadraticField.linear_form((1.0, 0.0)), Domain(R=1.0, grid_n=32))
    assert flat.count == 0


def test_curvature_moments_are_stable(small_rpw) -> None:
    seq = curvature_moment_sequence(sample(small_rpw, 0), Domain(R=4.0), 1.5, sizes=(2000, 20000), seed=0)
    assert len(seq.means) == 2
    assert all(m > 0.0 and math.isfinite(m) for m in seq.means)
    assert all(0.5 <= r <= 2.0 for r in seq.ratios)


def test_refinement_tallies_near_critical_volume(monkeypatch) -> None:
    monkeypatch.setattr(settings, "refine_max_depth", 2)
    fld = QuadraticField.radial(0.5)
    result = bulk_curvature_integral(fld, Domain(R=1.0, grid_n=17), -1.0, 2.0)
    assert result.near_critical_volume > 0.0
    assert result.refined_cells > 0
