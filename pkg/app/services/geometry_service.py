import math
from dataclasses import asdict, dataclass
from typing import Any

import numpy as np

from app.core.config import settings
from app.core.errors import BoundaryCriticalPointError, InvalidInputError
from app.services.field_service import (
    JITTER_STREAM,
    POINT_STREAM,
    CoupledPair,
    GridJet,
    JetField,
    philox_generator,
)

# Corner offsets in marching-squares order p0..p3 (counter-clockwise from lower left).
_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
_QUARTERS = np.array([[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]])
_FACES = (
    ("x=+R", 0, 1.0),
    ("x=-R", 0, -1.0),
    ("y=+R", 1, 1.0),
    ("y=-R", 1, -1.0),
)
_JITTER_ATTEMPTS = 3


@dataclass(frozen=True)
class Domain:
    R: float
    dim: int = 2
    grid_n: int = 512

    def __post_init__(self) -> None:
        if not self.R > 0.0:
            raise InvalidInputError(f"domain half-side R must be positive, got {self.R}")
        if self.dim < 2:
            raise InvalidInputError("domain dimension must be >= 2")
        if self.grid_n < 16:
            raise InvalidInputError(f"grid_n must be >= 16, got {self.grid_n}")

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(-self.R, self.R, self.grid_n)

    @property
    def cell(self) -> float:
        return 2.0 * self.R / (self.grid_n - 1)

    @property
    def centers(self) -> np.ndarray:
        return self.axis[:-1] + 0.5 * self.cell

    @property
    def volume(self) -> float:
        return (2.0 * self.R) ** self.dim

    @property
    def boundary_measure(self) -> float:
        return 2.0 * self.dim * (2.0 * self.R) ** (self.dim - 1)

    @property
    def gradient_threshold(self) -> float:
        return settings.gradient_threshold_scale / (self.cell * math.sqrt(self.dim))

    def with_grid(self, grid_n: int) -> "Domain":
        return Domain(R=self.R, dim=self.dim, grid_n=grid_n)

    def grid(self, fld: JetField) -> GridJet:
        _require_planar(self)
        return fld.grid_jet(self.axis, self.axis)


@dataclass(frozen=True)
class LevelSetMeasure:
    level: float
    length: float
    segment_count: int
    grid_n: int


@dataclass(frozen=True)
class CurvatureSample:
    point: tuple[float, ...]
    kappa: float | None
    grad_norm: float

    @property
    def defined(self) -> bool:
        return self.kappa is not None


@dataclass(frozen=True)
class BulkIntegral:
    value: float
    near_critical_volume: float
    refined_cells: int


@dataclass(frozen=True)
class BoundaryFlux:
    value: float
    jittered_nodes: int


@dataclass(frozen=True)
class IdentityReport:
    level_a: float
    level_b: float
    measure_a: float
    measure_b: float
    bulk_integral: float
    boundary_flux: float
    residual: float
    near_critical_volume: float
    grid_n: int
    jittered_nodes: int = 0

    @property
    def measure_difference(self) -> float:
        return self.measure_b - self.measure_a

    @property
    def normalized_residual(self) -> float:
        return abs(self.residual) / (1.0 + abs(self.measure_difference))

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["normalized_residual"] = self.normalized_residual
        return payload


@dataclass(frozen=True)
class DecompositionReport:
    delta_length: float
    bulk_total: float
    bulk_both_negative: float
    bulk_field1_disagreement: float
    bulk_field2_disagreement: float
    bulk_small_gradient: float
    bulk_large_gradient: float
    boundary_total: float
    boundary_both_negative: float
    boundary_field1_only: float
    boundary_field2_only: float
    disagreement_area: float
    disagreement_boundary_length: float
    gradient_split: float

    @property
    def identity_residual(self) -> float:
        return self.delta_length - self.bulk_total + self.boundary_total

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["identity_residual"] = self.identity_residual
        return payload


@dataclass(frozen=True)
class CriticalPointScan:
    points: np.ndarray
    hessian_det: np.ndarray

    @property
    def count(self) -> int:
        return int(self.points.shape[0])

    @property
    def min_abs_det(self) -> float:
        if self.count == 0:
            return math.inf
        return float(np.min(np.abs(self.hessian_det)))

    def is_morse(self, tolerance: float = 1e-8) -> bool:
        return self.min_abs_det > tolerance


@dataclass(frozen=True)
class MomentSequence:
    exponent: float
    sizes: tuple[int, ...]
    means: tuple[float, ...]

    @property
    def ratios(self) -> tuple[float, ...]:
        return tuple(b / a for a, b in zip(self.means[:-1], self.means[1:]))

    def stable(self, low: float = 0.8, high: float = 1.25) -> bool:
        return all(low <= r <= high for r in self.ratios)


def _require_planar(dom: Domain) -> None:
    if dom.dim != 2:
        raise InvalidInputError("level-set geometry is implemented for d = 2")


def curvature_from_jet(grad: np.ndarray, hess: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """kappa = (|g|^2 tr H - g H g^T) / |g|^3; NaN where |g| is below the gradient floor."""
    grad = np.atleast_2d(grad)
    hess = hess.reshape(grad.shape[0], grad.shape[1], grad.shape[1])
    norm = np.linalg.norm(grad, axis=1)
    numerator = norm**2 * np.trace(hess, axis1=1, axis2=2) - np.einsum("ni,nij,nj->n", grad, hess, grad)
    kappa = np.full(norm.shape, np.nan)
    ok = norm >= settings.gradient_floor
    kappa[ok] = numerator[ok] / norm[ok] ** 3
    return kappa, norm


def curvature_grid(grid: GridJet) -> np.ndarray:
    norm = grid.grad_norm
    numerator = grid.fx**2 * grid.fyy + grid.fy**2 * grid.fxx - 2.0 * grid.fx * grid.fy * grid.fxy
    with np.errstate(divide="ignore", invalid="ignore"):
        kappa = numerator / norm**3
    return np.where(norm >= settings.gradient_floor, kappa, np.nan)


def curvature_at(fld: JetField, x: Any) -> CurvatureSample:
    point = np.asarray(x, dtype=float)
    _, grad, hess = fld.jet(point)
    kappa, norm = curvature_from_jet(grad[np.newaxis, :], hess[np.newaxis, :, :])
    value = float(kappa[0])
    return CurvatureSample(
        point=tuple(float(v) for v in point),
        kappa=None if math.isnan(value) else value,
        grad_norm=float(norm[0]),
    )


def _corner_values(values: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    return values[:-1, :-1], values[1:, :-1], values[1:, 1:], values[:-1, 1:]


def _segments_from_grid(
    values: np.ndarray,
    xs: np.ndarray,
    ys: np.ndarray,
    level: float,
    fld: JetField,
) -> np.ndarray:
    v0, v1, v2, v3 = _corner_values(values)
    above = [v >= level for v in (v0, v1, v2, v3)]
    crossing = np.stack(
        [above[0] != above[1], above[1] != above[2], above[2] != above[3], above[3] != above[0]],
        axis=-1,
    )
    counts = crossing.sum(axis=-1)
    active = counts > 0
    if not np.any(active):
        return np.empty((0, 2, 2))

    ii, jj = np.nonzero(active)
    x0, x1 = xs[ii], xs[ii + 1]
    y0, y1 = ys[jj], ys[jj + 1]
    c0, c1, c2, c3 = (v[ii, jj] for v in (v0, v1, v2, v3))

    def frac(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.clip((level - lo) / (hi - lo), 0.0, 1.0)

    points = np.stack(
        [
            np.column_stack([x0 + frac(c0, c1) * (x1 - x0), y0]),
            np.column_stack([x1, y0 + frac(c1, c2) * (y1 - y0)]),
            np.column_stack([x1 - frac(c2, c3) * (x1 - x0), y1]),
            np.column_stack([x0, y1 - frac(c3, c0) * (y1 - y0)]),
        ],
        axis=1,
    )
    cross = crossing[ii, jj]
    n_cross = counts[ii, jj]
    segments: list[np.ndarray] = []

    simple = np.flatnonzero(n_cross == 2)
    if simple.size:
        edges = np.nonzero(cross[simple])[1].reshape(-1, 2)
        segments.append(np.stack([points[simple, edges[:, 0]], points[simple, edges[:, 1]]], axis=1))

    saddle = np.flatnonzero(n_cross == 4)
    if saddle.size:
        centers = np.column_stack([0.5 * (x0[saddle] + x1[saddle]), 0.5 * (y0[saddle] + y1[saddle])])
        center_above = np.asarray(fld.jet(centers)[0]) >= level
        # Center on the p0 side joins p0 and p2, isolating p1 and p3.
        joins_p0 = center_above == (c0[saddle] >= level)
        first = np.where(joins_p0[:, None], [0, 1], [3, 0])
        second = np.where(joins_p0[:, None], [2, 3], [1, 2])
        for pairing in (first, second):
            segments.append(
                np.stack([points[saddle, pairing[:, 0]], points[saddle, pairing[:, 1]]], axis=1)
            )

    if not segments:
        return np.empty((0, 2, 2))
    return np.concatenate(segments, axis=0)


def extract_segments(fld: JetField, dom: Domain, a: float, grid: GridJet | None = None) -> np.ndarray:
    grid = grid or dom.grid(fld)
    return _segments_from_grid(grid.f, grid.xs, grid.ys, a, fld)


def level_length(fld: JetField, dom: Domain, a: float, grid: GridJet | None = None) -> LevelSetMeasure:
    segments = extract_segments(fld, dom, a, grid=grid)
    length = float(np.linalg.norm(segments[:, 1] - segments[:, 0], axis=1).sum()) if segments.size else 0.0
    return LevelSetMeasure(level=float(a), length=length, segment_count=int(segments.shape[0]), grid_n=dom.grid_n)


def one_sided_sentinel(grid: GridJet) -> float:
    # Lower end of the band {f <= b}: strictly below every value on the grid.
    return -(float(np.max(np.abs(grid.f))) + 1.0)


def _in_band(values: np.ndarray, a: float, b: float) -> np.ndarray:
    return (values >= a) & (values <= b)


def _straddles(fmin: np.ndarray, fmax: np.ndarray, a: float, b: float) -> np.ndarray:
    return ((fmin < a) & (fmax > a)) | ((fmin < b) & (fmax > b))


def _leaf_sum(kappa: np.ndarray, fmid: np.ndarray, a: float, b: float, area: float, capped: bool) -> float:
    weights = np.where(_in_band(fmid, a, b), kappa, 0.0)
    if capped:
        weights = np.clip(weights, -settings.kappa_cap, settings.kappa_cap)
    return float(np.nansum(weights) * area)


def _band_volume(capped: np.ndarray, fmid: np.ndarray, a: float, b: float, area: float) -> float:
    return float(np.count_nonzero(capped & _in_band(fmid, a, b))) * area


def bulk_curvature_integral(
    fld: JetField,
    dom: Domain,
    a: float,
    b: float,
    grid: GridJet | None = None,
) -> BulkIntegral:
    """Midpoint-rule integral of kappa 1{a <= f <= b} over D.

    Cells whose smallest corner gradient is below the threshold are quartered up to
    `refine_max_depth`; leaves still below it contribute a capped kappa and are tallied
    as near-critical volume. Cells cut by a band edge are quartered up to
    `band_refine_depth`.
    """
    _require_planar(dom)
    if not a < b:
        raise InvalidInputError(f"bulk integral needs a < b, got [{a}, {b}]")
    grid = grid or dom.grid(fld)
    centers_axis = dom.centers
    mid = fld.grid_jet(centers_axis, centers_axis)
    tau = dom.gradient_threshold
    max_depth = settings.refine_max_depth
    band_depth = settings.band_refine_depth

    corner_grad = np.minimum.reduce(_corner_values(grid.grad_norm))
    corner_f = _corner_values(grid.f)
    fmin = np.minimum.reduce(corner_f)
    fmax = np.maximum.reduce(corner_f)
    kappa = curvature_grid(mid)

    critical = corner_grad < tau
    refine = (critical & (max_depth > 0)) | (_straddles(fmin, fmax, a, b) & (band_depth > 0))
    area = dom.cell**2
    total = _leaf_sum(kappa[~refine & ~critical], mid.f[~refine & ~critical], a, b, area, capped=False)
    capped = ~refine & critical
    total += _leaf_sum(kappa[capped], mid.f[capped], a, b, area, capped=True)
    near_volume = _band_volume(capped, mid.f, a, b, area)

    ii, jj = np.nonzero(refine)
    pending = np.column_stack([centers_axis[ii], centers_axis[jj]])
    half = 0.5 * dom.cell
    refined_cells = int(pending.shape[0])
    depth = 0
    while pending.shape[0]:
        depth += 1
        half *= 0.5
        children = (pending[:, np.newaxis, :] + half * _QUARTERS[np.newaxis]).reshape(-1, 2)
        corners = (children[:, np.newaxis, :] + half * _CORNERS[np.newaxis]).reshape(-1, 2)
        f_corner, g_corner, _ = fld.jet(corners)
        g_corner = np.linalg.norm(g_corner, axis=1).reshape(-1, 4)
        f_corner = np.asarray(f_corner).reshape(-1, 4)
        f_mid, g_mid, h_mid = fld.jet(children)
        kappa_mid, _ = curvature_from_jet(g_mid, h_mid)

        critical = g_corner.min(axis=1) < tau
        straddle = _straddles(f_corner.min(axis=1), f_corner.max(axis=1), a, b)
        refine = (critical & (depth < max_depth)) | (straddle & (depth < band_depth))
        area = (2.0 * half) ** 2
        plain = ~refine & ~critical
        capped = ~refine & critical
        total += _leaf_sum(kappa_mid[plain], f_mid[plain], a, b, area, capped=False)
        total += _leaf_sum(kappa_mid[capped], f_mid[capped], a, b, area, capped=True)
        near_volume += _band_volume(capped, f_mid, a, b, area)
        pending = children[refine]
        refined_cells += int(pending.shape[0])

    return BulkIntegral(value=total, near_critical_volume=near_volume, refined_cells=refined_cells)


def _face_nodes(dom: Domain, axis_index: int, sign: float) -> tuple[np.ndarray, float]:
    n = dom.grid_n
    ds = 2.0 * dom.R / n
    u = -dom.R + (np.arange(n) + 0.5) * ds
    nodes = np.empty((n, 2))
    nodes[:, axis_index] = sign * dom.R
    nodes[:, 1 - axis_index] = u
    return nodes, ds


def _jitter_seed(fld: JetField) -> int:
    seed = getattr(fld, "seed", None)
    return int(seed) if seed is not None else 0


def boundary_flux_detail(fld: JetField, dom: Domain, a: float, b: float) -> BoundaryFlux:
    """Composite midpoint rule for the flux of grad f/|grad f| through dD on {a <= f <= b}."""
    _require_planar(dom)
    floor = settings.gradient_floor
    rng = philox_generator(_jitter_seed(fld), JITTER_STREAM)
    total = 0.0
    jittered = 0
    for face, axis_index, sign in _FACES:
        nodes, ds = _face_nodes(dom, axis_index, sign)
        f, grad, _ = fld.jet(nodes)
        norm = np.linalg.norm(grad, axis=1)
        for k in np.flatnonzero(norm < floor):
            for _ in range(_JITTER_ATTEMPTS):
                moved = nodes[k].copy()
                moved[1 - axis_index] += 0.25 * ds * rng.uniform(-1.0, 1.0)
                fk, gk, _ = fld.jet(moved)
                if np.linalg.norm(gk) >= floor:
                    nodes[k], f[k], grad[k] = moved, fk, gk
                    norm[k] = np.linalg.norm(gk)
                    jittered += 1
                    break
            else:
                raise BoundaryCriticalPointError(face, tuple(float(v) for v in nodes[k]), float(norm[k]))
        normal_component = sign * grad[:, axis_index] / norm
        total += float(np.sum(np.where(_in_band(f, a, b), normal_component, 0.0)) * ds)
    return BoundaryFlux(value=total, jittered_nodes=jittered)


def boundary_flux(fld: JetField, dom: Domain, a: float, b: float) -> float:
    return boundary_flux_detail(fld, dom, a, b).value


def identity_report(fld: JetField, dom: Domain, a: float, b: float) -> IdentityReport:
    if not a < b:
        raise InvalidInputError(f"identity report needs a < b, got [{a}, {b}]")
    grid = dom.grid(fld)
    measure_a = level_length(fld, dom, a, grid=grid).length
    measure_b = level_length(fld, dom, b, grid=grid).length
    bulk = bulk_curvature_integral(fld, dom, a, b, grid=grid)
    flux = boundary_flux_detail(fld, dom, a, b)
    residual = (measure_b - measure_a) - bulk.value + flux.value
    return IdentityReport(
        level_a=float(a),
        level_b=float(b),
        measure_a=measure_a,
        measure_b=measure_b,
        bulk_integral=bulk.value,
        boundary_flux=flux.value,
        residual=residual,
        near_critical_volume=bulk.near_critical_volume,
        grid_n=dom.grid_n,
        jittered_nodes=flux.jittered_nodes,
    )


def level_continuity_scan(fld: JetField, dom: Domain, a: float, deltas: Any) -> list[tuple[float, float]]:
    steps = [float(d) for d in deltas]
    if any(d <= 0.0 for d in steps) or any(later >= earlier for earlier, later in zip(steps, steps[1:])):
        raise InvalidInputError("deltas must be positive and strictly decreasing")
    grid = dom.grid(fld)
    base = level_length(fld, dom, a, grid=grid).length
    return [(d, abs(level_length(fld, dom, a + d, grid=grid).length - base)) for d in steps]


def _boundary_terms(cp: CoupledPair, dom: Domain) -> dict[str, float]:
    terms = dict.fromkeys(("total", "both_negative", "field1_only", "field2_only", "disagreement_length"), 0.0)
    floor = settings.gradient_floor
    for _, axis_index, sign in _FACES:
        nodes, ds = _face_nodes(dom, axis_index, sign)
        f1, g1, _ = cp.field1.jet(nodes)
        f2, g2, _ = cp.field2.jet(nodes)
        n1, n2 = np.linalg.norm(g1, axis=1), np.linalg.norm(g2, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            u1 = np.where(n1 >= floor, sign * g1[:, axis_index] / n1, 0.0)
            u2 = np.where(n2 >= floor, sign * g2[:, axis_index] / n2, 0.0)
        terms["total"] += float(np.sum(u1 * (f1 <= 0.0) - u2 * (f2 <= 0.0)) * ds)
        terms["both_negative"] += float(np.sum((u1 - u2) * ((f1 < 0.0) & (f2 < 0.0))) * ds)
        terms["field1_only"] += float(np.sum(u1 * ((f1 < 0.0) & (f2 > 0.0))) * ds)
        terms["field2_only"] += float(np.sum(u2 * ((f2 < 0.0) & (f1 > 0.0))) * ds)
        terms["disagreement_length"] += float(np.count_nonzero(f1 * f2 < 0.0) * ds)
    return terms


def bulk_difference_decomposition(
    cp: CoupledPair,
    dom: Domain,
    gradient_split: float = 0.1,
) -> DecompositionReport:
    """Split the nodal-length difference of a coupled pair into its bulk and boundary pieces.

    Bulk pieces use the cell-center midpoint rule with kappa capped at `kappa_cap`.
    """
    _require_planar(dom)
    centers = dom.centers
    mid1 = cp.field1.grid_jet(centers, centers)
    mid2 = cp.field2.grid_jet(centers, centers)
    k1 = np.clip(np.nan_to_num(curvature_grid(mid1)), -settings.kappa_cap, settings.kappa_cap)
    k2 = np.clip(np.nan_to_num(curvature_grid(mid2)), -settings.kappa_cap, settings.kappa_cap)
    area = dom.cell**2

    both_negative = (mid1.f < 0.0) & (mid2.f < 0.0)
    disagree = mid1.f * mid2.f < 0.0
    small = np.minimum(mid1.grad_norm, mid2.grad_norm) < gradient_split
    diff = k1 - k2

    boundary = _boundary_terms(cp, dom)
    length1 = level_length(cp.field1, dom, 0.0).length
    length2 = level_length(cp.field2, dom, 0.0).length
    return DecompositionReport(
        delta_length=length1 - length2,
        bulk_total=float(np.sum(k1 * (mid1.f <= 0.0) - k2 * (mid2.f <= 0.0)) * area),
        bulk_both_negative=float(np.sum(diff[both_negative]) * area),
        bulk_field1_disagreement=float(np.sum(k1[disagree]) * area),
        bulk_field2_disagreement=float(np.sum(k2[disagree]) * area),
        bulk_small_gradient=float(np.sum(diff[both_negative & small]) * area),
        bulk_large_gradient=float(np.sum(diff[both_negative & ~small]) * area),
        boundary_total=boundary["total"],
        boundary_both_negative=boundary["both_negative"],
        boundary_field1_only=boundary["field1_only"],
        boundary_field2_only=boundary["field2_only"],
        disagreement_area=float(np.count_nonzero(disagree)) * area,
        disagreement_boundary_length=boundary["disagreement_length"],
        gradient_split=gradient_split,
    )


def critical_point_scan(fld: JetField, dom: Domain, newton_steps: int = 12) -> CriticalPointScan:
    """Newton-refined critical points in D, seeded from cells where both gradient components change sign."""
    grid = dom.grid(fld)
    seeds = np.ones(grid.fx[:-1, :-1].shape, dtype=bool)
    for component in (grid.fx, grid.fy):
        corners = _corner_values(component)
        seeds &= (np.minimum.reduce(corners) <= 0.0) & (np.maximum.reduce(corners) >= 0.0)
    ii, jj = np.nonzero(seeds)
    centers = dom.centers
    points = np.column_stack([centers[ii], centers[jj]])
    if points.size == 0:
        return CriticalPointScan(points=np.empty((0, 2)), hessian_det=np.empty(0))

    for _ in range(newton_steps):
        _, grad, hess = fld.jet(points)
        det = hess[:, 0, 0] * hess[:, 1, 1] - hess[:, 0, 1] ** 2
        safe = np.abs(det) > 1e-14
        inv_det = np.where(safe, 1.0 / np.where(safe, det, 1.0), 0.0)
        step_x = (hess[:, 1, 1] * grad[:, 0] - hess[:, 0, 1] * grad[:, 1]) * inv_det
        step_y = (hess[:, 0, 0] * grad[:, 1] - hess[:, 0, 1] * grad[:, 0]) * inv_det
        points = points - np.column_stack([step_x, step_y])

    _, grad, hess = fld.jet(points)
    converged = (np.linalg.norm(grad, axis=1) < 1e-9) & np.all(np.abs(points) <= dom.R, axis=1)
    points = points[converged]
    if points.size == 0:
        return CriticalPointScan(points=np.empty((0, 2)), hessian_det=np.empty(0))
    _, keep = np.unique(np.round(points / (1e-3 * dom.cell)), axis=0, return_index=True)
    points = points[np.sort(keep)]
    _, _, hess = fld.jet(points)
    det = hess[:, 0, 0] * hess[:, 1, 1] - hess[:, 0, 1] ** 2
    return CriticalPointScan(points=points, hessian_det=det)


def uniform_points(dom: Domain, n: int, seed: int) -> np.ndarray:
    return philox_generator(seed, POINT_STREAM).uniform(-dom.R, dom.R, size=(n, dom.dim))


def curvature_moment_sequence(
    fld: JetField,
    dom: Domain,
    exponent: float = 1.5,
    sizes: tuple[int, ...] = (10**4, 10**5, 10**6),
    seed: int = 0,
) -> MomentSequence:
    """Empirical E|kappa|^p over nested prefixes of one uniform point stream."""
    sizes = tuple(sorted(int(n) for n in sizes))
    points = uniform_points(dom, sizes[-1], seed)
    _, grad, hess = fld.jet(points)
    kappa, _ = curvature_from_jet(grad, hess)
    powered = np.abs(kappa) ** exponent
    defined = ~np.isnan(powered)
    means = []
    for n in sizes:
        head = powered[:n][defined[:n]]
        means.append(float(head.mean()) if head.size else math.nan)
    return MomentSequence(exponent=exponent, sizes=sizes, means=tuple(means))
