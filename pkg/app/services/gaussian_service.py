import math
from dataclasses import asdict, dataclass
from typing import Any, Iterable

import numpy as np
from scipy import special, stats

from app.core.config import settings
from app.core.errors import InvalidInputError
from app.services.field_service import BOOTSTRAP_STREAM, DRAW_STREAM, philox_generator, sample
from app.services.geometry_service import Domain, curvature_from_jet, uniform_points
from app.services.spectral_service import SpectralMeasure, second_moments, validate_nondegenerate

K0_SWITCH = 2.0
_K0_SERIES_TERMS = 30
_K0_TRAPEZOID_NODES = 64
TAIL_CONSTANT = math.sqrt(2.0) / math.pi
GRADIENT_METHODS = ("auto", "closed_form", "elliptic", "monte_carlo")


def _k0_series(x: np.ndarray) -> np.ndarray:
    # K0(x) = -(ln(x/2) + gamma) I0(x) + sum_k H_k (x^2/4)^k / (k!)^2
    y = 0.25 * x * x
    term = np.ones_like(x)
    i0 = np.ones_like(x)
    tail = np.zeros_like(x)
    harmonic = 0.0
    for k in range(1, _K0_SERIES_TERMS + 1):
        term = term * y / (k * k)
        harmonic += 1.0 / k
        i0 = i0 + term
        tail = tail + harmonic * term
    return -(np.log(0.5 * x) + np.euler_gamma) * i0 + tail


def _k0e_integral(x: np.ndarray) -> np.ndarray:
    # e^x K0(x) = int_0^inf exp(-x (cosh t - 1)) dt; trapezoid converges geometrically here.
    h = np.minimum(0.25, 0.5 / np.sqrt(x))
    t = h[:, np.newaxis] * np.arange(_K0_TRAPEZOID_NODES)[np.newaxis, :]
    integrand = np.exp(-2.0 * x[:, np.newaxis] * np.sinh(0.5 * t) ** 2)
    return h * (integrand.sum(axis=1) - 0.5 * integrand[:, 0])


def _positive_argument(x: Any) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0.0)):
        raise InvalidInputError("K0 is defined for x > 0")
    return arr


def bessel_k0e(x: Any) -> float | np.ndarray:
    """Exponentially scaled modified Bessel function e^x K0(x)."""
    arr = _positive_argument(x)
    flat = arr.ravel()
    out = np.empty_like(flat)
    small = flat <= K0_SWITCH
    out[small] = _k0_series(flat[small]) * np.exp(flat[small])
    out[~small] = _k0e_integral(flat[~small])
    if arr.ndim == 0:
        return float(out[0])
    return out.reshape(arr.shape)


def bessel_k0(x: Any) -> float | np.ndarray:
    arr = _positive_argument(x)
    flat = arr.ravel()
    out = np.empty_like(flat)
    small = flat <= K0_SWITCH
    out[small] = _k0_series(flat[small])
    out[~small] = _k0e_integral(flat[~small]) * np.exp(-flat[~small])
    if arr.ndim == 0:
        return float(out[0])
    return out.reshape(arr.shape)


def _check_correlation(rho: float, strict: bool) -> float:
    rho = float(rho)
    if not math.isfinite(rho) or abs(rho) > 1.0 or (strict and abs(rho) == 1.0):
        bound = "(-1, 1)" if strict else "[-1, 1]"
        raise InvalidInputError(f"correlation must lie in {bound}, got {rho}")
    return rho


def product_positive_prob(rho: float) -> float:
    """P(XY > 0) for standard normals with correlation rho, i.e. (pi - arccos rho) / pi."""
    rho = _check_correlation(rho, strict=False)
    upper = 0.5 + math.asin(abs(rho)) / math.pi
    # Reflect through 1 - p so that p(rho) + p(-rho) == 1 holds in floating point.
    return upper if rho >= 0.0 else 1.0 - upper


def arccos_tail_bound(rho: float) -> float:
    rho = _check_correlation(rho, strict=False)
    return TAIL_CONSTANT * math.sqrt(1.0 - rho)


def product_density(rho: float, z: Any) -> float | np.ndarray:
    """Density of Z = XY; returns +inf at z = 0 where the density has a log singularity."""
    rho = _check_correlation(rho, strict=True)
    arr = np.asarray(z, dtype=float)
    flat = arr.ravel()
    out = np.full(flat.shape, math.inf)
    scale = 1.0 - rho * rho
    nonzero = flat != 0.0
    zz = flat[nonzero]
    u = np.abs(zz) / scale
    out[nonzero] = np.exp((rho * zz - np.abs(zz)) / scale) * bessel_k0e(u) / (math.pi * math.sqrt(scale))
    if arr.ndim == 0:
        return float(out[0])
    return out.reshape(arr.shape)


@dataclass(frozen=True)
class GradientNormEstimate:
    value: float
    standard_error: float
    method: str
    n: int = 0


def _is_isotropic(second: np.ndarray) -> bool:
    c = float(np.trace(second)) / second.shape[0]
    return bool(np.max(np.abs(second - c * np.eye(second.shape[0]))) <= 1e-12 * max(c, 1.0))


def expected_gradient_norm(
    m: SpectralMeasure,
    n_mc: int = 100000,
    seed: int = 0,
    method: str = "auto",
) -> GradientNormEstimate:
    """E|G| for G ~ N(0, Lambda), Lambda the second moment matrix of m."""
    if method not in GRADIENT_METHODS:
        raise InvalidInputError(f"unknown method {method!r}; expected one of {', '.join(GRADIENT_METHODS)}")
    report = validate_nondegenerate(m)
    if not report.passed:
        raise InvalidInputError("degenerate spectral measure: " + "; ".join(report.failures))
    second = second_moments(m).second_moment

    if method in ("auto", "closed_form") and m.dim == 2 and _is_isotropic(second):
        c = float(np.trace(second)) / 2.0
        return GradientNormEstimate(value=math.sqrt(c * math.pi / 2.0), standard_error=0.0, method="closed_form")
    if method == "closed_form":
        raise InvalidInputError("closed form needs an isotropic second moment matrix in d = 2")

    if method == "elliptic":
        if m.dim != 2:
            raise InvalidInputError("elliptic form is available in d = 2 only")
        low, high = np.linalg.eigvalsh(second)
        value = math.sqrt(2.0 / math.pi) * math.sqrt(high) * float(special.ellipe(1.0 - low / high))
        return GradientNormEstimate(value=value, standard_error=0.0, method="elliptic")

    if n_mc < 2:
        raise InvalidInputError("Monte Carlo needs n_mc >= 2")
    chol = np.linalg.cholesky(second)
    draws = philox_generator(seed, DRAW_STREAM).standard_normal((n_mc, m.dim)) @ chol.T
    norms = np.linalg.norm(draws, axis=1)
    return GradientNormEstimate(
        value=float(norms.mean()),
        standard_error=float(norms.std(ddof=1) / math.sqrt(n_mc)),
        method="monte_carlo",
        n=n_mc,
    )


@dataclass(frozen=True)
class KacRiceOracle:
    measure: SpectralMeasure
    exp_grad_norm: float
    standard_error: float = 0.0

    @staticmethod
    def density_at(a: float) -> float:
        return float(stats.norm.pdf(a))

    def expected_measure(self, dom: Domain, a: float) -> float:
        return dom.volume * self.density_at(a) * self.exp_grad_norm

    def derivative(self, dom: Domain, a: float) -> float:
        return -a * self.expected_measure(dom, a)


def kac_rice_oracle(m: SpectralMeasure, n_mc: int = 100000, seed: int = 0, method: str = "auto") -> KacRiceOracle:
    estimate = expected_gradient_norm(m, n_mc=n_mc, seed=seed, method=method)
    return KacRiceOracle(measure=m, exp_grad_norm=estimate.value, standard_error=estimate.standard_error)


def kac_rice_expected_measure(m: SpectralMeasure, dom: Domain, a: float, **kwargs: Any) -> float:
    if dom.dim != m.dim:
        raise InvalidInputError(f"domain dimension {dom.dim} does not match measure dimension {m.dim}")
    return kac_rice_oracle(m, **kwargs).expected_measure(dom, a)


@dataclass(frozen=True)
class BandSums:
    """Per-seed tallies of kappa over {|f - a| <= h} and {|f - a| <= h/2}."""

    seed: int
    level: float
    kappa_sum: float
    count: int
    half_kappa_sum: float
    half_count: int
    points: int


def curvature_band_sums(
    m: SpectralMeasure,
    dom: Domain,
    levels: Iterable[float],
    bandwidth: float,
    seed: int,
    n_points: int,
) -> list[BandSums]:
    if not bandwidth > 0.0:
        raise InvalidInputError(f"bandwidth must be positive, got {bandwidth}")
    fld = sample(m, seed)
    points = uniform_points(dom, n_points, seed)
    f, grad, hess = fld.jet(points)
    kappa, _ = curvature_from_jet(grad, hess)
    defined = ~np.isnan(kappa)
    rows = []
    for a in levels:
        offset = np.abs(f - a)
        inside = defined & (offset <= bandwidth)
        half = defined & (offset <= 0.5 * bandwidth)
        rows.append(
            BandSums(
                seed=seed,
                level=float(a),
                kappa_sum=float(kappa[inside].sum()),
                count=int(inside.sum()),
                half_kappa_sum=float(kappa[half].sum()),
                half_count=int(half.sum()),
                points=n_points,
            )
        )
    return rows


@dataclass(frozen=True)
class ConditionalCurvatureEstimate:
    level: float
    bandwidth: float
    estimate: float
    standard_error: float
    accepted: int
    half_bandwidth_estimate: float
    half_bandwidth_accepted: int
    n_seeds: int
    n_points: int
    oracle: float
    flagged: bool = False

    @property
    def z_score(self) -> float:
        if self.flagged or self.standard_error == 0.0:
            return math.nan
        return (self.estimate - self.oracle) / self.standard_error

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["z_score"] = self.z_score
        return payload


def _ratio(total: float, count: int) -> float:
    return total / count if count else math.nan


def combine_band_sums(
    rows: list[BandSums],
    bandwidth: float,
    oracle: float,
    resamples: int | None = None,
    bootstrap_seed: int = 0,
) -> ConditionalCurvatureEstimate:
    """Pool per-seed band tallies for one level; SE from a bootstrap over seeds."""
    rows = sorted(rows, key=lambda r: r.seed)
    level = rows[0].level if rows else math.nan
    sums = np.array([r.kappa_sum for r in rows])
    counts = np.array([r.count for r in rows], dtype=float)
    accepted = int(counts.sum())
    half_accepted = sum(r.half_count for r in rows)
    estimate = _ratio(float(sums.sum()), accepted)

    se = math.nan
    if accepted and len(rows) >= 2:
        n_boot = resamples or settings.bootstrap_resamples
        picks = philox_generator(bootstrap_seed, BOOTSTRAP_STREAM).integers(0, len(rows), size=(n_boot, len(rows)))
        boot_counts = counts[picks].sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(boot_counts > 0, sums[picks].sum(axis=1) / boot_counts, np.nan)
        se = float(np.nanstd(ratios, ddof=1))

    return ConditionalCurvatureEstimate(
        level=level,
        bandwidth=bandwidth,
        estimate=estimate,
        standard_error=se,
        accepted=accepted,
        half_bandwidth_estimate=_ratio(sum(r.half_kappa_sum for r in rows), half_accepted),
        half_bandwidth_accepted=half_accepted,
        n_seeds=len(rows),
        n_points=sum(r.points for r in rows),
        oracle=oracle,
        flagged=accepted == 0,
    )


def conditional_curvature_estimate(
    m: SpectralMeasure,
    dom: Domain,
    a: float,
    bandwidth: float = 0.05,
    seeds: Iterable[int] = range(10),
    points_per_seed: int = 100000,
    resamples: int | None = None,
) -> ConditionalCurvatureEstimate:
    """Band-kernel estimate of E[kappa | f = a]; the oracle is -a E|grad f|."""
    seeds = list(seeds)
    if not seeds:
        raise InvalidInputError("conditional curvature needs at least one seed")
    gradient = expected_gradient_norm(m)
    rows = [curvature_band_sums(m, dom, [a], bandwidth, seed, points_per_seed)[0] for seed in seeds]
    return combine_band_sums(rows, bandwidth, oracle=-a * gradient.value, resamples=resamples)
