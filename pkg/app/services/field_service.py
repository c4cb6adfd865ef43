import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Protocol

import numpy as np

from app.core.config import settings
from app.core.errors import InvalidInputError, RejectedPlanError
from app.services.spectral_service import (
    SpectralMeasure,
    canonical_representative,
    dump_measure,
    multi_indices,
)

# Philox key offsets: stream s of seed n uses key n + (s << 64).
COEFFICIENT_STREAM = 0
POINT_STREAM = 1
JITTER_STREAM = 2
BOOTSTRAP_STREAM = 3
DRAW_STREAM = 4

MARGINAL_TOLERANCE = 1e-10
_POINT_CHUNK = 8192
_GRID_CHUNK = 1 << 22


def philox_generator(seed: int, stream: int = COEFFICIENT_STREAM) -> np.random.Generator:
    if seed < 0:
        raise InvalidInputError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.Philox(key=int(seed) + (int(stream) << 64)))


@dataclass(frozen=True)
class GridJet:
    """Jet of a field on a tensor grid; arrays are indexed [i, j] <-> (xs[i], ys[j])."""

    xs: np.ndarray
    ys: np.ndarray
    f: np.ndarray
    fx: np.ndarray
    fy: np.ndarray
    fxx: np.ndarray
    fxy: np.ndarray
    fyy: np.ndarray

    def __sub__(self, other: "GridJet") -> "GridJet":
        return GridJet(
            xs=self.xs,
            ys=self.ys,
            f=self.f - other.f,
            fx=self.fx - other.fx,
            fy=self.fy - other.fy,
            fxx=self.fxx - other.fxx,
            fxy=self.fxy - other.fxy,
            fyy=self.fyy - other.fyy,
        )

    @property
    def grad_norm(self) -> np.ndarray:
        return np.hypot(self.fx, self.fy)

    def components(self) -> tuple[np.ndarray, ...]:
        return (self.f, self.fx, self.fy, self.fxx, self.fxy, self.fyy)


class JetField(Protocol):
    dim: int

    def jet(self, points: Any) -> tuple[np.ndarray, np.ndarray, np.ndarray]: ...

    def grid_jet(self, xs: np.ndarray, ys: np.ndarray) -> GridJet: ...

    def negated(self) -> "JetField": ...


@dataclass(frozen=True, eq=False)
class SampledField:
    """f(x) = sum_k sqrt(w_k) (a_k cos<lambda_k, x> + b_k sin<lambda_k, x>).

    `frequencies`/`weights` are the synthesis terms. They equal the measure's atoms for
    plain samples; coupled fields may split an atom across several terms, which leaves
    the law unchanged.
    """

    measure: SpectralMeasure
    frequencies: np.ndarray
    weights: np.ndarray
    coeffs: np.ndarray
    seed: int | None = None

    @property
    def dim(self) -> int:
        return int(self.frequencies.shape[1])

    @property
    def _amplitudes(self) -> tuple[np.ndarray, np.ndarray]:
        root = np.sqrt(self.weights)
        return root * self.coeffs[:, 0], root * self.coeffs[:, 1]

    def jet(self, points: Any) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pts = np.asarray(points, dtype=float)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        if pts.shape[1] != self.dim:
            raise InvalidInputError(f"expected points of dimension {self.dim}, got shape {pts.shape}")
        alpha, beta = self._amplitudes
        lam = self.frequencies
        n = pts.shape[0]
        f = np.empty(n)
        grad = np.empty((n, self.dim))
        hess = np.empty((n, self.dim, self.dim))
        for start in range(0, n, _POINT_CHUNK):
            stop = min(start + _POINT_CHUNK, n)
            theta = pts[start:stop] @ lam.T
            c, s = np.cos(theta), np.sin(theta)
            value_terms = c * alpha + s * beta
            slope_terms = c * beta - s * alpha
            f[start:stop] = value_terms.sum(axis=1)
            grad[start:stop] = slope_terms @ lam
            hess[start:stop] = -np.einsum("nk,ki,kj->nij", value_terms, lam, lam)
        if single:
            return f[0], grad[0], hess[0]
        return f, grad, hess

    def grid_jet(self, xs: np.ndarray, ys: np.ndarray) -> GridJet:
        if self.dim != 2:
            raise InvalidInputError("grid evaluation is implemented for d = 2")
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        alpha, beta = self._amplitudes
        lx, ly = self.frequencies[:, 0], self.frequencies[:, 1]
        # z_k = (alpha_k - i beta_k) e^{i<lambda_k, x>} factorizes over the two axes.
        ex = np.exp(1j * np.outer(xs, lx)) * (alpha - 1j * beta)
        ey = np.exp(1j * np.outer(ys, ly))

        def weighted(factor: np.ndarray) -> np.ndarray:
            return (ex * factor) @ ey.T

        return GridJet(
            xs=xs,
            ys=ys,
            f=weighted(np.ones_like(lx)).real,
            fx=-weighted(lx).imag,
            fy=-weighted(ly).imag,
            fxx=-weighted(lx * lx).real,
            fxy=-weighted(lx * ly).real,
            fyy=-weighted(ly * ly).real,
        )

    def negated(self) -> "SampledField":
        return SampledField(
            measure=self.measure,
            frequencies=self.frequencies,
            weights=self.weights,
            coeffs=-self.coeffs,
            seed=self.seed,
        )


@dataclass(frozen=True, eq=False)
class QuadraticField:
    """Deterministic f(x) = c + <g, x> + x^T Q x / 2 with the same jet interface."""

    constant: float = 0.0
    linear: tuple[float, ...] = (0.0, 0.0)
    quadratic: tuple[tuple[float, ...], ...] = ((0.0, 0.0), (0.0, 0.0))

    @classmethod
    def radial(cls, scale: float = 0.5) -> "QuadraticField":
        # scale * (x^2 + y^2)
        return cls(quadratic=((2.0 * scale, 0.0), (0.0, 2.0 * scale)))

    @classmethod
    def linear_form(cls, direction: tuple[float, float], offset: float = 0.0) -> "QuadraticField":
        return cls(constant=offset, linear=tuple(float(v) for v in direction))

    @property
    def dim(self) -> int:
        return len(self.linear)

    def jet(self, points: Any) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pts = np.asarray(points, dtype=float)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        g = np.asarray(self.linear, dtype=float)
        q = np.asarray(self.quadratic, dtype=float)
        f = self.constant + pts @ g + 0.5 * np.einsum("ni,ij,nj->n", pts, q, pts)
        grad = g + pts @ q.T
        hess = np.broadcast_to(q, (pts.shape[0], self.dim, self.dim)).copy()
        if single:
            return f[0], grad[0], hess[0]
        return f, grad, hess

    def grid_jet(self, xs: np.ndarray, ys: np.ndarray) -> GridJet:
        X, Y = np.meshgrid(np.asarray(xs, dtype=float), np.asarray(ys, dtype=float), indexing="ij")
        (qxx, qxy), (_, qyy) = self.quadratic
        gx, gy = self.linear
        return GridJet(
            xs=np.asarray(xs, dtype=float),
            ys=np.asarray(ys, dtype=float),
            f=self.constant + gx * X + gy * Y + 0.5 * (qxx * X * X + 2.0 * qxy * X * Y + qyy * Y * Y),
            fx=gx + qxx * X + qxy * Y,
            fy=gy + qxy * X + qyy * Y,
            fxx=np.full_like(X, qxx),
            fxy=np.full_like(X, qxy),
            fyy=np.full_like(X, qyy),
        )

    def negated(self) -> "QuadraticField":
        return QuadraticField(
            constant=-self.constant,
            linear=tuple(-v for v in self.linear),
            quadratic=tuple(tuple(-v for v in row) for row in self.quadratic),
        )


def sample(m: SpectralMeasure, seed: int) -> SampledField:
    # Coefficients come from the seed's Philox coefficient stream in row-major (k, slot) order;
    # the normal sampler rejects draws, so only the stream prefix is fixed, not a counter index per entry.
    coeffs = philox_generator(seed, COEFFICIENT_STREAM).standard_normal((m.size, 2))
    coeffs.setflags(write=False)
    return SampledField(measure=m, frequencies=m.atoms, weights=m.weights, coeffs=coeffs, seed=seed)


def from_coefficients(m: SpectralMeasure, coeffs: Any) -> SampledField:
    arr = np.array(coeffs, dtype=float).reshape(m.size, 2)
    arr.setflags(write=False)
    return SampledField(measure=m, frequencies=m.atoms, weights=m.weights, coeffs=arr, seed=None)


def eval_jet(fld: JetField, x: Any) -> tuple[float, np.ndarray, np.ndarray]:
    f, grad, hess = fld.jet(np.asarray(x, dtype=float))
    hess = 0.5 * (hess + np.swapaxes(hess, -1, -2))
    return f, grad, hess


@dataclass(frozen=True)
class CouplingPlan:
    sources: np.ndarray
    targets: np.ndarray
    weights: np.ndarray
    cost: float = 0.0

    def __post_init__(self) -> None:
        sources = np.atleast_2d(np.asarray(self.sources, dtype=float))
        targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        weights = np.asarray(self.weights, dtype=float).ravel()
        if sources.shape != targets.shape or sources.shape[0] != weights.shape[0]:
            raise RejectedPlanError("plan sources, targets and weights must have matching lengths")
        if np.any(weights <= 0.0):
            raise RejectedPlanError("plan weights must be strictly positive")
        object.__setattr__(self, "sources", sources)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "weights", weights)

    @property
    def pairs(self) -> list[tuple[np.ndarray, np.ndarray, float]]:
        return [(s, t, float(w)) for s, t, w in zip(self.sources, self.targets, self.weights)]

    def __len__(self) -> int:
        return int(self.weights.shape[0])


def identity_plan(m: SpectralMeasure) -> CouplingPlan:
    return CouplingPlan(sources=m.atoms, targets=m.atoms, weights=m.weights, cost=0.0)


def plan_marginal(m: SpectralMeasure, atoms: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Mass the plan puts on each atom of m (atoms compared up to sign)."""
    index = {tuple(row): k for k, row in enumerate(m.atoms.tolist())}
    mass = np.zeros(m.size)
    for atom, weight in zip(atoms, weights):
        key = tuple(canonical_representative(atom).tolist())
        if key not in index:
            raise RejectedPlanError(f"plan atom {list(atom)} is not an atom of the measure")
        mass[index[key]] += weight
    return mass


def _validate_plan(m1: SpectralMeasure, m2: SpectralMeasure, plan: CouplingPlan) -> None:
    if plan.sources.shape[1] != m1.dim or m1.dim != m2.dim:
        raise RejectedPlanError("plan and measures must share one dimension")
    for label, m, atoms in (("first", m1, plan.sources), ("second", m2, plan.targets)):
        mismatch = np.max(np.abs(plan_marginal(m, atoms, plan.weights) - m.weights))
        if mismatch > MARGINAL_TOLERANCE:
            raise RejectedPlanError(f"plan marginal on the {label} measure is off by {mismatch:.3e}")


@dataclass(frozen=True, eq=False)
class CoupledPair:
    field1: SampledField
    field2: SampledField
    plan: CouplingPlan

    @property
    def seed(self) -> int | None:
        return self.field1.seed


def couple(m1: SpectralMeasure, m2: SpectralMeasure, plan: CouplingPlan, seed: int) -> CoupledPair:
    _validate_plan(m1, m2, plan)
    coeffs = philox_generator(seed, COEFFICIENT_STREAM).standard_normal((len(plan), 2))
    coeffs.setflags(write=False)
    field1 = SampledField(measure=m1, frequencies=plan.sources, weights=plan.weights, coeffs=coeffs, seed=seed)
    field2 = SampledField(measure=m2, frequencies=plan.targets, weights=plan.weights, coeffs=coeffs, seed=seed)
    return CoupledPair(field1=field1, field2=field2, plan=plan)


def correlation_at(cp: CoupledPair, x: Any) -> float | np.ndarray:
    pts = np.asarray(x, dtype=float)
    delta = cp.plan.sources - cp.plan.targets
    rho = np.cos(pts @ delta.T) @ cp.plan.weights
    if pts.ndim == 1:
        return float(rho)
    return rho


@dataclass(frozen=True)
class CouplingDiagnostics:
    sigma_D: float
    beta: float
    grid_spacing: float
    argmax_point: tuple[float, ...]
    argmax_index: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "sigma_D": self.sigma_D,
            "beta": self.beta,
            "grid_spacing": self.grid_spacing,
            "argmax_point": list(self.argmax_point),
            "argmax_index": list(self.argmax_index),
        }


def diagnostic_axis(R: float, grid_spacing: float) -> np.ndarray:
    if not (R > 0.0 and grid_spacing > 0.0) or grid_spacing > 2.0 * R:
        raise InvalidInputError(f"empty diagnostics grid for R={R}, spacing={grid_spacing}")
    n = int(math.floor(2.0 * R / grid_spacing + 1e-9)) + 1
    return np.linspace(-R, R, n)


def fluctuation_variance_grid(cp: CoupledPair, xs: np.ndarray, ys: np.ndarray) -> dict[tuple[int, ...], np.ndarray]:
    """Var d^alpha F on the grid: sum w ((s^a - t^a)^2 + 4 s^a t^a sin^2(<s - t, x> / 2)).

    Pairs with s = t contribute exactly 0.
    """
    s, t, w = cp.plan.sources, cp.plan.targets, cp.plan.weights
    delta = s - t
    alphas = multi_indices(2, 2)
    constants, crosses = {}, {}
    for alpha in alphas:
        power = np.asarray(alpha, dtype=float)
        s_a = np.prod(s**power, axis=1)
        t_a = np.prod(t**power, axis=1)
        constants[alpha] = float(w @ (s_a - t_a) ** 2)
        crosses[alpha] = 4.0 * w * s_a * t_a

    out = {alpha: np.empty((xs.size, ys.size)) for alpha in alphas}
    rows = max(1, _GRID_CHUNK // max(1, ys.size * len(w)))
    for start in range(0, xs.size, rows):
        stop = min(start + rows, xs.size)
        phase = xs[start:stop, None, None] * delta[:, 0] + ys[None, :, None] * delta[:, 1]
        half_sine = np.sin(0.5 * phase) ** 2
        for alpha in alphas:
            out[alpha][start:stop] = constants[alpha] + half_sine @ crosses[alpha]
    return {alpha: np.maximum(values, 0.0) for alpha, values in out.items()}


def diagnostics(cp: CoupledPair, R: float, grid_spacing: float | None = None) -> CouplingDiagnostics:
    if cp.field1.dim != 2:
        raise InvalidInputError("coupling diagnostics are implemented for d = 2")
    spacing = grid_spacing or settings.diagnostics_grid_spacing
    axis = diagnostic_axis(R, spacing)

    variances = fluctuation_variance_grid(cp, axis, axis)
    stacked = np.stack(list(variances.values()))
    worst = stacked.max(axis=0)
    flat = int(np.argmax(worst))
    i, j = np.unravel_index(flat, worst.shape)

    difference = cp.field1.grid_jet(axis, axis) - cp.field2.grid_jet(axis, axis)
    beta = max(float(np.max(np.abs(component))) for component in difference.components())
    return CouplingDiagnostics(
        sigma_D=float(math.sqrt(worst[i, j])),
        beta=beta,
        grid_spacing=float(axis[1] - axis[0]) if axis.size > 1 else spacing,
        argmax_point=(float(axis[i]), float(axis[j])),
        argmax_index=(int(i), int(j)),
    )


def dump_field(fld: SampledField, R: float, n: int, path: Path, fmt: str = "csv") -> Path:
    axis = np.linspace(-R, R, n)
    grid = fld.grid_jet(axis, axis)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stacked = np.stack(grid.components(), axis=-1)  # (n, n, 6), row-major over (x, y)

    if fmt == "csv":
        X, Y = np.meshgrid(axis, axis, indexing="ij")
        table = np.column_stack([X.ravel(), Y.ravel(), stacked.reshape(-1, 6)])
        lines = ["x,y,f,f_x,f_y,f_xx,f_xy,f_yy"]
        lines.extend(",".join(repr(float(v)) for v in row) for row in table)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    if fmt != "raw":
        raise InvalidInputError(f"unknown field dump format {fmt!r}")
    path.write_bytes(stacked.astype("<f8").tobytes(order="C"))
    header = {
        "R": R,
        "n": n,
        "seed": fld.seed,
        "columns": ["f", "f_x", "f_y", "f_xx", "f_xy", "f_yy"],
        "measure": dump_measure(fld.measure),
    }
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(header, sort_keys=True, ensure_ascii=True), encoding="utf-8")
    return path
