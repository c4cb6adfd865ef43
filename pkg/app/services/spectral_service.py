import json
import math
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Any

import numpy as np

from app.core.errors import InvalidInputError

WEIGHT_SUM_TOLERANCE = 1e-12
BUILTIN_NAMES = ("rpw_circle", "bargmann_fock", "atoms")
PERTURBATION_FAMILIES = ("dilation", "rotation")


def canonical_representative(atom: Any) -> np.ndarray:
    """Fold a frequency into the upper half space: the last nonzero coordinate is positive."""
    vec = np.asarray(atom, dtype=float).copy()
    nonzero = np.flatnonzero(vec)
    if nonzero.size and vec[nonzero[-1]] < 0.0:
        vec = -vec
    return vec + 0.0  # normalizes -0.0


def _canonicalize_rows(atoms: np.ndarray) -> np.ndarray:
    return np.vstack([canonical_representative(row) for row in atoms])


def _frozen(values: np.ndarray) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SpectralMeasure:
    atoms: np.ndarray
    weights: np.ndarray
    name: str = "atoms"
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[np.newaxis, :]
        weights = np.asarray(self.weights, dtype=float).ravel()

        if atoms.ndim != 2 or atoms.shape[0] == 0:
            raise InvalidInputError("atoms must be a non-empty list of frequency vectors")
        if atoms.shape[1] < 2:
            raise InvalidInputError("spectral measures need dimension d >= 2")
        if weights.shape[0] != atoms.shape[0]:
            raise InvalidInputError(f"got {atoms.shape[0]} atoms but {weights.shape[0]} weights")
        if not (np.all(np.isfinite(atoms)) and np.all(np.isfinite(weights))):
            raise InvalidInputError("atoms and weights must be finite")
        if np.any(weights <= 0.0):
            raise InvalidInputError("weights must be strictly positive")
        total = math.fsum(weights.tolist())
        if abs(total - 1.0) > WEIGHT_SUM_TOLERANCE:
            raise InvalidInputError(f"weights must sum to 1, got {total!r}")

        atoms = _canonicalize_rows(atoms)
        if np.unique(atoms, axis=0).shape[0] != atoms.shape[0]:
            raise InvalidInputError("atoms must be distinct up to sign (the +/- pair is implicit)")
        if not np.any(np.linalg.norm(atoms, axis=1) > 0.0):
            raise InvalidInputError("at least one atom must have nonzero norm")

        object.__setattr__(self, "atoms", _frozen(atoms))
        object.__setattr__(self, "weights", _frozen(weights))

    @property
    def dim(self) -> int:
        return int(self.atoms.shape[1])

    @property
    def size(self) -> int:
        return int(self.atoms.shape[0])

    def same_as(self, other: "SpectralMeasure", atol: float = 0.0) -> bool:
        """Equality as symmetric atom/weight sets, ignoring storage order."""
        if self.dim != other.dim or self.size != other.size:
            return False
        mine = np.lexsort(self.atoms.T[::-1])
        theirs = np.lexsort(other.atoms.T[::-1])
        return bool(
            np.allclose(self.atoms[mine], other.atoms[theirs], rtol=0.0, atol=atol)
            and np.allclose(self.weights[mine], other.weights[theirs], rtol=0.0, atol=max(atol, 1e-15))
        )


@dataclass(frozen=True)
class SpectralMoments:
    second_moment: np.ndarray
    moments: dict[tuple[int, ...], float]
    spectral_radius: float

    def moment(self, alpha: tuple[int, ...]) -> float:
        return self.moments[tuple(alpha)]


@dataclass(frozen=True)
class NondegeneracyReport:
    passed: bool
    failures: tuple[str, ...]
    min_eigenvalue: float
    signed_atom_count: int
    atom_rank: int

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "failures": list(self.failures),
            "min_eigenvalue": self.min_eigenvalue,
            "signed_atom_count": self.signed_atom_count,
            "atom_rank": self.atom_rank,
        }


def multi_indices(dim: int, max_order: int) -> list[tuple[int, ...]]:
    """All multi-indices with |alpha| <= max_order in lexicographic order."""
    return [alpha for alpha in product(range(max_order + 1), repeat=dim) if sum(alpha) <= max_order]


def kernel_eval(m: SpectralMeasure, t: Any) -> float | np.ndarray:
    """K(t) = sum_k w_k cos<lambda_k, t>; accepts one vector or an (n, d) stack."""
    arr = np.asarray(t, dtype=float)
    if arr.shape[-1] != m.dim:
        raise InvalidInputError(f"expected vectors of dimension {m.dim}, got shape {arr.shape}")
    phases = arr @ m.atoms.T
    values = np.cos(phases) @ m.weights
    if arr.ndim == 1:
        return float(values)
    return values


def second_moments(m: SpectralMeasure) -> SpectralMoments:
    lam = m.atoms
    second = (lam * m.weights[:, np.newaxis]).T @ lam
    second = 0.5 * (second + second.T)
    moments: dict[tuple[int, ...], float] = {}
    for alpha in multi_indices(m.dim, 4):
        monomial = np.prod(lam ** np.asarray(alpha, dtype=float), axis=1)
        moments[alpha] = float(monomial @ m.weights)
    radius = float(np.max(np.linalg.norm(lam, axis=1)))
    return SpectralMoments(second_moment=second, moments=moments, spectral_radius=radius)


def validate_nondegenerate(m: SpectralMeasure) -> NondegeneracyReport:
    failures: list[str] = []
    moments = second_moments(m)
    eigenvalues = np.linalg.eigvalsh(moments.second_moment)
    min_eig = float(eigenvalues[0])
    if min_eig <= 1e-12 * max(1.0, float(eigenvalues[-1])):
        failures.append("second moment matrix is singular")

    norms = np.linalg.norm(m.atoms, axis=1)
    signed_count = int(2 * np.count_nonzero(norms > 0.0) + np.count_nonzero(norms == 0.0))
    if signed_count < m.dim + 1:
        failures.append(f"only {signed_count} signed atoms, need at least {m.dim + 1}")

    rank = int(np.linalg.matrix_rank(m.atoms))
    if rank < m.dim:
        failures.append(f"atoms span a {rank}-dimensional subspace of R^{m.dim}")

    return NondegeneracyReport(
        passed=not failures,
        failures=tuple(failures),
        min_eigenvalue=min_eig,
        signed_atom_count=signed_count,
        atom_rank=rank,
    )


def _rpw_circle(M: int, radius: float = 1.0) -> SpectralMeasure:
    angles = math.pi * np.arange(M) / M
    atoms = radius * np.column_stack([np.cos(angles), np.sin(angles)])
    weights = np.full(M, 1.0 / M)
    return SpectralMeasure(atoms=atoms, weights=weights, name="rpw_circle", params={"M": M, "radius": radius})


def _bargmann_fock(M: int, radial_nodes: int = 8, radial_cutoff: float = 5.0) -> SpectralMeasure:
    if radial_nodes < 1 or radial_cutoff <= 0.0:
        raise InvalidInputError("bargmann_fock needs radial_nodes >= 1 and radial_cutoff > 0")
    nodes, gl_weights = np.polynomial.legendre.leggauss(radial_nodes)
    radii = 0.5 * radial_cutoff * (nodes + 1.0)
    # Polar form of the standard Gaussian density: r exp(-r^2/2) dr dtheta.
    radial = 0.5 * radial_cutoff * gl_weights * radii * np.exp(-0.5 * radii**2)
    radial = radial / radial.sum()

    angles = math.pi * np.arange(M) / M
    atoms = np.vstack([np.column_stack([r * np.cos(angles), r * np.sin(angles)]) for r in radii])
    weights = np.concatenate([np.full(M, w / M) for w in radial])
    weights = weights / math.fsum(weights.tolist())
    return SpectralMeasure(
        atoms=atoms,
        weights=weights,
        name="bargmann_fock",
        params={"M": M, "radial_nodes": radial_nodes, "radial_cutoff": radial_cutoff},
    )


def _from_atom_list(atoms: list) -> SpectralMeasure:
    if not atoms:
        raise InvalidInputError("atoms builtin needs at least one (atom, weight) pair")
    vectors = [np.asarray(atom, dtype=float) for atom, _ in atoms]
    weights = [float(weight) for _, weight in atoms]
    return SpectralMeasure(atoms=np.vstack(vectors), weights=np.asarray(weights), name="atoms")


def builtin_measure(name: str, params: dict[str, Any] | None = None) -> SpectralMeasure:
    params = dict(params or {})
    key = name.strip().lower()
    if key not in BUILTIN_NAMES:
        raise InvalidInputError(f"unknown builtin measure {name!r}; expected one of {', '.join(BUILTIN_NAMES)}")
    if key == "atoms":
        return _from_atom_list(params.get("atoms", []))

    M = int(params.pop("M", params.pop("m", 0)))
    if M < 2:
        raise InvalidInputError(f"{key} needs M >= 2, got {M}")
    if key == "rpw_circle":
        return _rpw_circle(M, radius=float(params.get("radius", 1.0)))
    return _bargmann_fock(
        M,
        radial_nodes=int(params.get("radial_nodes", 8)),
        radial_cutoff=float(params.get("radial_cutoff", 5.0)),
    )


def perturbed_measure(m: SpectralMeasure, eps: float, family: str = "dilation") -> SpectralMeasure:
    family = family.strip().lower()
    if family not in PERTURBATION_FAMILIES:
        raise InvalidInputError(f"unknown perturbation family {family!r}")
    if eps == 0.0:
        return m
    if family == "dilation":
        atoms = m.atoms * (1.0 + eps)
    else:
        if m.dim != 2:
            raise InvalidInputError("rotation perturbation is defined for d = 2 only")
        c, s = math.cos(eps), math.sin(eps)
        atoms = m.atoms @ np.array([[c, s], [-s, c]])
    return SpectralMeasure(
        atoms=atoms,
        weights=m.weights,
        name=f"{m.name}+{family}",
        params={**m.params, "eps": eps, "family": family},
    )


def dump_measure(m: SpectralMeasure) -> dict[str, Any]:
    return {
        "dim": m.dim,
        "atoms": [[float(v) for v in row] for row in m.atoms],
        "weights": [float(w) for w in m.weights],
    }


def load_measure(spec: dict[str, Any] | str | Path) -> SpectralMeasure:
    if isinstance(spec, (str, Path)):
        spec = json.loads(Path(spec).read_text(encoding="utf-8"))
    if not isinstance(spec, dict):
        raise InvalidInputError("measure definition must be a JSON object")

    builtin = spec.get("builtin")
    if builtin:
        return builtin_measure(str(builtin), spec.get("params") or {})

    atoms = spec.get("atoms")
    weights = spec.get("weights")
    if atoms is None or weights is None:
        raise InvalidInputError("measure definition needs either 'builtin' or both 'atoms' and 'weights'")
    measure = SpectralMeasure(atoms=np.asarray(atoms, dtype=float), weights=np.asarray(weights, dtype=float))
    dim = spec.get("dim")
    if dim is not None and int(dim) != measure.dim:
        raise InvalidInputError(f"declared dim {dim} does not match atoms of dimension {measure.dim}")
    return measure
