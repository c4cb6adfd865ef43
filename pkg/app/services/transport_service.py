import csv
import logging
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from app.core.config import settings
from app.core.errors import InvalidInputError, NumericalFlagError, RejectedPlanError
from app.services.field_service import CouplingPlan, identity_plan
from app.services.spectral_service import SpectralMeasure, canonical_representative

logger = logging.getLogger(__name__)

MASS_TOLERANCE = 1e-10
FLOW_FLOOR = 1e-14
PLAN_CSV_COLUMNS = ("s_x", "s_y", "t_x", "t_y", "w")


def pair_cost(s: Any, t: Any) -> float:
    """(|s|^2 + |t|^2 + 1)^3 |s - t|^2."""
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    if s.shape != t.shape:
        raise InvalidInputError(f"frequency shapes differ: {s.shape} vs {t.shape}")
    return float((s @ s + t @ t + 1.0) ** 3 * ((s - t) @ (s - t)))


def _cost_matrix(sources: np.ndarray, targets: np.ndarray) -> np.ndarray:
    s2 = np.sum(sources**2, axis=1)[:, np.newaxis]
    t2 = np.sum(targets**2, axis=1)[np.newaxis, :]
    diff = sources[:, np.newaxis, :] - targets[np.newaxis, :, :]
    return (s2 + t2 + 1.0) ** 3 * np.sum(diff**2, axis=2)


def folded_costs(m1: SpectralMeasure, m2: SpectralMeasure) -> tuple[np.ndarray, np.ndarray]:
    """Cost between representatives, minimized over the sign of the target, and the sign used."""
    plus = _cost_matrix(m1.atoms, m2.atoms)
    minus = _cost_matrix(m1.atoms, -m2.atoms)
    signs = np.where(minus < plus, -1.0, 1.0)
    return np.minimum(plus, minus), signs


def _northwest_corner(supply: np.ndarray, demand: np.ndarray) -> tuple[np.ndarray, list[tuple[int, int]]]:
    n1, n2 = supply.size, demand.size
    flow = np.zeros((n1, n2))
    basis: list[tuple[int, int]] = []
    s, d = supply.copy(), demand.copy()
    i = j = 0
    while True:
        x = min(s[i], d[j])
        flow[i, j] = x
        basis.append((i, j))
        s[i] -= x
        d[j] -= x
        if i == n1 - 1 and j == n2 - 1:
            break
        if j == n2 - 1 or (i < n1 - 1 and s[i] <= d[j]):
            i += 1
        else:
            j += 1
    return flow, basis


def _adjacency(basis: set[tuple[int, int]], n1: int) -> dict[int, list[int]]:
    # Bipartite basis tree: rows are nodes 0..n1-1, columns n1..n1+n2-1.
    adjacent: dict[int, list[int]] = {}
    for i, j in basis:
        adjacent.setdefault(i, []).append(n1 + j)
        adjacent.setdefault(n1 + j, []).append(i)
    return adjacent


def _potentials(cost: np.ndarray, basis: set[tuple[int, int]]) -> tuple[np.ndarray, np.ndarray]:
    n1, n2 = cost.shape
    adjacent = _adjacency(basis, n1)
    u = np.full(n1, np.nan)
    v = np.full(n2, np.nan)
    u[0] = 0.0
    queue = deque([0])
    while queue:
        node = queue.popleft()
        for other in adjacent.get(node, []):
            if node < n1:
                j = other - n1
                if np.isnan(v[j]):
                    v[j] = cost[node, j] - u[node]
                    queue.append(other)
            elif np.isnan(u[other]):
                u[other] = cost[other, node - n1] - v[node - n1]
                queue.append(other)
    return u, v


def _cycle(basis: set[tuple[int, int]], n1: int, entering: tuple[int, int]) -> list[tuple[int, int]]:
    """Basis cells on the tree path closing the entering cell, ordered from its column to its row."""
    i, j = entering
    adjacent = _adjacency(basis, n1)
    start, goal = n1 + j, i
    parent = {start: start}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            break
        for other in adjacent.get(node, []):
            if other not in parent:
                parent[other] = node
                queue.append(other)
    nodes = [goal]
    while nodes[-1] != start:
        nodes.append(parent[nodes[-1]])
    nodes.reverse()
    cells = []
    for a, b in zip(nodes[:-1], nodes[1:]):
        row, col = (a, b - n1) if a < n1 else (b, a - n1)
        cells.append((row, col))
    return cells


def transportation_simplex(
    cost: np.ndarray,
    supply: np.ndarray,
    demand: np.ndarray,
    max_pivots: int | None = None,
) -> np.ndarray:
    """Exact primal transportation simplex (northwest-corner start, MODI pricing, Bland's rule)."""
    n1, n2 = cost.shape
    flow, order = _northwest_corner(supply, demand)
    basis = set(order)
    tolerance = 1e-12 * max(1.0, float(np.max(cost)))
    limit = max_pivots or settings.transport_max_pivots

    for pivot in range(limit + 1):
        u, v = _potentials(cost, basis)
        reduced = cost - u[:, np.newaxis] - v[np.newaxis, :]
        candidates = np.flatnonzero(reduced.ravel() < -tolerance)
        if candidates.size == 0:
            logger.debug("transport optimal pivots=%d", pivot)
            return flow
        if pivot == limit:
            break
        entering = divmod(int(candidates[0]), n2)
        path = _cycle(basis, n1, entering)
        losing = path[0::2]
        theta = min(flow[cell] for cell in losing)
        leaving = min(cell for cell in losing if flow[cell] <= theta)
        flow[entering] += theta
        for k, cell in enumerate(path):
            flow[cell] += -theta if k % 2 == 0 else theta
        flow[leaving] = 0.0
        basis.discard(leaving)
        basis.add(entering)
    raise NumericalFlagError(f"transportation simplex did not converge within {limit} pivots")


def optimal_coupling(m1: SpectralMeasure, m2: SpectralMeasure) -> CouplingPlan:
    if m1.dim != m2.dim:
        raise InvalidInputError(f"measures have dimensions {m1.dim} and {m2.dim}")
    cap = settings.max_transport_atoms
    if m1.size > cap or m2.size > cap:
        raise InvalidInputError(f"transport is limited to {cap} atoms per measure")
    gap = abs(math.fsum(m1.weights.tolist()) - math.fsum(m2.weights.tolist()))
    if gap > MASS_TOLERANCE:
        raise RejectedPlanError(f"measures carry unequal mass (difference {gap:.3e})")
    if m1.same_as(m2):
        return identity_plan(m1)

    cost, signs = folded_costs(m1, m2)
    flow = transportation_simplex(cost, m1.weights, m2.weights)
    rows, cols = np.nonzero(flow > FLOW_FLOOR)
    weights = flow[rows, cols]
    plan = CouplingPlan(
        sources=m1.atoms[rows],
        targets=m2.atoms[cols] * signs[rows, cols][:, np.newaxis],
        weights=weights,
        cost=float(math.fsum((weights * cost[rows, cols]).tolist())),
    )
    logger.info("optimal coupling atoms=%dx%d pairs=%d cost=%.6e", m1.size, m2.size, len(plan), plan.cost)
    return plan


def sigma_bound_proxy(plan: CouplingPlan, R: float, d: int) -> float:
    return (R**d + 1.0) * plan.cost


@dataclass(frozen=True)
class PlanMarginals:
    first_atoms: np.ndarray
    first_weights: np.ndarray
    second_atoms: np.ndarray
    second_weights: np.ndarray


def _group(atoms: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    totals: dict[tuple[float, ...], float] = {}
    for atom, weight in zip(atoms, weights):
        key = tuple(canonical_representative(atom).tolist())
        totals[key] = totals.get(key, 0.0) + float(weight)
    keys = sorted(totals)
    return np.array(keys, dtype=float), np.array([totals[k] for k in keys])


def plan_marginals(plan: CouplingPlan) -> PlanMarginals:
    first_atoms, first_weights = _group(plan.sources, plan.weights)
    second_atoms, second_weights = _group(plan.targets, plan.weights)
    return PlanMarginals(first_atoms, first_weights, second_atoms, second_weights)


def plan_summary(plan: CouplingPlan, R: float | None = None) -> dict:
    summary = {
        "pairs": len(plan),
        "cost": plan.cost,
        "mass": math.fsum(plan.weights.tolist()),
    }
    if R is not None:
        summary["sigma_bound_proxy"] = sigma_bound_proxy(plan, R, plan.sources.shape[1])
    return summary


def write_plan_csv(plan: CouplingPlan, path: Path) -> Path:
    if plan.sources.shape[1] != 2:
        raise InvalidInputError("plan CSV export is defined for d = 2")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(PLAN_CSV_COLUMNS)
        for s, t, w in plan.pairs:
            writer.writerow([repr(float(s[0])), repr(float(s[1])), repr(float(t[0])), repr(float(t[1])), repr(w)])
    return path
