import math
from typing import Any

from fastapi import APIRouter, Depends, HTTPException, Query

from app.core.auth import verify_api_key
from app.core.errors import ConfigError, InvalidInputError, NumericalFlagError
from app.schemas.domain import ExperimentConfig, KacRiceRequest, ProductGaussianRequest, TransportRequest
from app.services.export_service import json_ready
from app.services.gaussian_service import arccos_tail_bound, kac_rice_oracle, product_density, product_positive_prob
from app.services.geometry_service import Domain
from app.services.spectral_service import builtin_measure, second_moments, validate_nondegenerate
from app.services.transport_service import optimal_coupling, plan_summary
from app.workers.experiment_worker import run_experiment

router = APIRouter()


def _bad_request(exc: Exception) -> HTTPException:
    return HTTPException(status_code=400, detail=str(exc))


@router.get("/measures/builtin/{name}")
def describe_builtin(
    name: str,
    M: int = Query(default=64),
    radius: float = Query(default=1.0),
    radial_nodes: int = Query(default=8),
    radial_cutoff: float = Query(default=5.0),
) -> dict[str, Any]:
    params = {"M": M, "radius": radius} if name == "rpw_circle" else {
        "M": M,
        "radial_nodes": radial_nodes,
        "radial_cutoff": radial_cutoff,
    }
    try:
        m = builtin_measure(name, params)
    except InvalidInputError as exc:
        raise _bad_request(exc) from exc
    moments = second_moments(m)
    return {
        "name": m.name,
        "params": m.params,
        "size": m.size,
        "dim": m.dim,
        "second_moment": moments.second_moment.tolist(),
        "spectral_radius": moments.spectral_radius,
        "nondegeneracy": validate_nondegenerate(m).to_dict(),
    }


@router.post("/identities/product-gaussian")
def product_gaussian(payload: ProductGaussianRequest) -> dict[str, Any]:
    try:
        probability = product_positive_prob(payload.rho)
        density = []
        if payload.z:
            values = product_density(payload.rho, payload.z)
            density = [None if math.isinf(v) else float(v) for v in values]
    except InvalidInputError as exc:
        raise _bad_request(exc) from exc
    return {
        "rho": payload.rho,
        "positive_probability": probability,
        "tail_bound": arccos_tail_bound(payload.rho),
        "z": payload.z,
        "density": density,
    }


@router.post("/identities/kac-rice")
def kac_rice(payload: KacRiceRequest) -> dict[str, Any]:
    try:
        m = payload.measure.to_measure()
        oracle = kac_rice_oracle(m, n_mc=payload.n_mc)
        dom = Domain(R=payload.R, dim=m.dim)
    except InvalidInputError as exc:
        raise _bad_request(exc) from exc
    return {
        "R": payload.R,
        "level": payload.level,
        "exp_grad_norm": oracle.exp_grad_norm,
        "standard_error": oracle.standard_error,
        "density": oracle.density_at(payload.level),
        "expected_measure": oracle.expected_measure(dom, payload.level),
    }


@router.post("/transport/optimal")
def transport(payload: TransportRequest) -> dict[str, Any]:
    try:
        plan = optimal_coupling(payload.first.to_measure(), payload.second.to_measure())
    except InvalidInputError as exc:
        raise _bad_request(exc) from exc
    return {
        **plan_summary(plan, payload.R),
        "pairs": [
            {"source": s.tolist(), "target": t.tolist(), "weight": w}
            for s, t, w in plan.pairs
        ],
    }


@router.post("/experiments/run", dependencies=[Depends(verify_api_key)])
def run(payload: ExperimentConfig) -> dict[str, Any]:
    try:
        summary = run_experiment(payload)
    except (ConfigError, InvalidInputError) as exc:
        raise _bad_request(exc) from exc
    except NumericalFlagError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
    return json_ready(summary)
