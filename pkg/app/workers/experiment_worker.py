import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from functools import partial
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np
from scipy import integrate, stats

from app.core.config import settings
from app.core.errors import BoundaryCriticalPointError, ConfigError
from app.schemas.domain import ExperimentConfig
from app.services import export_service
from app.services.field_service import DRAW_STREAM, couple, diagnostics, dump_field, philox_generator, sample
from app.services.gaussian_service import (
    combine_band_sums,
    curvature_band_sums,
    expected_gradient_norm,
    kac_rice_oracle,
    product_density,
    product_positive_prob,
)
from app.services.geometry_service import (
    Domain,
    bulk_difference_decomposition,
    critical_point_scan,
    curvature_moment_sequence,
    extract_segments,
    identity_report,
    level_continuity_scan,
    level_length,
)
from app.services.spectral_service import SpectralMeasure, perturbed_measure, validate_nondegenerate
from app.services.transport_service import optimal_coupling, plan_summary, sigma_bound_proxy, write_plan_csv

logger = logging.getLogger(__name__)

IDENTITY_COLUMNS = (
    "config_hash", "seed", "grid_n", "level_a", "level_b", "measure_a", "measure_b", "bulk_integral",
    "boundary_flux", "residual", "normalized_residual", "near_critical_volume", "jittered_nodes", "critical_count",
    "min_abs_hessian_det", "is_morse", "flag",
)
SCALING_SEED_COLUMNS = ("config_hash", "seed", "grid_n", "R", "epsilon", "length_1", "length_2", "delta_h")
SCALING_RUNG_COLUMNS = (
    "config_hash", "seed", "grid_n", "R", "epsilon", "sigma_D", "transport_cost", "transport_proxy",
    "mean_abs_delta_h", "standard_error", "n_seeds", "included",
)


@dataclass(frozen=True)
class RunContext:
    cfg: ExperimentConfig
    out_dir: Path
    config_hash: str

    @property
    def seed_label(self) -> str:
        return f"{self.cfg.seed_start}..{self.cfg.seed_stop}"

    def provenance(self, seed: int | str, grid_n: int | None = None) -> dict[str, Any]:
        return {"config_hash": self.config_hash, "seed": seed, "grid_n": grid_n or self.cfg.grid_n}

    def path(self, name: str) -> Path:
        return self.out_dir / name


@dataclass(frozen=True)
class ScalingRung:
    epsilon: float
    sigma_D: float
    transport_cost: float
    transport_proxy: float
    mean_abs_delta_h: float
    standard_error: float
    n_seeds: int

    @property
    def included(self) -> bool:
        return self.sigma_D > 0.0 and self.mean_abs_delta_h > 3.0 * self.standard_error


@dataclass(frozen=True)
class ScalingStudyResult:
    ladder: list[ScalingRung]
    slope: float
    slope_ci: tuple[float, float]
    intercept: float
    spearman: float
    proxy_spearman: float
    fitted_rungs: int

    def to_dict(self) -> dict:
        return {
            "ladder": [{**asdict(r), "included": r.included} for r in self.ladder],
            "slope": self.slope,
            "slope_ci": list(self.slope_ci),
            "intercept": self.intercept,
            "spearman": self.spearman,
            "proxy_spearman": self.proxy_spearman,
            "fitted_rungs": self.fitted_rungs,
            "dropped_epsilons": [r.epsilon for r in self.ladder if not r.included],
        }


def _pool_map(fn: Callable, items: Iterable, threads: int) -> list:
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _mean_se(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return math.nan, math.nan
    se = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else math.nan
    return float(arr.mean()), se


def _gated_measure(cfg: ExperimentConfig) -> SpectralMeasure:
    try:
        m = cfg.measure.to_measure()
    except ValueError as exc:
        raise ConfigError(f"invalid measure: {exc}") from exc
    report = validate_nondegenerate(m)
    if not report.passed:
        raise ConfigError("measure failed the nondegeneracy gate: " + "; ".join(report.failures))
    return m


def _domain(cfg: ExperimentConfig, grid_n: int | None = None) -> Domain:
    return Domain(R=cfg.R, dim=2, grid_n=grid_n or cfg.grid_n)


def _kac_rice_seed(seed: int, m: SpectralMeasure, cfg: ExperimentConfig) -> list[dict]:
    fld = sample(m, seed)
    dom = _domain(cfg)
    grid = dom.grid(fld)
    rows = []
    for a in cfg.levels:
        result = level_length(fld, dom, a, grid=grid)
        rows.append({"seed": seed, "level": a, "length": result.length, "segment_count": result.segment_count})
    return rows


def run_kac_rice(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    m = _gated_measure(cfg)
    oracle = kac_rice_oracle(m, n_mc=cfg.n_mc)
    dom = _domain(cfg)
    per_seed = _pool_map(partial(_kac_rice_seed, m=m, cfg=cfg), cfg.seeds, cfg.threads)
    rows = [{**ctx.provenance(r["seed"]), **r} for chunk in per_seed for r in chunk]
    export_service.write_rows(
        ctx.path("kacrice.csv"),
        ("config_hash", "seed", "grid_n", "level", "length", "segment_count"),
        rows,
    )

    levels = []
    for a in cfg.levels:
        mean, se = _mean_se([r["length"] for r in rows if r["level"] == a])
        expected = oracle.expected_measure(dom, a)
        z_score = (mean - expected) / se if se and se > 0.0 else math.nan
        logger.info("kacrice level=%s mean=%.6f se=%.6f oracle=%.6f", a, mean, se, expected)
        levels.append({"level": a, "mean": mean, "standard_error": se, "oracle": expected, "z_score": z_score})
    export_service.write_rows(
        ctx.path("kacrice_summary.csv"),
        ("config_hash", "seed", "grid_n", "level", "mean", "standard_error", "oracle", "z_score"),
        [{**ctx.provenance(ctx.seed_label), **row} for row in levels],
    )
    return {"exp_grad_norm": oracle.exp_grad_norm, "levels": levels, "n_seeds": len(cfg.seeds)}


def _identity_seed(seed: int, m: SpectralMeasure, cfg: ExperimentConfig) -> list[dict]:
    fld = sample(m, seed)
    scan = critical_point_scan(fld, _domain(cfg))
    morse = {
        "critical_count": scan.count,
        "min_abs_hessian_det": scan.min_abs_det,
        "is_morse": scan.is_morse(),
    }
    rows = []
    for grid_n in sorted({cfg.coarse_grid_n, cfg.grid_n}):
        dom = _domain(cfg, grid_n)
        for a, b in cfg.bands:
            base = {"seed": seed, "grid_n": grid_n, "level_a": a, "level_b": b, **morse}
            try:
                report = identity_report(fld, dom, a, b)
            except BoundaryCriticalPointError as exc:
                rows.append({**base, "flag": f"boundary_critical:{exc.face}"})
                continue
            payload = report.to_dict()
            payload.pop("grid_n")
            rows.append({**base, **payload, "flag": ""})
    return rows


def run_identity_suite(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    m = _gated_measure(cfg)
    per_seed = _pool_map(partial(_identity_seed, m=m, cfg=cfg), cfg.seeds, cfg.threads)
    rows = [{**r, "config_hash": ctx.config_hash} for chunk in per_seed for r in chunk]
    export_service.write_rows(ctx.path("identity.csv"), IDENTITY_COLUMNS, rows)

    flagged = sorted({r["seed"] for r in rows if r["flag"]})
    for seed in flagged:
        logger.warning("identity boundary critical point seed=%s", seed)
    non_morse = sorted({r["seed"] for r in rows if not r["is_morse"]})
    for seed in non_morse:
        logger.warning("identity degenerate critical point seed=%s", seed)
    resolutions = {}
    for grid_n in sorted({cfg.coarse_grid_n, cfg.grid_n}):
        clean = [r for r in rows if r["grid_n"] == grid_n and not r["flag"]]
        normalized = np.array([r["normalized_residual"] for r in clean], dtype=float)
        absolute = np.abs(np.array([r["residual"] for r in clean], dtype=float))
        resolutions[str(grid_n)] = {
            "rows": len(clean),
            "median_normalized_residual": float(np.median(normalized)) if clean else math.nan,
            "q90_normalized_residual": float(np.quantile(normalized, 0.9)) if clean else math.nan,
            "max_normalized_residual": float(normalized.max()) if clean else math.nan,
            "median_abs_residual": float(np.median(absolute)) if clean else math.nan,
        }
    critical_counts = {r["seed"]: r["critical_count"] for r in rows}
    return {
        "resolutions": resolutions,
        "flagged_seeds": flagged,
        "non_morse_seeds": non_morse,
        "mean_critical_count": float(np.mean(list(critical_counts.values()))),
    }


def _condcurv_seed(seed: int, m: SpectralMeasure, cfg: ExperimentConfig) -> list:
    return curvature_band_sums(m, _domain(cfg), cfg.levels, cfg.bandwidth, seed, cfg.points_per_seed)


def run_conditional_curvature(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    m = _gated_measure(cfg)
    gradient = expected_gradient_norm(m, n_mc=cfg.n_mc)
    per_seed = _pool_map(partial(_condcurv_seed, m=m, cfg=cfg), cfg.seeds, cfg.threads)
    tallies = [row for chunk in per_seed for row in chunk]
    export_service.write_rows(
        ctx.path("condcurv_seeds.csv"),
        ("config_hash", "seed", "grid_n", "level", "kappa_sum", "count", "half_kappa_sum", "half_count", "points"),
        [{**ctx.provenance(t.seed), **asdict(t)} for t in tallies],
    )

    estimates = []
    for a in cfg.levels:
        estimate = combine_band_sums(
            [t for t in tallies if t.level == a],
            cfg.bandwidth,
            oracle=-a * gradient.value,
            bootstrap_seed=cfg.seed_start,
        )
        if estimate.flagged:
            logger.warning("condcurv empty band level=%s bandwidth=%s", a, cfg.bandwidth)
        logger.info("condcurv level=%s estimate=%.6f se=%.6f oracle=%.6f", a, estimate.estimate, estimate.standard_error, estimate.oracle)
        estimates.append(estimate.to_dict())
    export_service.write_rows(
        ctx.path("condcurv.csv"),
        (
            "config_hash", "seed", "grid_n", "level", "bandwidth", "estimate", "standard_error", "oracle",
            "z_score", "accepted", "half_bandwidth_estimate", "half_bandwidth_accepted", "n_seeds",
            "n_points", "flagged",
        ),
        [{**ctx.provenance(ctx.seed_label), **row} for row in estimates],
    )
    return {
        "exp_grad_norm": gradient.value,
        "levels": estimates,
        "flagged_levels": [row["level"] for row in estimates if row["flagged"]],
    }


def _scaling_seed(
    seed: int, m1: SpectralMeasure, m2: SpectralMeasure, plan: Any, cfg: ExperimentConfig, R: float
) -> dict:
    cp = couple(m1, m2, plan, seed)
    dom = Domain(R=R, dim=2, grid_n=cfg.grid_n)
    length_1 = level_length(cp.field1, dom, 0.0).length
    length_2 = level_length(cp.field2, dom, 0.0).length
    return {"seed": seed, "length_1": length_1, "length_2": length_2, "delta_h": length_1 - length_2}


def fit_scaling(ladder: list[ScalingRung]) -> ScalingStudyResult:
    ladder = sorted(ladder, key=lambda r: (r.sigma_D, r.epsilon))
    fitted = [r for r in ladder if r.included]
    slope = intercept = math.nan
    ci = (math.nan, math.nan)
    if len(fitted) >= 2:
        x = np.log([r.sigma_D for r in fitted])
        y = np.log([r.mean_abs_delta_h for r in fitted])
        fit = stats.linregress(x, y)
        slope, intercept = float(fit.slope), float(fit.intercept)
        if len(fitted) >= 3:
            half = float(stats.t.ppf(0.975, len(fitted) - 2)) * float(fit.stderr)
            ci = (slope - half, slope + half)

    positive = [r for r in ladder if r.sigma_D > 0.0]
    spearman = proxy_spearman = math.nan
    if len(positive) >= 2:
        spearman = float(stats.spearmanr([r.sigma_D for r in positive], [r.mean_abs_delta_h for r in positive]).statistic)
        proxy_spearman = float(stats.spearmanr([r.sigma_D for r in positive], [r.transport_proxy for r in positive]).statistic)
    return ScalingStudyResult(
        ladder=ladder,
        slope=slope,
        slope_ci=ci,
        intercept=intercept,
        spearman=spearman,
        proxy_spearman=proxy_spearman,
        fitted_rungs=len(fitted),
    )


def _scaling_ladder(
    ctx: RunContext, m1: SpectralMeasure, plans: list[tuple[float, SpectralMeasure, Any]], R: float
) -> tuple[list[ScalingRung], list[dict]]:
    cfg = ctx.cfg
    ladder: list[ScalingRung] = []
    seed_rows: list[dict] = []
    for eps, m2, plan in plans:
        sigma = diagnostics(couple(m1, m2, plan, cfg.seed_start), R).sigma_D
        per_seed = _pool_map(partial(_scaling_seed, m1=m1, m2=m2, plan=plan, cfg=cfg, R=R), cfg.seeds, cfg.threads)
        mean, se = _mean_se([abs(r["delta_h"]) for r in per_seed])
        rung = ScalingRung(
            epsilon=eps,
            sigma_D=sigma,
            transport_cost=plan.cost,
            transport_proxy=sigma_bound_proxy(plan, R, 2),
            mean_abs_delta_h=mean,
            standard_error=se,
            n_seeds=len(per_seed),
        )
        logger.info("scaling rung R=%s eps=%s sigma_D=%.6e mean_abs_dh=%.6e se=%.6e", R, eps, sigma, mean, se)
        if not rung.included:
            logger.warning("scaling rung dropped from fit R=%s eps=%s", R, eps)
        ladder.append(rung)
        seed_rows.extend({**ctx.provenance(r["seed"]), "R": R, "epsilon": eps, **r} for r in per_seed)
    return ladder, seed_rows


def run_scaling_study(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    m1 = _gated_measure(cfg)
    plans = []
    for eps in cfg.epsilons:
        m2 = perturbed_measure(m1, eps, cfg.perturbation)
        plans.append((eps, m2, optimal_coupling(m1, m2)))

    seed_rows: list[dict] = []
    rung_rows: list[dict] = []
    sweep: list[dict] = []
    for R in cfg.radii:
        ladder, rows = _scaling_ladder(ctx, m1, plans, R)
        result = fit_scaling(ladder)
        seed_rows.extend(rows)
        rung_rows.extend(
            {**ctx.provenance(ctx.seed_label), "R": R, **asdict(r), "included": r.included} for r in result.ladder
        )
        sweep.append({"R": R, "log_factor": math.sqrt(math.log(R + 2.0)), **result.to_dict()})

    export_service.write_rows(ctx.path("scaling_seeds.csv"), SCALING_SEED_COLUMNS, seed_rows)
    export_service.write_rows(ctx.path("scaling.csv"), SCALING_RUNG_COLUMNS, rung_rows)
    # The first radius is the headline ladder; the full sweep follows it.
    return {**sweep[0], "sweep": sweep}


def _positive_mass(rho: float) -> tuple[float, float]:
    if abs(rho) == 1.0:
        return math.nan, math.nan
    near, _ = integrate.quad(lambda z: product_density(rho, z), 0.0, 1.0, limit=200)
    far, err = integrate.quad(lambda z: product_density(rho, z), 1.0, math.inf, limit=200)
    return near + far, err


def run_product_gaussian(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    rows = []
    for rho in cfg.rhos:
        draws = philox_generator(cfg.seed_start, DRAW_STREAM).standard_normal((cfg.n_mc, 2))
        x = draws[:, 0]
        y = rho * draws[:, 0] + math.sqrt(max(0.0, 1.0 - rho * rho)) * draws[:, 1]
        estimate = float(np.mean(x * y > 0.0))
        se = math.sqrt(max(estimate * (1.0 - estimate), 0.0) / cfg.n_mc)
        formula = product_positive_prob(rho)
        quadrature, quadrature_error = _positive_mass(rho)
        rows.append(
            {
                **ctx.provenance(cfg.seed_start),
                "rho": rho,
                "n": cfg.n_mc,
                "estimate": estimate,
                "standard_error": se,
                "formula": formula,
                "z_score": (estimate - formula) / se if se > 0.0 else math.nan,
                "quadrature": quadrature,
                "quadrature_error": quadrature_error,
            }
        )
        logger.info("productgauss rho=%s estimate=%.6f formula=%.6f", rho, estimate, formula)
    export_service.write_rows(
        ctx.path("productgauss.csv"),
        ("config_hash", "seed", "grid_n", "rho", "n", "estimate", "standard_error", "formula", "z_score", "quadrature", "quadrature_error"),
        rows,
    )
    return {"rows": [{k: v for k, v in row.items() if k != "config_hash"} for row in rows]}


def _moments_seed(seed: int, m: SpectralMeasure, cfg: ExperimentConfig) -> dict:
    seq = curvature_moment_sequence(sample(m, seed), _domain(cfg), cfg.moment_exponent, tuple(cfg.moment_sizes), seed)
    return {"seed": seed, "sizes": seq.sizes, "means": seq.means, "ratios": seq.ratios, "stable": seq.stable()}


def run_moments(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    m = _gated_measure(cfg)
    per_seed = _pool_map(partial(_moments_seed, m=m, cfg=cfg), cfg.seeds, cfg.threads)
    rows = []
    for result in per_seed:
        ratios = (math.nan,) + tuple(result["ratios"])
        for size, mean, ratio in zip(result["sizes"], result["means"], ratios):
            rows.append({**ctx.provenance(result["seed"]), "exponent": cfg.moment_exponent, "size": size, "mean": mean, "ratio": ratio})
    export_service.write_rows(
        ctx.path("moments.csv"), ("config_hash", "seed", "grid_n", "exponent", "size", "mean", "ratio"), rows
    )
    stable = [r["seed"] for r in per_seed if r["stable"]]
    return {"stable_seeds": len(stable), "n_seeds": len(per_seed), "unstable": [r["seed"] for r in per_seed if not r["stable"]]}


def _continuity_seed(seed: int, m: SpectralMeasure, cfg: ExperimentConfig) -> dict:
    gaps = level_continuity_scan(sample(m, seed), _domain(cfg), cfg.levels[0], cfg.deltas)
    values = [gap for _, gap in gaps]
    return {"seed": seed, "gaps": gaps, "monotone": all(b <= a for a, b in zip(values, values[1:]))}


def run_continuity(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    m = _gated_measure(cfg)
    per_seed = _pool_map(partial(_continuity_seed, m=m, cfg=cfg), cfg.seeds, cfg.threads)
    rows = [
        {**ctx.provenance(r["seed"]), "level": cfg.levels[0], "delta": delta, "gap": gap}
        for r in per_seed
        for delta, gap in r["gaps"]
    ]
    export_service.write_rows(ctx.path("continuity.csv"), ("config_hash", "seed", "grid_n", "level", "delta", "gap"), rows)
    return {
        "monotone_seeds": sum(1 for r in per_seed if r["monotone"]),
        "n_seeds": len(per_seed),
        "non_monotone": [r["seed"] for r in per_seed if not r["monotone"]],
    }


def _second_measure(cfg: ExperimentConfig, m1: SpectralMeasure) -> SpectralMeasure:
    if cfg.second_measure is not None:
        try:
            return cfg.second_measure.to_measure()
        except ValueError as exc:
            raise ConfigError(f"invalid second measure: {exc}") from exc
    return perturbed_measure(m1, cfg.epsilons[0], cfg.perturbation)


def _couple_seed(seed: int, m1: SpectralMeasure, m2: SpectralMeasure, plan: Any, cfg: ExperimentConfig) -> dict:
    cp = couple(m1, m2, plan, seed)
    report = bulk_difference_decomposition(cp, _domain(cfg), gradient_split=cfg.gradient_split)
    return {"seed": seed, **report.to_dict()}


def run_couple(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    m1 = _gated_measure(cfg)
    m2 = _second_measure(cfg, m1)
    plan = optimal_coupling(m1, m2)
    write_plan_csv(plan, ctx.path("plan.csv"))
    diag = diagnostics(couple(m1, m2, plan, cfg.seed_start), cfg.R)
    per_seed = _pool_map(partial(_couple_seed, m1=m1, m2=m2, plan=plan, cfg=cfg), cfg.seeds, cfg.threads)
    rows = [{**ctx.provenance(r["seed"]), **r} for r in per_seed]
    columns = ("config_hash", "seed", "grid_n", *[k for k in per_seed[0] if k != "seed"])
    export_service.write_rows(ctx.path("decomposition.csv"), columns, rows)
    summary = {"plan": plan_summary(plan, cfg.R), "diagnostics": diag.to_dict()}
    export_service.write_summary(ctx.path("diagnostics.json"), summary)
    return summary


def run_sample(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    m = _gated_measure(cfg)
    suffix = "csv" if cfg.field_format == "csv" else "raw"
    files = []
    for seed in cfg.seeds:
        path = dump_field(sample(m, seed), cfg.R, cfg.grid_n, ctx.path(f"field_seed{seed}.{suffix}"), fmt=cfg.field_format)
        files.append(path.name)
    return {"files": files}


def run_measure(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    m = _gated_measure(cfg)
    dom = _domain(cfg)
    rows = []
    for seed in cfg.seeds:
        fld = sample(m, seed)
        grid = dom.grid(fld)
        for k, a in enumerate(cfg.levels):
            segments = extract_segments(fld, dom, a, grid=grid)
            export_service.write_polylines(ctx.path(f"polyline_seed{seed}_level{k}.csv"), segments)
            result = level_length(fld, dom, a, grid=grid)
            rows.append({**ctx.provenance(seed), "level": a, "length": result.length, "segment_count": result.segment_count})
    export_service.write_rows(
        ctx.path("measure.csv"), ("config_hash", "seed", "grid_n", "level", "length", "segment_count"), rows
    )
    return {"rows": len(rows)}


RUNNERS: dict[str, Callable[[RunContext], dict]] = {
    "sample": run_sample,
    "measure": run_measure,
    "identity": run_identity_suite,
    "kacrice": run_kac_rice,
    "condcurv": run_conditional_curvature,
    "couple": run_couple,
    "scaling": run_scaling_study,
    "productgauss": run_product_gaussian,
    "moments": run_moments,
    "continuity": run_continuity,
}


def run_experiment(cfg: ExperimentConfig, out_dir: Path | None = None) -> dict:
    """Run one experiment, write its tables plus `<experiment>_summary.json`, and return the summary."""
    root = export_service.ensure_output_dir(out_dir or cfg.resolved_output_dir(settings.output_dir))
    ctx = RunContext(cfg=cfg, out_dir=root, config_hash=export_service.config_hash(cfg.hash_payload()))
    logger.info("experiment start name=%s seeds=%s grid_n=%d hash=%s", cfg.experiment, ctx.seed_label, cfg.grid_n, ctx.config_hash[:12])
    summary = {
        "experiment": cfg.experiment,
        "config_hash": ctx.config_hash,
        "seeds": ctx.seed_label,
        "grid_n": cfg.grid_n,
        **RUNNERS[cfg.experiment](ctx),
    }
    export_service.write_summary(ctx.path(f"{cfg.experiment}_summary.json"), summary)
    return export_service.json_ready(summary)
