import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any

from pydantic import ValidationError

from app.core.errors import ConfigError, InvalidInputError, NumericalFlagError
from app.core.log import configure_logging
from app.schemas.domain import ExperimentConfig
from app.workers.experiment_worker import RUNNERS, run_experiment

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL_FLAG = 3

_DESCRIPTIONS = {
    "sample": "Dump field jets on a grid for each seed",
    "measure": "Level-set lengths and polylines for each seed",
    "identity": "Divergence identity residuals at two grid resolutions",
    "kacrice": "Monte Carlo level-set length against the Kac-Rice value",
    "condcurv": "Conditional curvature given the field level",
    "couple": "Optimal coupling, diagnostics and bulk-difference decomposition",
    "scaling": "Nodal-length difference against sigma_D over a perturbation ladder",
    "productgauss": "Positivity probability of a product of correlated Gaussians",
    "moments": "Stability of empirical curvature moments",
    "continuity": "Level-set length gaps as the level approaches a",
}


def parse_seed_range(text: str) -> tuple[int, int]:
    """`a..b` is the half-open seed range [a, b)."""
    start, sep, stop = text.partition("..")
    if not sep:
        raise argparse.ArgumentTypeError(f"seed range must look like a..b, got {text!r}")
    try:
        return int(start), int(stop)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"seed range bounds must be integers, got {text!r}") from exc


def load_config(experiment: str, args: argparse.Namespace) -> ExperimentConfig:
    payload: dict[str, Any] = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        payload = json.loads(path.read_text(encoding="utf-8"))
        if not isinstance(payload, dict):
            raise ConfigError("config file must hold a JSON object")
    payload["experiment"] = experiment
    if args.seed_range is not None:
        payload["seed_start"], payload["seed_stop"] = args.seed_range
    if args.grid_n is not None:
        payload["grid_n"] = args.grid_n
    if args.threads is not None:
        payload["threads"] = args.threads
    if args.out is not None:
        payload["output_dir"] = args.out
    try:
        return ExperimentConfig.model_validate(payload)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def run(args: argparse.Namespace) -> int:
    configure_logging(args.log_level)
    try:
        cfg = load_config(args.command, args)
        summary = run_experiment(cfg)
    except (ConfigError, InvalidInputError, json.JSONDecodeError) as exc:
        logger.error("configuration rejected: %s", exc)
        print(json.dumps({"status": "config_error", "error": str(exc)}, ensure_ascii=True))
        return EXIT_CONFIG
    except NumericalFlagError as exc:
        logger.error("numerical flag: %s", exc)
        print(json.dumps({"status": "numerical_flag", "error": str(exc)}, ensure_ascii=True))
        return EXIT_NUMERICAL_FLAG

    flagged = summary.get("flagged_seeds") or []
    status = "numerical_flag" if flagged else "ok"
    print(json.dumps({"status": status, **summary}, ensure_ascii=True))
    return EXIT_NUMERICAL_FLAG if flagged else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Level-set laboratory for stationary Gaussian fields")
    parser.add_argument("--log-level", default=None, help="Override LOG_LEVEL from settings")
    commands = parser.add_subparsers(dest="command", required=True)
    for name in RUNNERS:
        sub = commands.add_parser(name, help=_DESCRIPTIONS[name])
        sub.add_argument("--config", default=None, help="Experiment config JSON")
        sub.add_argument("--seed-range", type=parse_seed_range, default=None, help="Half-open seed range a..b")
        sub.add_argument("--out", default=None, help="Output directory (default: settings.output_dir)")
        sub.add_argument("--grid-n", type=int, default=None)
        sub.add_argument("--threads", type=int, default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    return run(build_parser().parse_args(argv))


if __name__ == "__main__":
    sys.exit(main())
