"""``homlab`` command line: one subcommand per study, all parameters from a
config file, every run documented by a manifest."""

from __future__ import annotations
import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from ._errors import AcceptanceError, HomlabError, InvalidInputError, WarningRecord
from ._logging import get_module_logger
from .config import HomlabConfig, config_hash, load_config
from .corrector import (
    CorrectorSet,
    divergence_identity_check,
    massive_convergence,
    moment_diagnostics,
    parameter_derivative_ratio,
    solve_correctors,
    sublinearity_trend,
)
from .experiments import evaluate_acceptance, homogenized_for, resolution, run_rate
from .field import (
    COVARIANCE_KINDS,
    CoefficientSampler,
    CovarianceSpec,
    FieldSampler,
    GridSpec,
    derive_seed,
    empirical_covariance,
    squashed_covariance,
    synthesized_covariance,
)
from .homog import gamma_field
from .io import (
    RunManifest,
    copy_config,
    run_directory,
    timestamp,
    write_csv,
    write_field_dump,
    write_json,
    write_manifest,
)
from .jobs import map_jobs
from .localize import (
    IotaRejectedError,
    choose_iota,
    cube_variance_oracle,
    fit_localized_exponents,
    localization_budget,
    localized_variance_check,
)
from .sgap import (
    BridgeReport,
    FunctionalEvaluationError,
    SpectralGapEstimate,
    common_rho,
    default_functional_dictionary,
    gamma_bridge_run,
    linear_functional_variance,
    spectral_gap_test,
)
from .twoscale import residual_scaling

logger = get_module_logger("cli")

CORRECTOR_STREAM = 3
LOCALIZE_STREAM = 4


@dataclass
class CommandResult:
    outputs: List[Path] = field(default_factory=list)
    warnings: List[WarningRecord] = field(default_factory=list)
    failures: List[AcceptanceError] = field(default_factory=list)


Command = Callable[[HomlabConfig, Path], CommandResult]


def _sampler(
    config: HomlabConfig, eps_index: int, epsilon: float, stream: int
) -> Tuple[CoefficientSampler, List[WarningRecord]]:
    n, records = resolution(epsilon, config.L, config.n)
    fields = FieldSampler(
        config.covariance(epsilon),
        config.grid(n),
        derive_seed(config.seed, eps_index),
        stream,
    )
    return CoefficientSampler(fields, config.coefficient_map()), records


def cmd_sample_field(config: HomlabConfig, out: Path) -> CommandResult:
    result = CommandResult()
    epsilon = config.epsilons[0]
    cov = config.covariance(epsilon)
    grid = config.grid()
    sampler = FieldSampler(cov, grid, config.seed)
    fields = map_jobs(sampler, list(range(config.M)), config.workers, "sample-field")
    for k, f in enumerate(fields):
        result.outputs.append(write_field_dump(f, out / "fields" / f"sample-{k:04d}.bin"))
        result.warnings.extend(f.warnings)
    if len(fields) >= 2:
        max_lag = min(config.max_lag, grid.n - 1)
        est = empirical_covariance(fields, max_lag)
        c = synthesized_covariance(cov, grid)
        oracle = squashed_covariance(c, variance=float(c.flat[0]))
        rows = [
            {
                "lag": int(lag),
                "distance": float(lag * grid.h),
                "empirical": float(v),
                "std_err": float(se),
                "oracle": float(oracle[(int(lag),) + (0,) * (grid.d - 1)]),
            }
            for lag, v, se in zip(est.lags, est.values, est.std_err)
        ]
        result.outputs.append(write_csv(rows, out / "covariance.csv"))
    return result


MASSIVE_FACTORS = (1.0, 10.0, 100.0)


def _sublinearity_radii(epsilon: float, length: float) -> List[float]:
    radii, R = [], float(epsilon)
    while R <= length / 2 + 1e-12:
        radii.append(R)
        R *= 2
    return radii


def cmd_corrector(config: HomlabConfig, out: Path) -> CommandResult:
    result = CommandResult()
    ensembles: Dict[float, List[CorrectorSet]] = {}
    ratios: List[float] = []
    diagnostics: Dict[str, dict] = {}
    rows = []
    center = [config.L / 2] * config.d
    for idx, epsilon in enumerate(config.epsilons):
        sampler, records = _sampler(config, idx, epsilon, CORRECTOR_STREAM)
        result.warnings.extend(records)

        def _job(k: int, sampler=sampler, epsilon=epsilon):
            param = sampler.fields(k)
            cs = solve_correctors(sampler.coef_map(param), config.T, config.tol)
            ratio = parameter_derivative_ratio(
                param, sampler.coef_map, 0, center, epsilon, tol=config.tol
            )
            return cs, ratio

        outcomes = map_jobs(_job, list(range(config.M)), config.workers, f"corrector-eps{idx}")
        sets = [cs for cs, _ in outcomes]
        ensembles[float(epsilon)] = sets
        ratios.extend(ratio for _, ratio in outcomes)
        for k, (cs, ratio) in enumerate(outcomes):
            rows.append(
                {
                    "epsilon": float(epsilon),
                    "sample": k,
                    "seed": cs.seed,
                    "iterations": int(sum(cs.iterations)),
                    "residual": float(max(cs.residuals)),
                    "phi2": float(np.mean([np.mean(p.values**2) for p in cs.phi])),
                    "sigma2": float(np.mean([np.mean(s.squared_sum()) for s in cs.sigma])),
                    "divergence_identity": max(
                        divergence_identity_check(s, q) for s, q in zip(cs.sigma, cs.q)
                    ),
                    "derivative_ratio": float(ratio),
                }
            )
            result.warnings.extend(cs.warnings)
        # trend diagnostics on the first realization of each scale
        Ts = [f / epsilon**2 for f in MASSIVE_FACTORS]
        diagnostics[str(float(epsilon))] = {
            "sublinearity": [
                {"radius": R, "value": v}
                for R, v in sublinearity_trend(
                    sets[0].phi[0], _sublinearity_radii(epsilon, config.L), center
                )
            ],
            "massive_convergence": [
                {"T": T, "error": e}
                for T, e in massive_convergence(sampler(0), 0, Ts, config.tol)
            ],
        }
    report = moment_diagnostics(ensembles, derivative_ratios=ratios)
    result.outputs.append(write_csv(rows, out / "correctors.csv"))
    result.outputs.append(
        write_json({**report.to_record(), "diagnostics": diagnostics}, out / "report.json")
    )
    return result


def cmd_homogenize(config: HomlabConfig, out: Path) -> CommandResult:
    result = CommandResult()
    rows, records = [], {}
    for idx, epsilon in enumerate(config.epsilons):
        n, res_records = resolution(epsilon, config.L, config.n)
        result.warnings.extend(res_records)
        homog = homogenized_for(config, epsilon, idx, config.grid(n))
        records[str(float(epsilon))] = homog.to_record()
        for s in homog.samples:
            rows.append({"epsilon": float(epsilon), **s.to_row()})
    result.outputs.append(write_csv(rows, out / "homogenized.csv"))
    result.outputs.append(write_json(records, out / "report.json"))
    return result


def cmd_residuals(config: HomlabConfig, out: Path) -> CommandResult:
    result = CommandResult()
    sources = {}
    for idx, epsilon in enumerate(config.epsilons):
        sampler, records = _sampler(config, idx, epsilon, CORRECTOR_STREAM)
        result.warnings.extend(records)
        sources[float(epsilon)] = sampler
    report = residual_scaling(
        sources, config.profile(), config.M, config.T, config.tol, config.workers
    )
    result.outputs.append(
        write_csv([r.__dict__ for r in report.rows], out / "residuals.csv")
    )
    result.outputs.append(write_json(report.to_record(), out / "report.json"))
    return result


def cmd_localize(config: HomlabConfig, out: Path) -> CommandResult:
    result = CommandResult()
    u0 = config.profile()
    rows, points, reports = [], [], {}
    for idx, epsilon in enumerate(config.epsilons):
        sampler, records = _sampler(config, idx, epsilon, LOCALIZE_STREAM)
        result.warnings.extend(records)
        grid = sampler.grid
        choice = choose_iota(epsilon, config.d, grid)
        part = choice.partition(grid)
        b_bar = homogenized_for(config, epsilon, idx, grid).b_bar

        def _gamma(k: int, sampler=sampler, b_bar=b_bar):
            coef = sampler(k)
            if config.random_diffusion:
                cs = solve_correctors(coef, config.T, config.tol, with_sigma=False)
            else:
                cs = CorrectorSet.zeros(coef)
            return gamma_field(coef, cs, b_bar)

        gammas = map_jobs(_gamma, list(range(config.M)), config.workers, f"localize-eps{idx}")
        report = localized_variance_check(gammas, u0, part, epsilon)
        eps_rows = report.to_rows(choice.ideal)
        if not config.random_diffusion:
            oracle = cube_variance_oracle(
                config.covariance(epsilon), config.K, config.drift_direction, u0, part
            )
            for row, value in zip(eps_rows, oracle):
                row["oracle"] = float(value)
        rows.extend(eps_rows)
        points.append((float(epsilon), report.iota, report.normalized_variance))
        budget = localization_budget(epsilon, config.d, config.iotas, config.L)
        reports[str(float(epsilon))] = {
            "iota_ideal": choice.ideal,
            "iota_used": choice.used,
            "normalized_variance": report.normalized_variance,
            "scaled": report.scaled(config.d),
            "neighbor_correlation": report.neighbor_correlation,
            "budget": {
                "costs": {str(k): v for k, v in budget.costs.items()},
                "best_dyadic": budget.best_dyadic,
                "continuous_minimizer": budget.continuous_minimizer,
                "balancing_scale": budget.balancing_scale,
            },
        }
    exponents = fit_localized_exponents(points)
    reports["exponents"] = exponents.__dict__
    result.outputs.append(write_csv(rows, out / "localize.csv"))
    result.outputs.append(write_json(reports, out / "report.json"))
    return result


def _sgap_bridge(
    config: HomlabConfig,
    epsilon: float,
    grid: GridSpec,
    reference: List[SpectralGapEstimate],
    result: CommandResult,
) -> Optional[Tuple[BridgeReport, SpectralGapEstimate]]:
    try:
        part = choose_iota(epsilon, config.d, grid).partition(grid)
    except IotaRejectedError as exc:
        result.warnings.append(
            WarningRecord(source="cli.sgap", message=str(exc), value=exc.minimal_n)
        )
        return None
    if config.random_diffusion:
        b_bar = homogenized_for(config, epsilon, 0, grid).b_bar
    else:
        b_bar = np.zeros(grid.d)
    try:
        bridge = gamma_bridge_run(
            config.coefficient_map(),
            config.covariance(epsilon),
            config.profile(),
            part,
            config.sgap_samples,
            config.seed,
            b_bar=b_bar,
            reference=reference,
            rhs_samples=config.sgap_rhs_samples,
            stride=config.sgap_stride,
            tol=config.tol,
            workers=config.workers,
            min_samples=config.sgap_min_samples,
        )
    except FunctionalEvaluationError as exc:
        result.warnings.append(WarningRecord(source="cli.sgap", message=str(exc), value=None))
        return None
    if not bridge[0].holds:
        result.warnings.append(
            WarningRecord(
                source="cli.sgap",
                message="localized Gamma variance exceeds its spectral-gap bound",
                value=bridge[0].ratio,
            )
        )
    return bridge


def cmd_sgap(config: HomlabConfig, out: Path) -> CommandResult:
    result = CommandResult()
    epsilon = config.epsilons[0]
    grid = config.grid()
    cov = config.covariance(epsilon)
    functionals = default_functional_dictionary(grid)

    def _test(F, spec: CovarianceSpec):
        return spectral_gap_test(
            F,
            spec,
            grid,
            config.sgap_samples,
            config.seed,
            rhs_samples=config.sgap_rhs_samples,
            stride=config.sgap_stride,
            workers=config.workers,
            min_samples=config.sgap_min_samples,
        )

    estimates = [_test(F, cov) for F in functionals]
    rows = [
        {**est.to_row(), "oracle": linear_functional_variance(cov, grid, F.weights)}
        for F, est in zip(functionals, estimates)
    ]
    # the same protocol on the other kernel, for the whole-domain average
    other = CovarianceSpec(
        next(k for k in COVARIANCE_KINDS if k != cov.kind), epsilon
    )
    contrast = _test(functionals[0], other)
    rows.append(
        {
            **contrast.to_row(),
            "oracle": linear_functional_variance(other, grid, functionals[0].weights),
        }
    )
    rho = common_rho(estimates)
    bridge = None
    if config.sgap_bridge:
        bridge = _sgap_bridge(config, epsilon, grid, estimates, result)
        if bridge is not None:
            rows.append({**bridge[1].to_row(), "oracle": None})
    result.outputs.append(
        write_csv(
            rows,
            out / "sgap.csv",
            ["functional", "kind", "epsilon", "variance", "rhs", "rho_bound", "oracle"],
        )
    )
    result.outputs.append(
        write_json(
            {
                "rho": rho,
                "estimates": rows,
                "dictionary_size": 2 * grid.d + 1,
                "bridge": bridge[0].to_record() if bridge is not None else None,
            },
            out / "report.json",
        )
    )
    if rho is None:
        result.warnings.append(
            WarningRecord(
                source="cli.sgap",
                message="no functional resolved its variance, rho unavailable",
                value=None,
            )
        )
    return result


def cmd_rate(config: HomlabConfig, out: Path) -> CommandResult:
    report = run_rate(config)
    result = CommandResult(warnings=list(report.warnings))
    result.outputs.append(write_json(report.to_record(), out / "report.json"))
    result.outputs.append(
        write_csv(
            report.csv_rows(),
            out / "rates.csv",
            ["epsilon", "sample", "error", "norm", "iterations"],
        )
    )
    result.failures = evaluate_acceptance(report, config.acceptance)
    return result


COMMANDS: Dict[str, Command] = {
    "sample-field": cmd_sample_field,
    "corrector": cmd_corrector,
    "homogenize": cmd_homogenize,
    "residuals": cmd_residuals,
    "localize": cmd_localize,
    "sgap": cmd_sgap,
    "rate": cmd_rate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run configuration (TOML or JSON)")
    common.add_argument("--output", default=None, help="output directory")
    common.add_argument(
        "--describe",
        action="store_true",
        help="print the resolved configuration and exit",
    )
    parser = argparse.ArgumentParser(
        prog="homlab", description="stochastic homogenization laboratory"
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Runs one subcommand; 0 on success, 1 on failed criteria, 2 on bad input."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2

    try:
        config, raw = load_config(args.config)
    except InvalidInputError as exc:
        print(f"homlab: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2

    if args.describe:
        print(json.dumps(config.exportable_dict(), indent=2))
        return 0

    out = (
        Path(args.output)
        if args.output
        else run_directory(Path.cwd() / "runs", args.command, args.config)
    )
    out.mkdir(parents=True, exist_ok=True)
    started = timestamp()
    try:
        result = COMMANDS[args.command](config, out)
    except InvalidInputError as exc:
        print(f"homlab {args.command}: {exc}", file=sys.stderr)
        return 2
    except HomlabError as exc:
        logger.exception("%s failed", args.command)
        print(f"homlab {args.command}: {exc}", file=sys.stderr)
        return 1

    stored = copy_config(raw, out, "config" + Path(args.config).suffix)
    manifest = RunManifest(
        command=args.command,
        config_hash=config_hash(raw),
        master_seed=config.seed,
        version=__version__,
        started=started,
        finished=timestamp(),
        config=str(stored),
        outputs=[str(p) for p in result.outputs],
        warnings=result.warnings,
    )
    write_manifest(manifest, out)
    logger.info("%s wrote %d outputs to %s", args.command, len(result.outputs), out)

    for failure in result.failures:
        print(f"homlab {args.command}: acceptance failed: {failure}", file=sys.stderr)
    return 1 if result.failures else 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
