"""
Command-line surface of the laboratory
One subcommand per experiment; exit codes 0 (ok), 1 (validation), 2 (runtime)
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from src import __version__
from src.config import ExperimentPlan, PlanLoader
from src.errors import ValidationError
from src.export import ResultWriter, write_density_csv, write_results
from src.lab import (
    ConvergenceReport,
    run_coupled_error,
    run_empirical_measure,
    run_noise_check,
    run_ou_oracle,
    run_simulation,
    solve_reference,
)
from src.plotting import PlotStyle

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

# Preset used by each subcommand when neither --config nor LAB_CONFIG is given
COMMAND_PRESETS = {
    "noise-check": "gridcell-concrete",
    "simulate": "gridcell-concrete",
    "solve-fp": "gridcell-concrete",
    "rate-m": "rate-in-M",
    "rate-n": "rate-in-N",
    "empirical": "empirical-measure",
    "oracle-ou": "ou-test",
}


def setup_logging(level: str = "INFO") -> None:
    """Setup logging configuration"""
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridcell-lab", description="Grid-cell mean-field laboratory")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "noise-check": "empirical statistics of the correlated noise field",
        "simulate": "one particle-system run",
        "solve-fp": "Fokker-Planck reference law",
        "rate-m": "coupled error against M",
        "rate-n": "coupled error against N",
        "empirical": "Wasserstein splitting of the empirical measure",
        "oracle-ou": "reflected Ornstein-Uhlenbeck oracle",
    }
    for name, text in helps.items():
        cmd = sub.add_parser(name, help=text)
        cmd.add_argument("--config", help="JSON plan file (default: LAB_CONFIG or the command preset)")
        cmd.add_argument("--preset", help="preset used when no config file is given")
        cmd.add_argument("--seed", type=int, help="override experiment.master_seed")
        cmd.add_argument("--out", help="output directory (default runtime.output_dir/<command>)")
        cmd.add_argument("--workers", type=int, help="override runtime.workers")
    return parser


def load_plan(args: argparse.Namespace) -> ExperimentPlan:
    plan = PlanLoader.load(args.config, args.preset or COMMAND_PRESETS[args.command])
    if args.seed is not None:
        plan.experiment.master_seed = args.seed
    if args.workers is not None:
        plan.runtime.workers = args.workers
    plan.validate()
    return plan


def _write_report(report: ConvergenceReport, plan: ExperimentPlan, out_dir: Path, xlabel: str) -> int:
    style = PlotStyle(xlabel=xlabel, ylabel="error", alpha=plan.init.alpha, space_dim=plan.model.space_dim)
    writer_files = write_results(report, out_dir, plot_style=style)
    logger.info(f"Wrote {', '.join(writer_files)}")
    if not report.valid:
        for reason in report.invalid_reasons:
            logger.error(f"Run failed a validity check: {reason}")
        return EXIT_RUNTIME
    return EXIT_OK


def _run_command(args: argparse.Namespace, plan: ExperimentPlan, out_dir: Path) -> int:
    command = args.command
    exp = plan.experiment

    if command in ("rate-m", "rate-n"):
        report = run_coupled_error(plan)
        return _write_report(report, plan, out_dir, "M" if command == "rate-m" else "N")
    if command == "empirical":
        report = run_empirical_measure(plan)
        return _write_report(report, plan, out_dir, "M")

    writer = ResultWriter(out_dir)
    status = EXIT_OK
    if command == "noise-check":
        stats = run_noise_check(plan)
        writer.write_json("noise_check.json", stats.to_dict())
    elif command == "simulate":
        summary = run_simulation(plan)
        result = summary.result
        writer.write_table(
            "trajectory_summary.csv", ["t", "mean_u", "min_u", "max_u", "mean_ell_tv"],
            ([float(t), float(u.mean()), float(u.min()), float(u.max()), float(ell.mean())]
             for t, u, ell in zip(result.times, result.snapshots, result.ledgers)),
        )
        final = result.final
        writer.write_table(
            "final_state.csv", ["node", "column", "orientation", "u", "ell_tv"],
            ([int(i), int(k), int(b), float(final.u[i, k, b]), float(final.ell_tv[i, k, b])]
             for i, k, b in np.ndindex(final.u.shape)),
        )
        writer.write_json("regularity.json", summary.regularity)
    elif command == "solve-fp":
        density, check = solve_reference(plan)
        write_density_csv(writer, density)
        writer.write_json("fp_check.json", check)
        if check.get("refinement_ok") is False:
            logger.error("FP reference failed its refinement check")
            status = EXIT_RUNTIME
    elif command == "oracle-ou":
        oracle = run_ou_oracle(plan)
        writer.write_json("ou_oracle.json", oracle.to_dict())
        if oracle.density is not None:
            write_density_csv(writer, oracle.density)
        if not oracle.passed:
            logger.error(f"OU oracle outside tolerance: L1 {oracle.density_l1:.3e}, W1 {oracle.particle_w1:.3e}")
            status = EXIT_RUNTIME
    writer.finalize(plan.config_hash(), exp.master_seed)
    return status


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point"""
    args = build_parser().parse_args(argv)
    setup_logging()
    try:
        plan = load_plan(args)
    except (ValidationError, FileNotFoundError) as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_VALIDATION

    setup_logging(plan.runtime.log_level)
    out_dir = Path(args.out) if args.out else Path(plan.runtime.output_dir) / args.command
    logger.info(f"Running {args.command} with preset '{plan.preset}' (seed {plan.experiment.master_seed})")
    try:
        return _run_command(args, plan, out_dir)
    except ValidationError as e:
        logger.error(f"Validation error: {e}")
        return EXIT_VALIDATION
    except Exception as e:
        logger.exception(f"Run failed: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
