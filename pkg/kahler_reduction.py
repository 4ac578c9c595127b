"""
Kähler Reduction Simulator - command-line entry point

Stochastic reduction on Kähler state manifolds, driven by one scenario file:
  geometry-check  geometry invariant suite at sampled points
  identities      observable identity suite
  simulate        seeded ensemble -> time-series CSV + summary.json
  verify          identity suite plus the statistical battery
  replay          re-run a recorded simulate and compare the CSV hash

Exit status: 0 pass, 1 verification failure, 2 configuration or IO failure.
"""

import argparse
import logging
import math
import sys
import uuid
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

# Optional colorama: define init() regardless of availability
try:
    from colorama import init as _colorama_init
except Exception:
    def _colorama_init():
        pass
init = _colorama_init

from config import config, load_env
from analysis import (INCONCLUSIVE, TestVerdict, born_frequency_check, curvature_checks,
                      dispersion_supermartingale_F, drift_regression_V, identity_suite, ito_isometry_check,
                      martingale_test, sample_chart_points, summarize, supermartingale_bound,
                      terminal_variance_check, weak_convergence_check)
from dynamics import DynamicsError, EnsembleStats, reduction_timescale, run_ensemble, run_restarts
from geometry import GeometryError, ProjectiveBackend, invariant_report
from observables import ObservableError, dispersion
from run_config import ConfigError, RunConfig, build_run_config, parse_config
from utils import reporting
from utils.reporting import colored

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

logger = logging.getLogger("kahler_reduction")


def setup_logging():
    """Console plus file logging under config.LOG_DIR"""
    log_dir = Path(config.LOG_DIR)
    log_dir.mkdir(parents=True, exist_ok=True)

    logging.basicConfig(
        level=getattr(logging, config.LOG_LEVEL.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.StreamHandler(sys.stdout),
            logging.FileHandler(log_dir / 'kahler_reduction.log')
        ],
        force=True,
    )


def _tracked(run: RunConfig):
    """Tracked observable if it commutes with H, else None (the F verdicts become not-applicable)."""
    F = run.tracked
    if F is None:
        return None
    if not F.commutes_with(run.hamiltonian):
        logger.warning("tracked observable %r does not commute with H; co-reduction checks not applicable",
                       F.label)
        return None
    return F


def _print_checks(title: str, checks: Sequence[Dict[str, Any]]):
    rows = [{"name": c["name"], "status": "pass" if c["passed"] else "fail", "statistic": c["statistic"],
             "narrative": f"threshold {c['threshold']:.3g}"} for c in checks]
    print(title)
    print(reporting.verdict_table(rows))


def _print_verdicts(verdicts: Sequence[TestVerdict]):
    print(reporting.verdict_table([v.to_dict() for v in verdicts]))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_geometry_check(run: RunConfig, args) -> int:
    count = int(run.checks["geometry_points"])
    seed = int(run.checks["seed"])
    report = invariant_report(run.backend, count=count, seed=seed, H=run.hamiltonian)
    if report["passed"]:
        try:
            report["checks"].extend(curvature_checks(run.backend, count, seed))
        except (GeometryError, ObservableError, np.linalg.LinAlgError) as exc:
            logger.warning("curvature checks failed on %s: %s", run.backend.backend_id, exc)
            report["checks"].append({"name": "curvature_checks", "statistic": math.inf, "threshold": 0.0,
                                     "passed": False})
        report["passed"] = all(c["passed"] for c in report["checks"])
    report["generated"] = reporting.utc_now()
    if "json" in run.formats:
        reporting.write_json(run.output_dir / reporting.GEOMETRY_FILE, report)
    _print_checks(f"Geometry invariants on {run.backend.backend_id} ({count} points)", report["checks"])
    if not report["passed"]:
        failed = [c["name"] for c in report["checks"] if not c["passed"]]
        print(colored(f"Geometry check FAILED: {', '.join(failed)}", "red"))
        return EXIT_FAIL
    print(colored("Geometry check passed", "green"))
    return EXIT_OK


def _identity_verdicts(run: RunConfig) -> List[TestVerdict]:
    return identity_suite(run.hamiltonian, int(run.checks["identity_points"]), seed=int(run.checks["seed"]),
                          tracked=run.tracked)


def cmd_identities(run: RunConfig, args) -> int:
    verdicts = _identity_verdicts(run)
    overview = summarize(verdicts, args.strict)
    reporting.write_verdicts(run.output_dir, [v.to_dict() for v in verdicts], overview, run.formats)
    if "json" in run.formats:
        reporting.write_json(run.output_dir / reporting.IDENTITIES_FILE, {
            "backend": run.backend.backend_id,
            "points": int(run.checks["identity_points"]),
            "seed": int(run.checks["seed"]),
            "tracked": run.tracked is not None,
            "passed": overview["passed"],
            "residuals": {v.name: v.details.get("residual") for v in verdicts},
            "generated": reporting.utc_now(),
        })
    _print_verdicts(verdicts)
    return EXIT_OK if overview["passed"] else EXIT_FAIL


def _ensemble(run: RunConfig) -> EnsembleStats:
    kappa, lam = run.curvature_bounds()
    print(f"Running {run.sde.ensemble_size} trajectories on {run.backend.backend_id}: "
          f"sigma={run.sde.sigma:g}, dt={run.sde.dt:.3g}, horizon={run.sde.horizon:.4g}, "
          f"seed={run.sde.master_seed}")
    return run_ensemble(run.backend, run.hamiltonian, run.initial, run.sde, track_F=_tracked(run),
                        kappa=kappa, lam=lam)


def _artifact_flags(run: RunConfig, stats: EnsembleStats) -> Dict[str, Any]:
    sde_table = run.raw.get("sde", {})
    return {
        "scheme": run.sde.scheme,
        "dt": run.sde.dt,
        "dt_rule": "explicit" if "dt" in sde_table else "min(rotation, tau)",
        "horizon": run.sde.horizon,
        "collapse_epsilon": stats.epsilon,
        "collapse_epsilon_rule": "explicit" if run.sde.collapse_epsilon is not None else "factor * V0",
        "collapse_hold_steps": run.sde.collapse_hold_steps,
        "kappa_source": "config" if "kappa" in run.raw.get("checks", {}) else "estimated",
        "chunk_size": config.CHUNK_SIZE,
        "noise_block": config.NOISE_BLOCK,
        "threads": run.sde.threads,
    }


def simulate_to(run: RunConfig, out_dir: Path) -> Dict[str, Any]:
    """Run the ensemble and write its artifacts into out_dir; returns the summary dict."""
    started = datetime.now(timezone.utc)
    stats = _ensemble(run)
    finished = datetime.now(timezone.utc)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = reporting.write_timeseries_csv(out_dir / reporting.TIMESERIES_FILE, stats.rows())
    metrics = stats.summary()
    if run.sde.sigma == 0.0:
        metrics["note"] = "no reduction expected"
    seeds = {"master_seed": run.sde.master_seed, "ensemble_size": run.sde.ensemble_size,
             "streams": "philox, spawn_key=(trajectory index,)"}
    summary = reporting.build_summary(metrics, csv_path, f"SIM-{uuid.uuid4()}", run.raw, seeds,
                                      _artifact_flags(run, stats), started, finished)
    summary["valid"] = stats.valid
    if "json" in run.formats:
        reporting.write_json(out_dir / reporting.SUMMARY_FILE, summary)
    _print_simulation(stats, metrics)
    return summary


def _print_simulation(stats: EnsembleStats, metrics: Dict[str, Any]):
    print("Ensemble summary")
    print("-" * 40)
    tau = metrics.get("tau")
    print(f"H0 = {stats.h0:.6g}, V0 = {stats.v0:.6g}, tau = {tau if tau is None else f'{tau:.4g}'}")
    for outcome in metrics["outcomes"]:
        print(f"  level {outcome['level']:+.6g}: {outcome['count']:6d}  ({outcome['frequency']:.4f})")
    print(f"  unresolved: {stats.unresolved}   blown up: {stats.blown_up}")
    if "note" in metrics:
        print(colored(metrics["note"], "yellow"))
    if not stats.valid:
        print(colored(f"Ensemble INVALID: {stats.blown_up} blow-ups above the "
                      f"{100 * config.BLOWUP_FRACTION_LIMIT:.0f}% limit", "red"))


def cmd_simulate(run: RunConfig, args) -> int:
    summary = simulate_to(run, run.output_dir)
    if not summary["valid"]:
        logger.warning("ensemble invalid: %s", summary["metrics"]["diagnostics"])
        return EXIT_FAIL
    print(f"Results written to {run.output_dir}")
    return EXIT_OK


def _restart_verdicts(run: RunConfig, kappa: float) -> List[TestVerdict]:
    count = int(run.checks["restart_points"])
    starts = [run.initial]
    if count > 1:
        starts += sample_chart_points(run.backend, count - 1, int(run.checks["seed"]) + 2)
    F = _tracked(run)
    restarts = []
    for p in starts:
        tau = reduction_timescale(kappa, run.sde.sigma, dispersion(run.hamiltonian, p))
        if not math.isfinite(tau):
            logger.info("restart point skipped: no reduction from %s", p.to_dict())
            continue
        horizon = float(run.checks["restart_horizon_tau"]) * tau
        sde = run.sde.replace(dt=min(run.sde.dt, horizon / 20.0))
        restarts.append(run_restarts(run.backend, run.hamiltonian, p, sde, horizon,
                                     int(run.checks["restart_count"]), F))
    return [drift_regression_V(restarts, "V"), drift_regression_V(restarts, "VF")]


def _optional_verdicts(run: RunConfig) -> List[TestVerdict]:
    verdicts = []
    H, backend = run.hamiltonian, run.backend
    op = H.full_operator()
    matrix_cpn = isinstance(backend, ProjectiveBackend) and op is not None
    if run.checks["weak_convergence"]:
        verdicts.append(weak_convergence_check(backend, H, run.initial, run.sde))
    if run.checks["oracle"] and matrix_cpn:
        from oracles import oracle_equivalence
        verdicts.append(oracle_equivalence(backend, H, run.initial, run.sde,
                                           count=int(run.checks["oracle_trajectories"])))
    if run.checks["lindblad"] and matrix_cpn:
        from oracles import lindblad_check
        verdicts.append(lindblad_check(op, run.psi0, run.sde))
    if run.checks["fokker_planck"] and matrix_cpn and backend.n == 1:
        from fokker_planck import fokker_planck_cp1
        verdicts.append(fokker_planck_cp1(op, run.initial, run.sde))
    return verdicts


def cmd_verify(run: RunConfig, args) -> int:
    verdicts = _identity_verdicts(run)
    stats = _ensemble(run)
    kappa, lam = run.curvature_bounds()
    verdicts += [
        martingale_test(stats, "H"),
        martingale_test(stats, "F"),
        supermartingale_bound(stats, kappa),
        dispersion_supermartingale_F(stats),
        ito_isometry_check(stats),
        terminal_variance_check(stats, kappa, lam),
    ]
    if run.hamiltonian.full_operator() is not None:
        verdicts.append(born_frequency_check(stats, run.hamiltonian.spectrum(), run.psi0))
    verdicts += _restart_verdicts(run, kappa)
    verdicts += _optional_verdicts(run)

    overview = summarize(verdicts, args.strict)
    overview["ensemble"] = stats.summary()
    overview["seed"] = run.sde.master_seed
    overview["generated"] = reporting.utc_now()
    reporting.write_verdicts(run.output_dir, [v.to_dict() for v in verdicts], overview, run.formats)
    _print_verdicts(verdicts)
    for v in verdicts:
        if v.status == INCONCLUSIVE:
            logger.warning("verdict %s inconclusive: %s", v.name, v.narrative)
    if not stats.valid:
        logger.warning("ensemble invalid: %s", stats.diagnostics)
        return EXIT_FAIL
    return EXIT_OK if overview["passed"] else EXIT_FAIL


def cmd_replay(args) -> int:
    """Re-run a recorded simulate from its summary.json and compare CSV hashes."""
    source = Path(args.out) if args.out else Path(args.config)
    summary_path = source / reporting.SUMMARY_FILE if source.is_dir() else source
    if not summary_path.exists():
        raise ConfigError("CONFIG_MISSING", f"no {reporting.SUMMARY_FILE} at {source}")
    recorded = reporting.read_json(summary_path)
    replay_dir = summary_path.parent / "replay"
    overrides = {"seed": recorded["seeds"]["master_seed"], "out": str(replay_dir), "threads": args.threads}
    run = build_run_config(recorded["scenario"], overrides)
    run.formats = ["csv", "json"]
    summary = simulate_to(run, replay_dir)
    same = summary["csv_sha256"] == recorded["csv_sha256"]
    if same:
        print(colored(f"Replay identical (sha256 {summary['csv_sha256'][:16]}...)", "green"))
        return EXIT_OK
    print(colored(f"Replay DIFFERS: {recorded['csv_sha256']} != {summary['csv_sha256']}", "red"))
    return EXIT_FAIL


COMMANDS = {
    "geometry-check": cmd_geometry_check,
    "identities": cmd_identities,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kahler_reduction",
                                     description="Stochastic reduction on Kähler state manifolds")
    parser.add_argument("command", choices=sorted(list(COMMANDS) + ["replay"]))
    parser.add_argument("--config", help="scenario TOML file (replay: run directory or summary.json)")
    parser.add_argument("--seed", type=int, help="override [sde].master_seed")
    parser.add_argument("--out", help="output directory (replay: recorded run directory)")
    parser.add_argument("--strict", action="store_true", help="treat inconclusive verdicts as failures")
    parser.add_argument("--threads", type=int, help="worker threads for ensembles")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, dispatch one subcommand and return its exit status."""
    init()  # Initialize colorama
    load_env()
    setup_logging()
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print(colored(f"--seed must be an unsigned 64-bit integer, got {args.seed}", "red"))
        return EXIT_CONFIG
    if args.threads is not None and args.threads < 1:
        print(colored("--threads must be >= 1", "red"))
        return EXIT_CONFIG
    status = EXIT_CONFIG
    try:
        if args.command == "replay":
            if not (args.out or args.config):
                raise ConfigError("CONFIG_MISSING", "replay needs --out or --config")
            status = cmd_replay(args)
        else:
            if not args.config:
                raise ConfigError("CONFIG_MISSING", f"{args.command} needs --config")
            run = parse_config(args.config, {"seed": args.seed, "out": args.out, "threads": args.threads})
            logger.info("scenario %s on %s, output %s", run.name, run.backend.backend_id, run.output_dir)
            status = COMMANDS[args.command](run, args)
    except ConfigError as e:
        logger.error("%s", e)
        print(colored(f"Configuration error: {e}", "red"))
        status = EXIT_CONFIG
    except (GeometryError, ObservableError, OSError) as e:
        logger.exception("setup failed")
        print(colored(f"Error: {e}", "red"))
        status = EXIT_CONFIG
    except DynamicsError as e:
        logger.exception("simulation failed")
        print(colored(f"Simulation error: {e}", "red"))
        status = EXIT_FAIL
    except KeyboardInterrupt:
        print("Interrupted by user")
        status = EXIT_FAIL
    except Exception as e:
        logger.exception("unexpected error")
        print(f"Error in main: {e}")
        status = EXIT_FAIL
    finally:
        logger.info("%s finished with exit status %d", args.command, status)
    return status


if __name__ == "__main__":
    sys.exit(main())
