"""
Command line entry point: `python -m fairshare <command> [options] scenario`.

Exit codes: 0 success, 1 usage error, 2 invalid input, 3 numerical failure
(including a verification report with failed checks).
"""

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel

from fairshare import __version__
from fairshare.allocators import bf_rates, build_balance_table, lattice_points, pf_prime_rates
from fairshare.config import settings
from fairshare.dynamics import empirical_distribution, simulate
from fairshare.errors import FairshareError, ScenarioError, UsageError
from fairshare.fluid import integrate
from fairshare.lyapunov import LyapunovContext
from fairshare.models import AllocatorKind
from fairshare.pf_solver import alpha_fair_allocate
from fairshare.scenarios import LoadedScenario, load_scenarios, parse_scenario
from fairshare.schemas import AllocationOutput, CompareOutput
from fairshare.stationary import bf_stationary, pf_prime_stationary, total_variation, truncated_exact
from fairshare.verify import exact_box, run_all

logger = logging.getLogger(__name__)


class ArgumentParser(argparse.ArgumentParser):
    """argparse parser that raises UsageError instead of exiting"""

    def error(self, message: str):
        raise UsageError(message)


def _state(text: str) -> List[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got '{text}'")
    if not values:
        raise argparse.ArgumentTypeError("empty state")
    return values


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--output", "-o", type=Path, help="Write the result here instead of stdout")
    common.add_argument("--raw", action="store_true", help="Full precision floats instead of 9 significant digits")
    common.add_argument(
        "--log-level",
        type=str.upper,
        choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"],
        default=settings.LOG_LEVEL.upper(),
        help="Logging level (default from FAIRSHARE_LOG_LEVEL)",
    )
    common.add_argument("--seed", type=int, help="Override the scenario seed")

    parser = ArgumentParser(prog="fairshare", description="Fair bandwidth sharing: allocations, stationary laws, simulation")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=ArgumentParser)
    sub.required = True

    kinds = [k.value for k in AllocatorKind]

    p = sub.add_parser("allocate", parents=[common], help="Rates, log rates, prices and KKT residual at a state")
    p.add_argument("scenario", help="Scenario JSON file, or - for stdin")
    p.add_argument("--x", type=_state, required=True, help="Population vector, e.g. 1,1,1")
    p.add_argument("--allocator", choices=kinds, help="Allocator (default from the scenario)")

    p = sub.add_parser("compare", parents=[common], help="PF, PF' and BF rates side by side")
    p.add_argument("scenario", help="Scenario JSON file, or - for stdin")
    p.add_argument("--x", type=_state, required=True, help="Population vector, e.g. 1,1,1")

    p = sub.add_parser("simulate", parents=[common], help="Event log of the population process as CSV")
    p.add_argument("scenario", help="Scenario JSON file, or - for stdin")
    p.add_argument("--allocator", choices=kinds, help="Allocator (default from the scenario)")
    p.add_argument("--occupancy", type=Path, help="Also write the time-weighted occupancy law here")

    p = sub.add_parser("stationary", parents=[common], help="Stationary law on the scenario box as CSV")
    p.add_argument("scenario", help="Scenario JSON file, or - for stdin")
    p.add_argument("--allocator", choices=[AllocatorKind.PF_PRIME.value, AllocatorKind.BF.value, AllocatorKind.PF.value])
    p.add_argument("--exact", action="store_true", help="Solve the truncated chain instead of the closed form")

    p = sub.add_parser("balance-table", parents=[common], help="Log balance function over the box as CSV")
    p.add_argument("scenario", help="Scenario JSON file, or - for stdin")

    p = sub.add_parser("fluid", parents=[common], help="Fluid trajectory under PF as CSV")
    p.add_argument("scenario", help="Scenario JSON file, or - for stdin")

    p = sub.add_parser("verify", parents=[common], help="Run the property battery and print a JSON report")
    p.add_argument("scenarios", nargs="*", help="Extra scenario files or directories")
    p.add_argument("--budget", type=float, default=3600.0, help="Wall-clock budget in seconds")
    p.add_argument("--only", action="append", help="Run only checks whose id starts with this prefix")
    p.add_argument("--seeds", type=int, nargs="+", help="Seeds for the stochastic checks (default: the --seed value)")
    p.add_argument("--workers", type=int, help="Checks run at once (default from FAIRSHARE_VERIFY_WORKERS)")
    return parser


# Output helpers
def _rounded(value: Any, digits: int) -> Any:
    if isinstance(value, float):
        return float(f"{value:.{digits}g}") if math.isfinite(value) else value
    if isinstance(value, dict):
        return {k: _rounded(v, digits) for k, v in value.items()}
    if isinstance(value, list):
        return [_rounded(v, digits) for v in value]
    return value


def _write(text: str, output: Optional[Path]) -> None:
    if output is None:
        sys.stdout.write(text)
    else:
        output.write_text(text)
        logger.info(f"📝 Wrote {output}")


def emit_json(payload: Any, args: argparse.Namespace) -> None:
    data = payload.model_dump(mode="json") if isinstance(payload, BaseModel) else payload
    if not args.raw:
        data = _rounded(data, settings.SIG_DIGITS)
    _write(json.dumps(data, indent=2) + "\n", args.output)


def emit_frame(frame: pd.DataFrame, args: argparse.Namespace, output: Optional[Path] = None) -> None:
    float_format = None if args.raw else f"%.{settings.SIG_DIGITS}g"
    _write(frame.to_csv(index=False, float_format=float_format), output if output is not None else args.output)


def _seed(args: argparse.Namespace, scenario: Optional[LoadedScenario] = None) -> int:
    if args.seed is not None:
        return args.seed
    if settings.SEED is not None:
        return settings.SEED
    return scenario.spec.run.seed if scenario is not None else 0


def _log_rates(rates: np.ndarray) -> List[Optional[float]]:
    return [math.log(v) if v > 0 else None for v in rates]


def _check_state(scenario: LoadedScenario, x: Sequence[float]) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (scenario.num_classes,):
        raise UsageError(f"--x has {len(x)} entries, scenario has {scenario.num_classes} classes")
    return x


def _lattice_box(scenario: LoadedScenario, x: np.ndarray) -> int:
    return max(1, scenario.spec.run.box, int(math.ceil(x.max())))


# Commands
def cmd_allocate(args: argparse.Namespace) -> int:
    scenario = parse_scenario(args.scenario)
    x = _check_state(scenario, args.x)
    kind = AllocatorKind(args.allocator or scenario.spec.allocator.kind)

    if kind in (AllocatorKind.PF, AllocatorKind.ALPHA_FAIR):
        spec = scenario.spec.allocator
        w, alpha = (spec.w, spec.alpha) if kind == AllocatorKind.ALPHA_FAIR else (None, 1.0)
        result = alpha_fair_allocate(scenario.region, x, w=w, alpha=alpha)
        output = AllocationOutput(
            allocator=kind.value,
            x=x.tolist(),
            rates=result.rates.tolist(),
            log_rates=_log_rates(result.rates),
            prices=result.prices.tolist(),
            kkt_residual=result.kkt_residual,
        )
    else:
        if kind == AllocatorKind.BF:
            rates = bf_rates(build_balance_table(scenario.region, _lattice_box(scenario, x)), x)
        else:
            rates = pf_prime_rates(scenario.region, x)
        output = AllocationOutput(allocator=kind.value, x=x.tolist(), rates=rates.tolist(), log_rates=_log_rates(rates))

    emit_json(output, args)
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    scenario = parse_scenario(args.scenario)
    x = _check_state(scenario, args.x)
    region = scenario.region
    lattice = bool(np.all(x == np.round(x)))

    rates = {AllocatorKind.PF.value: scenario.allocator(AllocatorKind.PF)(x).tolist()}
    distances = {}
    box = None
    if lattice:
        table = build_balance_table(region, _lattice_box(scenario, x))
        rates[AllocatorKind.PF_PRIME.value] = pf_prime_rates(region, x).tolist()
        rates[AllocatorKind.BF.value] = bf_rates(table, x).tolist()

        model = scenario.model
        if model is not None and not model.has_routing and scenario.phases is None:
            box = exact_box(scenario)
            ctx = LyapunovContext.from_model(region, model)
            small = table if table.N >= box else build_balance_table(region, box)
            pf_prime_law = pf_prime_stationary(region, ctx, box)
            bf_law = bf_stationary(small, ctx, box)
            pf_law = truncated_exact(region, scenario.allocator(AllocatorKind.PF), model, box)
            distances = {
                "pf_prime_vs_bf": total_variation(pf_prime_law, bf_law),
                "pf_vs_pf_prime": total_variation(pf_law, pf_prime_law),
                "pf_vs_bf": total_variation(pf_law, bf_law),
            }
    else:
        logger.warning("⚠️ PF' and BF are only defined on lattice states; comparing PF alone")

    emit_json(CompareOutput(x=x.tolist(), rates=rates, total_variation=distances, box=box), args)
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    scenario = parse_scenario(args.scenario)
    model = scenario.require_model("simulate")
    run_spec = scenario.spec.run
    if run_spec.t_end is None:
        raise ScenarioError("run.t_end: required by 'simulate'")
    kind = AllocatorKind(args.allocator or scenario.spec.allocator.kind)
    seed = _seed(args, scenario)

    expansion = scenario.expansion()
    if expansion is not None:
        allocator = scenario.phase_allocator(expansion, kind, box=settings.RECORD_BOX)
        region, model, class_map = expansion.region, expansion.model, expansion.class_map
        x0 = None
    else:
        allocator = scenario.allocator(kind, box=settings.RECORD_BOX)
        region, class_map = scenario.region, None
        x0 = None if run_spec.x0 is None else np.round(run_spec.scale * np.asarray(run_spec.x0)).astype(int)

    logger.info(f"🚀 Simulating {scenario.name} with {allocator.describe()} to T={run_spec.t_end:g}, seed {seed}")
    run = simulate(model, region, allocator, run_spec.t_end, seed, x0=x0)
    logger.info(f"✅ {run.num_events} events simulated")
    emit_frame(run.events_frame(), args)

    if args.occupancy is not None:
        law = empirical_distribution(run, burn_in=run_spec.burn_in, class_map=class_map)
        emit_frame(law.to_frame(), args, output=args.occupancy)
    return 0


def cmd_stationary(args: argparse.Namespace) -> int:
    scenario = parse_scenario(args.scenario)
    model = scenario.require_model("stationary")
    region = scenario.region
    N = scenario.spec.run.box
    default = scenario.spec.allocator.kind
    kind = AllocatorKind(args.allocator or (default if default in (AllocatorKind.BF, AllocatorKind.PF_PRIME) else AllocatorKind.PF_PRIME))

    if args.exact or kind == AllocatorKind.PF:
        law = truncated_exact(region, scenario.allocator(kind, box=N), model, N)
    else:
        if model.has_routing and kind == AllocatorKind.PF_PRIME:
            logger.warning("⚠️ The PF' closed form assumes no routing; use --exact for routed models")
        ctx = LyapunovContext.from_model(region, model)
        if kind == AllocatorKind.BF:
            law = bf_stationary(build_balance_table(region, max(N, 1)), ctx, N)
        else:
            law = pf_prime_stationary(region, ctx, N)

    emit_frame(law.to_frame(), args)
    return 0


def cmd_balance_table(args: argparse.Namespace) -> int:
    scenario = parse_scenario(args.scenario)
    table = build_balance_table(scenario.region, scenario.spec.run.box)
    points = lattice_points(table.N, table.num_classes)
    frame = pd.DataFrame(points, columns=[f"x_{r + 1}" for r in range(table.num_classes)])
    frame["phi"] = table.phi[tuple(points.T)]
    emit_frame(frame, args)
    return 0


def cmd_fluid(args: argparse.Namespace) -> int:
    scenario = parse_scenario(args.scenario)
    model = scenario.require_model("fluid")
    run_spec = scenario.spec.run
    if run_spec.t_end is None:
        raise ScenarioError("run.t_end: required by 'fluid'")
    x0 = np.ones(scenario.num_classes) if run_spec.x0 is None else np.asarray(run_spec.x0, dtype=float)

    traj = integrate(scenario.region, model, x0, run_spec.t_end, h_step=run_spec.h_step)
    emit_frame(traj.to_frame(LyapunovContext.from_model(scenario.region, model)), args)
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    scenarios = load_scenarios(args.scenarios)
    seeds = args.seeds or [_seed(args)]
    report = run_all(scenarios=scenarios, seeds=seeds, budget=args.budget, only=args.only, workers=args.workers)
    emit_json(report, args)
    for check in report.failed:
        logger.error(f"❌ {check.id}: measured {check.measured} against {check.threshold} ({check.detail})")
    return 3 if report.status == "fail" else 0


HANDLERS = {
    "allocate": cmd_allocate,
    "compare": cmd_compare,
    "simulate": cmd_simulate,
    "stationary": cmd_stationary,
    "balance-table": cmd_balance_table,
    "fluid": cmd_fluid,
    "verify": cmd_verify,
}


def dispatch(args: argparse.Namespace) -> int:
    return HANDLERS[args.command](args)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        logging.basicConfig(level=settings.LOG_LEVEL, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
        logger.error(f"❌ {e}")
        return e.exit_code

    logging.basicConfig(
        level=args.log_level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    try:
        return dispatch(args)
    except FairshareError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
