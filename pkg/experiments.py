"""
Monte Carlo harness: seeded realizations, parameter sweeps, metrics, CSV
output and the command-line entry point.

    python experiments.py validate-config --config default_config.json
    python experiments.py run --seed 7 --out run_result.json
    python experiments.py sweep users --realizations 20 --seed 7 --out users.csv
"""

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from dc_solver import Allocation, Infeasible, SolverFailure
from orchestrator import (
    NoUsersLeft,
    RunConfig,
    RunResult,
    RunStatus,
    run_algorithm1,
    run_baseline_fixed,
    run_baseline_noac,
)
from results_db import describe_database, store_records, view_records
from scenario import (
    InvalidConfig,
    Scenario,
    ScenarioConfig,
    draw_channels,
    generate_scenario,
    load_config,
    validate,
    watts_to_dbm,
)

logger = logging.getLogger(__name__)

SEED_ENV = "CRAN_TI_SEED"
DEFAULT_SEED = 7
DEFAULT_CONFIG = Path(__file__).with_name("default_config.json")

# name -> (parameter, default values)
SWEEPS = {
    "users": ("num_users", [4, 6, 8, 10]),
    "rrsv": ("reservation_rate_bps_hz", [0.0, 1.0, 2.0, 2.5]),
    "per": ("error_threshold", [1e-7, 1e-5, 1e-3, 1e-2]),
    "delay": ("delay_budget_ms", [1.0, 2.0, 5.0, 10.0]),
    "baseline-compare": ("num_users", [4, 6, 8, 10]),
}
MODES = ("proposed", "fixed", "noac")
TRACE_COLUMNS = ["admission_pass", "iteration", "objective", "total_power_w", "power_change", "alpha_sum"]


class EmptyInput(ValueError):
    """Raised when metrics or a table are requested from nothing"""


class IoError(OSError):
    """Raised when a result file cannot be written"""


def with_total_users(config: ScenarioConfig, users: int) -> ScenarioConfig:
    """Spread users/2 pairs round-robin over the slices"""
    users = int(users)
    pairs = users // 2
    if users % 2 or pairs < config.num_slices:
        raise InvalidConfig(
            f"{users} users cannot form at least one pair in each of {config.num_slices} slices"
        )
    per_slice = [pairs // config.num_slices + (s < pairs % config.num_slices)
                 for s in range(config.num_slices)]
    return config.replace(pairs_per_slice=per_slice)


@dataclass
class Sweep:
    """Represents one swept knob, its values and the algorithm variants run at each value"""
    name: str
    parameter: str
    values: List[float]
    modes: List[str] = field(default_factory=lambda: ["proposed"])

    @classmethod
    def from_name(cls, name: str, values: Optional[Sequence[float]] = None) -> 'Sweep':
        if name not in SWEEPS:
            raise ValueError(f"unknown sweep {name!r}, expected one of {sorted(SWEEPS)}")
        parameter, defaults = SWEEPS[name]
        modes = list(MODES) if name == "baseline-compare" else ["proposed"]
        return cls(name=name, parameter=parameter,
                   values=list(values) if values is not None else list(defaults), modes=modes)

    def apply(self, config: ScenarioConfig, value) -> ScenarioConfig:
        if self.parameter == "num_users":
            return with_total_users(config, value)
        if self.parameter == "reservation_rate_bps_hz":
            return config.replace(reservation_rate_bps_hz=float(value))
        if self.parameter in ("error_threshold", "delay_budget_ms"):
            return config.replace(qos=replace(config.qos, **{self.parameter: float(value)}))
        raise ValueError(f"unknown sweep parameter {self.parameter!r}")


@dataclass
class RealizationRecord:
    """Represents the outcome of one (sweep value, mode, realization) run"""
    sweep: str
    parameter: str
    value: float
    mode: str
    realization: int
    scenario_seed: int
    channel_seed: int
    status: str
    total_power_w: float
    admitted: int
    requested: int
    iterations: int

    def to_dict(self):
        return asdict(self)


@dataclass
class RunMetrics:
    """Represents averaged results over the realizations of one sweep point"""
    total_power_dbm: List[float]
    mean_power_dbm: float
    sar_percent: float
    mean_iterations: float
    n_converged: int
    n_realizations: int
    n_failed: int = 0

    def to_row(self) -> dict:
        return {
            "mean_power_dbm": self.mean_power_dbm,
            "sar_percent": self.sar_percent,
            "mean_iterations": self.mean_iterations,
            "n_converged": self.n_converged,
            "n_realizations": self.n_realizations,
            "n_failed": self.n_failed,
        }


@dataclass
class SweepOutcome:
    """Represents a finished sweep: the metrics table and every realization behind it"""
    table: pd.DataFrame
    records: List[RealizationRecord]


def realization_seeds(seed: int, n: int) -> List[Tuple[int, int]]:
    """(scenario seed, channel seed) per realization, independent streams from one base seed"""
    children = np.random.SeedSequence(seed).spawn(n)
    return [tuple(int(v) for v in child.generate_state(2)) for child in children]


def compute_metrics(results: List[RunResult], scenario) -> RunMetrics:
    """
    SAR and mean power over a list of runs of the same instance size.

    Parameters:
        results (list of RunResult): One per realization.
        scenario (Scenario or int): The instance, or the requested user count.

    Returns:
        RunMetrics: Power averaged in watts over Converged runs, then in dBm.
            SAR and iterations are averaged over runs that finished; Failed
            runs are only counted.

    Raises:
        EmptyInput: No results given.
    """
    if not results:
        raise EmptyInput("no results to summarize")
    requested = scenario.num_users if isinstance(scenario, Scenario) else int(scenario)
    converged = [r for r in results if r.status == RunStatus.CONVERGED]
    powers = np.array([r.total_power_w for r in converged])
    with np.errstate(divide="ignore"):
        per_run = [float(watts_to_dbm(p)) for p in powers]
        mean_dbm = float(watts_to_dbm(powers.mean())) if powers.size else float("nan")
    finished = [r for r in results if r.status != RunStatus.FAILED]
    sar = [100.0 * len(r.admitted) / requested if requested else 100.0 for r in finished]
    return RunMetrics(
        total_power_dbm=per_run,
        mean_power_dbm=mean_dbm,
        sar_percent=float(np.mean(sar)) if sar else float("nan"),
        mean_iterations=float(np.mean([r.iterations for r in finished])) if finished else float("nan"),
        n_converged=len(converged),
        n_realizations=len(results),
        n_failed=len(results) - len(finished),
    )


def run_mode(scenario: Scenario, chan, mode: str, run_config: RunConfig) -> RunResult:
    """
    One run of the named variant. Rejection of everyone becomes a
    RejectedAll result and a block no backend could solve a Failed one.
    """
    runners = {"proposed": run_algorithm1, "fixed": run_baseline_fixed, "noac": run_baseline_noac}
    try:
        return runners[mode](scenario, chan, run_config)
    except NoUsersLeft as e:
        return RunResult(Allocation.initial(scenario), [], list(e.rejected), [],
                         RunStatus.REJECTED_ALL)
    except SolverFailure as e:
        logger.warning("%s run failed: %s", mode, e)
        return RunResult.failed()


def _run_task(config: ScenarioConfig, mode: str, seeds: Tuple[int, int],
              run_config: RunConfig) -> Tuple[RunResult, int]:
    scenario = generate_scenario(config.replace(seed=seeds[0]))
    chan = draw_channels(scenario, seeds[1])
    return run_mode(scenario, chan, mode, run_config), scenario.num_users


def run_monte_carlo(template: ScenarioConfig, sweep: Sweep, n_realizations: int, seed: int,
                    run_config: Optional[RunConfig] = None, max_workers: int = 4,
                    progress: bool = True) -> SweepOutcome:
    """
    Runs every (sweep value, mode) over the same seeded realizations.

    Parameters:
        template (ScenarioConfig): Base config each sweep value is applied to.
        sweep (Sweep): Knob, values and modes.
        n_realizations (int): Realizations per sweep point.
        seed (int): Base seed; realization r uses the same draws at every sweep point.
        run_config (RunConfig): Solver knobs shared by all runs.
        max_workers (int): Worker threads.
        progress (bool): Show a progress bar.

    Returns:
        SweepOutcome: One table row per (value, mode) and the ordered realization records.
    """
    if n_realizations < 1:
        raise ValueError("n_realizations must be at least 1")
    run_config = run_config if run_config is not None else RunConfig()
    seeds = realization_seeds(seed, n_realizations)
    configs = [sweep.apply(template, value) for value in sweep.values]

    outcomes: Dict[Tuple[int, int, int], Tuple[RunResult, int]] = {}
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        future_to_key = {
            executor.submit(_run_task, configs[v], mode, seeds[r], run_config): (v, m, r)
            for v in range(len(configs))
            for m, mode in enumerate(sweep.modes)
            for r in range(n_realizations)
        }
        for future in tqdm(as_completed(future_to_key), total=len(future_to_key),
                           desc=f"Sweep {sweep.name}", disable=not progress):
            key = future_to_key[future]
            try:
                outcomes[key] = future.result()
            except (Infeasible, RuntimeError, ValueError) as e:
                print(f"Error in realization {key[2]} at {sweep.parameter}={sweep.values[key[0]]}: {e}")
                outcomes[key] = (RunResult.failed(), configs[key[0]].num_users)

    records, rows = [], []
    for v, value in enumerate(sweep.values):
        for m, mode in enumerate(sweep.modes):
            results, requested = [], 0
            for r in range(n_realizations):
                result, requested = outcomes[(v, m, r)]
                results.append(result)
                records.append(RealizationRecord(
                    sweep=sweep.name, parameter=sweep.parameter, value=float(value), mode=mode,
                    realization=r, scenario_seed=seeds[r][0], channel_seed=seeds[r][1],
                    status=result.status.value, total_power_w=result.total_power_w,
                    admitted=len(result.admitted), requested=requested,
                    iterations=result.iterations,
                ))
            row = {sweep.parameter: value, "mode": mode}
            row.update(compute_metrics(results, requested).to_row())
            rows.append(row)
    return SweepOutcome(table=pd.DataFrame(rows), records=records)


def convergence_trace(result: RunResult) -> pd.DataFrame:
    """Per-iteration trace of a run as a table"""
    return pd.DataFrame([asdict(t) for t in result.trace], columns=TRACE_COLUMNS)


def emit_csv(table: pd.DataFrame, path) -> Path:
    """
    Writes a table as UTF-8 CSV with a header row.

    Raises:
        EmptyInput: The table has no rows.
        IoError: The file could not be written.
    """
    if table is None or table.empty:
        raise EmptyInput("refusing to write an empty table")
    path = Path(path)
    try:
        table.to_csv(path, index=False, encoding="utf-8")
    except OSError as e:
        raise IoError(f"Could not write {path}: {e}")
    return path


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma separated list of numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=str(DEFAULT_CONFIG), help="JSON or TOML scenario config")
    common.add_argument("--seed", type=int, default=None,
                        help=f"base seed (default: ${SEED_ENV}, then {DEFAULT_SEED})")
    common.add_argument("--out", default=None, help="output file")
    common.add_argument("--ac", choices=["on", "off"], default="on", help="admission control")
    common.add_argument("--delay-mode", choices=["dynamic", "fixed"], default="dynamic")
    common.add_argument("--users", type=int, default=None, help="total user count override")
    common.add_argument("--workers", type=int, default=4)
    common.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(
        prog="experiments",
        description="C-RAN tactile traffic allocation: single runs and Monte Carlo sweeps",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("run", parents=[common], help="solve one seeded instance")

    sweep = sub.add_parser("sweep", parents=[common], help="Monte Carlo sweep")
    sweep.add_argument("name", choices=sorted(SWEEPS) + ["convergence"])
    sweep.add_argument("--realizations", type=int, default=50)
    sweep.add_argument("--values", type=_float_list, default=None, help="comma separated sweep values")
    sweep.add_argument("--db", default=None, help="also store realization records in this SQLite file")

    sub.add_parser("validate-config", parents=[common], help="check a config file")

    show = sub.add_parser("show-db", help="describe a results database")
    show.add_argument("--db", default="results.db")
    show.add_argument("--limit", type=int, default=5)
    return parser


def resolve_seed(flag: Optional[int], config: ScenarioConfig) -> int:
    """--seed, then the environment, then the config file"""
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise InvalidConfig(f"{SEED_ENV} must be an integer, got {env!r}")
    return config.seed


def _load(args) -> ScenarioConfig:
    config = load_config(args.config)
    if args.users is not None:
        config = with_total_users(config, args.users)
    return config


def _run_config(args) -> RunConfig:
    return RunConfig(ac_enabled=args.ac == "on", delay_mode=args.delay_mode)


def _cmd_validate(args) -> int:
    config = _load(args)
    problems = config.violations()
    if not problems:
        problems = validate(generate_scenario(config))
    if problems:
        for problem in problems:
            print(f"Error: {problem}")
        return 1
    print(f"Config {args.config} is valid ({config.num_users} users, {config.num_rrh} RRHs)")
    return 0


def _cmd_run(args) -> int:
    config = _load(args)
    seeds = realization_seeds(resolve_seed(args.seed, config), 1)[0]
    scenario = generate_scenario(config.replace(seed=seeds[0]))
    chan = draw_channels(scenario, seeds[1])
    result = run_mode(scenario, chan, "proposed", _run_config(args))
    out = args.out or "run_result.json"
    try:
        result.to_json(out)
    except OSError as e:
        raise IoError(f"Could not write {out}: {e}")
    with np.errstate(divide="ignore"):
        power = float(watts_to_dbm(result.total_power_w))
    print(f"Status {result.status.value}: {len(result.admitted)}/{scenario.num_users} users admitted, "
          f"total power {power:.2f} dBm after {result.iterations} iterations")
    print(f"Run result has been exported to {out}")
    if result.status == RunStatus.FAILED:
        print("Error: a subproblem could not be solved, see the log")
        return 1
    return 0


def _cmd_sweep(args) -> int:
    config = _load(args)
    seed = resolve_seed(args.seed, config)
    run_config = _run_config(args)
    if args.name == "convergence":
        seeds = realization_seeds(seed, 1)[0]
        scenario = generate_scenario(config.replace(seed=seeds[0]))
        result = run_mode(scenario, draw_channels(scenario, seeds[1]), "proposed", run_config)
        path = emit_csv(convergence_trace(result), args.out or "convergence.csv")
        print(f"Wrote {len(result.trace)} iterations to {path}")
        return 0

    sweep = Sweep.from_name(args.name, args.values)
    outcome = run_monte_carlo(config, sweep, args.realizations, seed, run_config,
                              max_workers=args.workers)
    path = emit_csv(outcome.table, args.out or f"sweep_{args.name}.csv")
    print(f"Wrote {len(outcome.table)} rows to {path}")
    if args.db:
        store_records([r.to_dict() for r in outcome.records], args.db)
    return 0


def _cmd_show_db(args) -> int:
    if not Path(args.db).exists():
        print(f"Error: Could not find {args.db}")
        return 1
    describe_database(args.db)
    view_records(args.db, limit=args.limit)
    return 0


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse flags and dispatch; 2 on bad flags, 1 on runtime failure, 0 otherwise"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 2

    logging.basicConfig(level=getattr(args, "log_level", "WARNING"),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    commands = {"run": _cmd_run, "sweep": _cmd_sweep,
                "validate-config": _cmd_validate, "show-db": _cmd_show_db}
    try:
        return commands[args.command](args)
    except (InvalidConfig, EmptyInput, IoError, Infeasible, RuntimeError) as e:
        print(f"Error: {e}")
        return 1


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
