# %%
import json
import logging
from dataclasses import replace
from typing import Dict, List, Optional

import fsspec
import pandas as pd

from .args import parse_args
from .config import ScenarioConfig, parse_config, scenario_to_dict
from .errors import CalibrationError, ConfigError, InputError, NumericalError, ParameterDomainError, TopologyError
from .fusion_model import bank_summary, build_fused_model, enumerate_submodels
from .harness import Calibration, build_system, calibrate, calibration_key, gmm_table, run_monte_carlo
from .noise import overall_covariance
from .wsn import topology_summary

logger = logging.getLogger("mfdkf")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

SWEEP_TYPES = {"xi": float, "kappa": int, "node": int, "steps": int, "runs": int, "seed": int, "burn_in": int, "algorithm": str}
FLOAT_FORMAT = "%.17g"


# %%
def write_csv(df: pd.DataFrame, fs, path: str):
    with fs.open(path, "w") as fp:
        df.to_csv(fp, index=False, float_format=FLOAT_FORMAT)
    logger.info(f"wrote {path}")


def write_report(report, config: ScenarioConfig, fs, out: str):
    fs.makedirs(out, exist_ok=True)
    write_csv(report.rmse, fs, f"{out}/rmse.csv")
    write_csv(report.disagreement, fs, f"{out}/disagreement.csv")
    write_csv(report.summary, fs, f"{out}/summary.csv")
    write_csv(report.failures, fs, f"{out}/failures.csv")
    write_csv(report.timing, fs, f"{out}/timing.csv")
    if report.states is not None:
        write_csv(report.states, fs, f"{out}/states.csv")
    with fs.open(f"{out}/config.json", "w") as fp:
        json.dump(scenario_to_dict(config), fp, indent=4)


def log_summary(summary: pd.DataFrame, node: int):
    focus = summary[summary["node"] == node]
    logger.info("summary:\n" + focus.round(3).to_string(index=False))


def load_config(args) -> ScenarioConfig:
    overrides = dict(
        seed=args.seed,
        runs=args.runs,
        steps=args.steps,
        algorithm=args.algo,
        kappa=args.kappa,
        xi=args.xi,
        node=args.node,
        record_states=True if args.dump_states else None,
    )
    if args.config is not None:
        return parse_config(args.config, **overrides)
    raw = {"system": args.system or "rotating"}
    if args.noise is not None:
        raw["noise"] = args.noise
    return parse_config(raw=raw, **overrides)


def sweep_values(args) -> List:
    if args.sweep_param is None or args.sweep_values is None:
        raise ConfigError("sweep", "--sweep-param and --sweep-values are required")
    if args.sweep_param not in SWEEP_TYPES:
        raise ConfigError("sweep", f"cannot sweep {args.sweep_param!r}, expected one of {sorted(SWEEP_TYPES)}")
    cast = SWEEP_TYPES[args.sweep_param]
    try:
        return [cast(v.strip()) for v in args.sweep_values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(args.sweep_param, f"bad sweep values {args.sweep_values!r}")


# %%
def cmd_run(config: ScenarioConfig, fs, out: str) -> int:
    report = run_monte_carlo(config)
    write_report(report, config, fs, out)
    log_summary(report.summary, config.node)
    return EXIT_OK if report.ok else EXIT_RUNTIME


def cmd_sweep(config: ScenarioConfig, param: str, values: List, fs, out: str) -> int:
    calibrations: Dict = {}
    summaries = []
    status = EXIT_OK
    for value in values:
        swept = config.with_overrides(**{param: value})
        key = calibration_key(swept)
        if key not in calibrations:
            calibrations[key] = calibrate(swept)
        report = run_monte_carlo(swept, calibration=calibrations[key])
        write_report(report, swept, fs, f"{out}/{param}={value}")
        summary = report.summary.copy()
        summary.insert(0, "sweep_value", value)
        summary.insert(0, "sweep_param", param)
        summaries.append(summary)
        if not report.ok:
            status = EXIT_RUNTIME
    summary = pd.concat(summaries, ignore_index=True)
    write_csv(summary, fs, f"{out}/summary.csv")
    log_summary(summary, config.node)
    return status


def cmd_calibrate(config: ScenarioConfig, kappas: List[int], fs, out: str, samples_dir: Optional[str] = None) -> int:
    fs.makedirs(out, exist_ok=True)
    if samples_dir is not None:
        config = replace(config, calibration=replace(config.calibration, samples_dir=samples_dir))
    system, _ = build_system(config)
    tables, banks = [], []
    for kappa in kappas:
        calibration: Calibration = calibrate(config.with_overrides(kappa=kappa))
        tables.append(gmm_table(calibration))
        nominal_R = [overall_covariance(g) for g in calibration.nominal]
        for n in range(config.node_count):
            fused = build_fused_model(config.topology, n, [system.H] * config.node_count, nominal_R)
            bank = enumerate_submodels([calibration.gmms[m] for m in fused.neighbors], kappa)
            banks.append(bank_summary(bank, n).assign(kappa=kappa))
    write_csv(pd.concat(tables, ignore_index=True), fs, f"{out}/gmm.csv")
    write_csv(pd.concat(banks, ignore_index=True), fs, f"{out}/banks.csv")
    return EXIT_OK


def cmd_validate_topology(config: ScenarioConfig, fs, out: str) -> int:
    fs.makedirs(out, exist_ok=True)
    table = topology_summary(config.topology)
    logger.info(f"topology {config.topology_name} is valid:\n" + table.to_string(index=False))
    write_csv(table, fs, f"{out}/topology.csv")
    return EXIT_OK


# %%
def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")
    args = parse_args(argv)
    fs, out = fsspec.core.url_to_fs(args.out)

    try:
        config = load_config(args)
        if args.command == "run":
            return cmd_run(config, fs, out)
        if args.command == "sweep":
            return cmd_sweep(config, args.sweep_param, sweep_values(args), fs, out)
        if args.command == "calibrate":
            kappas = sweep_values(args) if args.sweep_param == "kappa" else [config.kappa]
            return cmd_calibrate(config, kappas, fs, out, args.out if args.dump_samples else None)
        return cmd_validate_topology(config, fs, out)
    except TopologyError as e:
        for violation in e.violations:
            logger.error(violation)
        return EXIT_CONFIG
    except (ConfigError, ParameterDomainError) as e:
        logger.error(str(e))
        return EXIT_CONFIG
    except (CalibrationError, InputError, NumericalError, OSError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_RUNTIME
