import argparse

from .config import ALGORITHM_ALIASES, ALGORITHMS


def parse_args(argv=None):
    parser = argparse.ArgumentParser(prog="mfdkf", description="Distributed Kalman filtering under non-Gaussian observation noise")
    parser.add_argument("command", choices=["run", "sweep", "calibrate", "validate-topology"], help="subcommand")
    parser.add_argument("--config", type=str, default=None, help="scenario config (JSON, local path or fsspec URL)")
    parser.add_argument("--out", type=str, default="results", help="output directory (local path or fsspec URL)")

    ## Scenario without a config file
    parser.add_argument("--system", type=str, default=None, help="rotating or cv (used without --config)")
    parser.add_argument("--noise", type=str, default=None, help="noise shorthand, e.g. alpha(1.2,0,2,0) (used without --config)")

    ## Overrides
    parser.add_argument("--seed", type=int, default=None, help="master seed")
    parser.add_argument("--runs", type=int, default=None, help="Monte Carlo runs")
    parser.add_argument("--steps", type=int, default=None, help="time steps per run")
    parser.add_argument("--algo", type=str, default=None, choices=list(ALGORITHMS) + list(ALGORITHM_ALIASES), help="algorithm")
    parser.add_argument("--kappa", type=int, default=None, help="mixture components per node")
    parser.add_argument("--xi", type=float, default=None, help="consensus gain factor")
    parser.add_argument("--node", type=int, default=None, help="node to report (1-based)")

    ## Sweep
    parser.add_argument("--sweep-param", type=str, default=None, help="parameter to sweep (xi, kappa, algorithm, node, ...)")
    parser.add_argument("--sweep-values", type=str, default=None, help="comma separated values")

    ## Debug
    parser.add_argument("--dump-states", action="store_true", help="write states.csv for run 0")
    parser.add_argument("--dump-samples", action="store_true", help="calibrate: write the calibration samples")

    return parser.parse_args(argv)
