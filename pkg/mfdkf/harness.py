# %%
import logging
import multiprocessing as mp
import os
import time
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from .config import ScenarioConfig
from .consensus import ConsensusConfig, NodeModel, c_mfdkf_step, s_mfdkf_step
from .errors import FilterDivergence, NumericalError
from .filters import InitialCondition, KfState, LinearSystem, cdkf_step, init_node_state
from .fusion_model import build_fused_model, enumerate_submodels
from .noise import GmmModel, describe, em_fit_gmm, overall_covariance, sample, save_samples_csv
from .wsn import Topology

logger = logging.getLogger(__name__)

## spawn-key prefixes keeping run streams and calibration streams apart
RUN_STREAM = 0
CALIBRATION_SAMPLES_STREAM = 1
CALIBRATION_EM_STREAM = 2

NUM_WORKERS_ENV = "MFDKF_NUM_WORKERS"


# %%
def rotating_system(theta: float = np.pi / 18, process_noise: float = 0.01):
    A = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    system = LinearSystem(A=A, Q=process_noise * np.eye(2), H=np.array([[1.0, 1.0]]))
    x0 = np.array([1.0, 1.0])
    return system, InitialCondition(x0=x0, x_hat0=x0.copy(), M0=np.eye(2))


def cv_system(process_noise: float = 0.01):
    A = np.array([[1.0, 1.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 0.0, 1.0]])
    G = np.array([[0.5, 0.0], [1.0, 0.0], [0.0, 0.5], [0.0, 1.0]])
    H = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]])
    system = LinearSystem(A=A, Q=process_noise * np.eye(2), H=H, G=G)
    x0 = np.array([500.0, 10.0, 500.0, -10.0])
    return system, InitialCondition(x0=x0, x_hat0=x0.copy(), M0=np.eye(4))


def build_system(config: ScenarioConfig):
    if config.system.name == "rotating":
        return rotating_system(config.system.theta, config.system.process_noise_value)
    return cv_system(config.system.process_noise_value)


def component_groups(config: ScenarioConfig) -> Dict[str, List[int]]:
    if config.system.name == "cv":
        return {"x": [0], "y": [2]}
    return {"state": [0, 1]}


def stream_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


# %%
class Calibration(NamedTuple):
    kappa: int
    gmms: List[GmmModel]
    nominal: List[GmmModel]


def calibration_key(config: ScenarioConfig):
    """Fits depend only on these fields; sweeps reuse a calibration while the key is unchanged."""
    specs = tuple(describe(config.noise_for(n)) for n in range(config.node_count))
    return (config.kappa, specs, config.system.name, config.calibration, config.seed)


def calibrate(config: ScenarioConfig) -> Calibration:
    """Draw calibration samples from every node's true noise and fit kappa- and 1-component mixtures."""
    system, _ = build_system(config)
    em_config = config.calibration.em_config()
    gmms, nominal = [], []
    for n in range(config.node_count):
        spec = config.noise_for(n)
        samples = sample(spec, stream_rng(config.seed, CALIBRATION_SAMPLES_STREAM, n), config.calibration.samples, dim=system.q)
        if config.calibration.samples_dir is not None:
            save_samples_csv(samples, f"{config.calibration.samples_dir}/samples_node{n + 1:02d}.csv")
        single = em_fit_gmm(samples, 1, em_config)
        if config.kappa == 1:
            gmm = single
        else:
            gmm = em_fit_gmm(samples, config.kappa, em_config, rng=stream_rng(config.seed, CALIBRATION_EM_STREAM, n))
        logger.info(
            f"node {n + 1}: {describe(spec)} kappa={config.kappa} weights={np.round(gmm.weights, 4).tolist()} "
            f"traces={np.round(gmm.traces, 4).tolist()} iterations={gmm.n_iter} restarts={gmm.restarts}"
        )
        gmms.append(gmm)
        nominal.append(single)
    return Calibration(kappa=config.kappa, gmms=gmms, nominal=nominal)


def gmm_table(calibration: Calibration) -> pd.DataFrame:
    rows = []
    for n, gmm in enumerate(calibration.gmms):
        for i in range(gmm.kappa):
            rows.append(
                {
                    "node": n + 1,
                    "kappa": gmm.kappa,
                    "component": i,
                    "weight": gmm.weights[i],
                    "mean": " ".join(f"{v:.17g}" for v in gmm.means[i]),
                    "trace": gmm.traces[i],
                    "covariance": " ".join(f"{v:.17g}" for v in gmm.covariances[i].ravel()),
                    "log_likelihood": gmm.log_likelihood_history[-1],
                    "n_iter": gmm.n_iter,
                    "restarts": gmm.restarts,
                }
            )
    return pd.DataFrame(rows)


# %%
@dataclass(frozen=True)
class Scenario:
    config: ScenarioConfig
    system: LinearSystem
    init: InitialCondition
    calibration: Calibration
    models: List[NodeModel]


def build_scenario(config: ScenarioConfig, calibration: Optional[Calibration] = None) -> Scenario:
    system, init = build_system(config)
    if calibration is None:
        calibration = calibrate(config)
    nominal_R = [overall_covariance(gmm) for gmm in calibration.nominal]
    H = [system.H] * config.node_count

    ## S-MFDKF fuses only the node's own observation
    fusion_topology = Topology.isolated(config.node_count) if config.algorithm == "S-MFDKF" else config.topology
    models = []
    for n in range(config.node_count):
        fused = build_fused_model(fusion_topology, n, H, nominal_R)
        bank = None
        if config.algorithm != "CDKF":
            bank = enumerate_submodels([calibration.gmms[m] for m in fused.neighbors], config.kappa)
        models.append(NodeModel(fused=fused, bank=bank))
    return Scenario(config=config, system=system, init=init, calibration=calibration, models=models)


# %%
class Trajectory(NamedTuple):
    truth: np.ndarray
    observations: np.ndarray


class FilterOutput(NamedTuple):
    estimates: np.ndarray
    anomalies: np.ndarray
    chi: Optional[List[List[np.ndarray]]]


class RunRecord(NamedTuple):
    run: int
    estimates: Optional[np.ndarray]
    truth: Optional[np.ndarray]
    disagreement: Optional[np.ndarray]
    anomalies: int
    seconds: float
    failure: Optional[Dict]
    states: Optional[pd.DataFrame]


def simulate_truth(
    system: LinearSystem,
    init: InitialCondition,
    steps: int,
    noise_specs,
    process_rng: np.random.Generator,
    observation_rngs: List[np.random.Generator],
) -> Trajectory:
    """Truth x(1..steps) and per-node observations z, shapes (steps, p) and (steps, N, q)."""
    q_dim = system.Q.shape[0]
    w = process_rng.multivariate_normal(np.zeros(q_dim), system.Q, size=steps)
    G = np.eye(system.p) if system.G is None else system.G
    truth = np.empty((steps, system.p))
    x = np.asarray(init.x0, dtype=float)
    for k in range(steps):
        x = system.A @ x + G @ w[k]
        truth[k] = x
    clean = truth @ system.H.T
    v = np.stack([sample(spec, rng, steps, dim=system.q) for spec, rng in zip(noise_specs, observation_rngs)], axis=1)
    return Trajectory(truth=truth, observations=clean[:, None, :] + v)


def simulate_run(scenario: Scenario, run: int) -> Trajectory:
    config = scenario.config
    return simulate_truth(
        scenario.system,
        scenario.init,
        config.steps,
        [config.noise_for(n) for n in range(config.node_count)],
        stream_rng(config.seed, RUN_STREAM, run, 0),
        [stream_rng(config.seed, RUN_STREAM, run, n + 1) for n in range(config.node_count)],
    )


def run_filters(scenario: Scenario, observations: np.ndarray, record_chi: bool = False) -> FilterOutput:
    config, system, init = scenario.config, scenario.system, scenario.init
    steps, N = observations.shape[:2]
    estimates = np.empty((steps, N, system.p))
    anomalies = np.zeros((steps, N), dtype=bool)
    chi = [] if record_chi else None

    if config.algorithm == "CDKF":
        states = [KfState(x=np.array(init.x_hat0, dtype=float), M=np.array(init.M0, dtype=float))] * N
        for k in range(steps):
            for n, model in enumerate(scenario.models):
                try:
                    states[n] = cdkf_step(system, model.fused.observe(observations[k]), states[n])
                except NumericalError as e:
                    raise FilterDivergence(str(e), step=k + 1, node=n + 1)
                estimates[k, n] = states[n].x
        return FilterOutput(estimates=estimates, anomalies=anomalies, chi=chi)

    step_fn = s_mfdkf_step if config.algorithm == "S-MFDKF" else c_mfdkf_step
    consensus = ConsensusConfig(xi=0.0 if config.algorithm == "MFDKF" else config.xi)
    states = [init_node_state(model.bank, init) for model in scenario.models]
    for k in range(steps):
        try:
            states = step_fn(
                system,
                states,
                observations[k],
                scenario.models,
                config.topology,
                consensus,
                anomaly_mode=config.anomaly.mode,
                threshold=config.anomaly.threshold,
            )
        except NumericalError as e:
            raise FilterDivergence(str(e), step=k + 1)
        for n, s in enumerate(states):
            estimates[k, n] = s.estimate
            anomalies[k, n] = s.anomaly
        if record_chi:
            chi.append([s.chi for s in states])
    return FilterOutput(estimates=estimates, anomalies=anomalies, chi=chi)


def states_table(output: FilterOutput) -> pd.DataFrame:
    steps, N, p = output.estimates.shape
    rows = []
    for k in range(steps):
        for n in range(N):
            row = {"node": n + 1, "step": k + 1}
            row.update({f"x{i}": output.estimates[k, n, i] for i in range(p)})
            row["anomaly"] = int(output.anomalies[k, n])
            if output.chi is not None:
                row["chi"] = " ".join(f"{c:.17g}" for c in output.chi[k][n])
            rows.append(row)
    return pd.DataFrame(rows)


# %%
def rmse_series(estimates: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """RMSE(k) = sqrt(mean over runs of ||x_hat(k) - x(k)||^2). Inputs are (runs, steps[, dim])."""
    estimates = np.asarray(estimates, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimates.shape != truth.shape:
        raise ValueError(f"estimates {estimates.shape} and truth {truth.shape} are not aligned")
    err = (estimates - truth) ** 2
    if err.ndim > 2:
        err = err.reshape(err.shape[0], err.shape[1], -1).sum(axis=-1)
    return np.sqrt(err.mean(axis=0))


def steady_rmse(series: np.ndarray, burn_in: int) -> float:
    series = np.asarray(series, dtype=float)
    if len(series) <= burn_in:
        raise ValueError(f"series of length {len(series)} has nothing after burn_in={burn_in}")
    return float(np.mean(series[burn_in:]))


def steady_median(series: np.ndarray, burn_in: int) -> float:
    series = np.asarray(series, dtype=float)
    if len(series) <= burn_in:
        raise ValueError(f"series of length {len(series)} has nothing after burn_in={burn_in}")
    return float(np.median(series[burn_in:]))


def disagreement_series(estimates: np.ndarray) -> np.ndarray:
    """delta(k) = sqrt(sum_n ||x_n(k) - mean_n x_n(k)||^2) for estimates shaped (steps, N, dim)."""
    estimates = np.asarray(estimates, dtype=float)
    if estimates.ndim == 2:
        estimates = estimates[..., None]
    spread = estimates - estimates.mean(axis=1, keepdims=True)
    return np.sqrt(np.sum(spread**2, axis=(1, 2)))


# %%
def run_single(scenario: Scenario, run: int) -> RunRecord:
    config = scenario.config
    groups = component_groups(config)
    trajectory = simulate_run(scenario, run)
    record_states = config.record_states and run == 0

    start = time.perf_counter()
    try:
        output = run_filters(scenario, trajectory.observations, record_chi=record_states)
    except FilterDivergence as e:
        logger.warning(f"run {run} failed at step {e.step}: {e}")
        failure = {"run": run, "step": e.step, "node": e.node, "reason": str(e)}
        return RunRecord(run, None, None, None, 0, time.perf_counter() - start, failure, None)
    seconds = time.perf_counter() - start

    disagreement = np.stack(
        [disagreement_series(output.estimates[..., idx]) for idx in groups.values()],
        axis=-1,
    )
    return RunRecord(
        run=run,
        estimates=output.estimates,
        truth=trajectory.truth,
        disagreement=disagreement,
        anomalies=int(output.anomalies.sum()),
        seconds=seconds,
        failure=None,
        states=states_table(output) if record_states else None,
    )


_WORKER_SCENARIO: Optional[Scenario] = None


def _init_worker(scenario: Scenario):
    global _WORKER_SCENARIO
    _WORKER_SCENARIO = scenario


def _run_worker(run: int) -> RunRecord:
    return run_single(_WORKER_SCENARIO, run)


def num_workers_from_env() -> int:
    value = os.environ.get(NUM_WORKERS_ENV, "1")
    try:
        return max(1, int(value))
    except ValueError:
        logger.warning(f"ignoring {NUM_WORKERS_ENV}={value!r}, using 1 worker")
        return 1


# %%
@dataclass
class MetricsReport:
    rmse: pd.DataFrame
    disagreement: pd.DataFrame
    summary: pd.DataFrame
    failures: pd.DataFrame
    timing: pd.DataFrame
    states: Optional[pd.DataFrame] = None
    anomalies: int = 0

    @property
    def ok(self) -> bool:
        return len(self.failures) == 0


def aggregate(config: ScenarioConfig, records: List[RunRecord]) -> MetricsReport:
    """Ordered reduction over runs by run index."""
    records = sorted(records, key=lambda r: r.run)
    groups = component_groups(config)
    ok = [r for r in records if r.failure is None]
    failures = pd.DataFrame([r.failure for r in records if r.failure is not None], columns=["run", "step", "node", "reason"])
    timing = pd.DataFrame({"run": [r.run for r in records], "seconds": [r.seconds for r in records]})

    steps, N = config.steps, config.node_count
    if ok:
        estimates = np.stack([r.estimates for r in ok])
        truth = np.stack([r.truth for r in ok])
        rmse = np.stack(
            [
                np.stack([rmse_series(estimates[:, :, n][..., idx], truth[..., idx]) for idx in groups.values()], axis=-1)
                for n in range(N)
            ],
            axis=1,
        )
        disagreement = np.mean([r.disagreement for r in ok], axis=0)
    else:
        rmse = np.full((steps, N, len(groups)), np.nan)
        disagreement = np.full((steps, len(groups)), np.nan)

    step_index = np.arange(1, steps + 1)
    rmse_df = pd.concat(
        [
            pd.DataFrame({"step": step_index, "node": n + 1, "component_group": g, "rmse": rmse[:, n, i]})
            for n in range(N)
            for i, g in enumerate(groups)
        ],
        ignore_index=True,
    )
    disagreement_df = pd.concat(
        [pd.DataFrame({"step": step_index, "component_group": g, "disagreement": disagreement[:, i]}) for i, g in enumerate(groups)],
        ignore_index=True,
    )

    summary = []
    for n in range(N):
        for i, g in enumerate(groups):
            summary.append(
                {
                    "algorithm": config.algorithm,
                    "kappa": config.kappa,
                    "xi": config.xi,
                    "node": n + 1,
                    "component_group": g,
                    "steady_rmse_mean": steady_rmse(rmse[:, n, i], config.burn_in),
                    "steady_rmse_median": steady_median(rmse[:, n, i], config.burn_in),
                    "steady_disagreement": steady_rmse(disagreement[:, i], config.burn_in),
                    "runs": len(ok),
                    "steps": steps,
                    "seed": config.seed,
                }
            )

    states = next((r.states for r in records if r.states is not None), None)
    return MetricsReport(
        rmse=rmse_df,
        disagreement=disagreement_df,
        summary=pd.DataFrame(summary),
        failures=failures,
        timing=timing,
        states=states,
        anomalies=sum(r.anomalies for r in ok),
    )


def run_monte_carlo(
    config: ScenarioConfig,
    calibration: Optional[Calibration] = None,
    num_workers: Optional[int] = None,
) -> MetricsReport:
    scenario = build_scenario(config, calibration)
    num_workers = num_workers_from_env() if num_workers is None else num_workers
    L = [model.bank.L if model.bank is not None else 1 for model in scenario.models]
    logger.info(
        f"{config.algorithm} kappa={config.kappa} xi={config.xi} runs={config.runs} steps={config.steps} "
        f"sub-models per node={L} workers={num_workers}"
    )

    desc = f"{config.algorithm} kappa={config.kappa} xi={config.xi}"
    if num_workers <= 1:
        records = [run_single(scenario, run) for run in tqdm(range(config.runs), desc=desc)]
    else:
        with mp.Pool(num_workers, initializer=_init_worker, initargs=(scenario,)) as pool:
            jobs = [pool.apply_async(_run_worker, (run,)) for run in range(config.runs)]
            records = [job.get() for job in tqdm(jobs, desc=desc)]

    report = aggregate(config, records)
    if not report.ok:
        logger.warning(f"{len(report.failures)} of {config.runs} runs failed")
    if report.anomalies:
        logger.info(f"anomaly branch taken {report.anomalies} times")
    return report
