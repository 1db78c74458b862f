# %%
import logging
import re
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple, Union

import fsspec
import numpy as np
import pandas as pd
import scipy.linalg
from scipy.special import logsumexp
from sklearn.cluster import KMeans

from .errors import CalibrationError, InputError, ParameterDomainError

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


# %%
@dataclass(frozen=True)
class GaussianSpec:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        covariance = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if covariance.shape != (len(mean), len(mean)):
            raise ParameterDomainError(f"covariance shape {covariance.shape} does not match mean of length {len(mean)}")
        if not np.allclose(covariance, covariance.T):
            raise ParameterDomainError("covariance must be symmetric")
        if np.linalg.eigvalsh(covariance).min() < -1e-12 * max(1.0, np.trace(covariance)):
            raise ParameterDomainError("covariance must be positive semi-definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", covariance)

    @property
    def dim(self) -> int:
        return len(self.mean)


@dataclass(frozen=True)
class MixedGaussianSpec:
    """lambda * N(mean, variance_1) + (1 - lambda) * N(mean, variance_2), drawn per dimension."""

    mixing: float
    mean: float
    variance_1: float
    variance_2: float

    def __post_init__(self):
        if not 0.0 <= self.mixing <= 1.0:
            raise ParameterDomainError(f"mixing must satisfy 0 <= lambda <= 1, got {self.mixing}")
        if self.variance_1 <= 0 or self.variance_2 <= 0:
            raise ParameterDomainError(f"variances must be > 0, got ({self.variance_1}, {self.variance_2})")

    @property
    def dim(self) -> int:
        return 1


@dataclass(frozen=True)
class AlphaStableSpec:
    char_exponent: float
    symmetry: float
    dispersion: float
    location: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.char_exponent <= 2.0:
            raise ParameterDomainError(f"char_exponent must satisfy 0 < a <= 2, got {self.char_exponent}")
        if not -1.0 <= self.symmetry <= 1.0:
            raise ParameterDomainError(f"symmetry must satisfy -1 <= b <= 1, got {self.symmetry}")
        if self.dispersion <= 0:
            raise ParameterDomainError(f"dispersion must be > 0, got {self.dispersion}")

    @property
    def dim(self) -> int:
        return 1


NoiseSpec = Union[GaussianSpec, MixedGaussianSpec, AlphaStableSpec]


@dataclass(frozen=True)
class EmConfig:
    max_iter: int = 500
    tol: float = 1e-8
    max_restarts: int = 5
    subsample: int = 10000
    floor_scale: float = 1e-12
    monotone_tol: float = 1e-9


@dataclass(frozen=True)
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    sample_count: int = 0
    n_iter: int = 0
    restarts: int = 0
    log_likelihood_history: Tuple[float, ...] = field(default=())

    def __post_init__(self):
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        means = np.asarray(self.means, dtype=float).reshape(len(weights), -1)
        q = means.shape[1]
        covariances = np.asarray(self.covariances, dtype=float).reshape(len(weights), q, q)
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ParameterDomainError(f"weights must be non-negative and sum to 1, got {weights}")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", covariances)
        object.__setattr__(self, "log_likelihood_history", tuple(self.log_likelihood_history))

    @property
    def kappa(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def traces(self) -> np.ndarray:
        return np.trace(self.covariances, axis1=1, axis2=2)

    def sorted_by_trace(self) -> "GmmModel":
        order = np.argsort(self.traces, kind="stable")
        return GmmModel(
            weights=self.weights[order],
            means=self.means[order],
            covariances=self.covariances[order],
            sample_count=self.sample_count,
            n_iter=self.n_iter,
            restarts=self.restarts,
            log_likelihood_history=self.log_likelihood_history,
        )


# %%
def describe(spec: NoiseSpec) -> str:
    if isinstance(spec, AlphaStableSpec):
        return f"alpha({spec.char_exponent:g},{spec.symmetry:g},{spec.dispersion:g},{spec.location:g})"
    if isinstance(spec, MixedGaussianSpec):
        return f"mixed({spec.mixing:g},{spec.mean:g},{spec.variance_1:g},{spec.variance_2:g})"
    if spec.dim == 1:
        return f"gaussian({spec.mean[0]:g},{spec.covariance[0, 0]:g})"
    return f"gaussian(mean={spec.mean.tolist()},covariance={spec.covariance.tolist()})"


def spec_to_dict(spec: NoiseSpec) -> Dict:
    if isinstance(spec, AlphaStableSpec):
        return {"family": "alpha_stable", **asdict(spec)}
    if isinstance(spec, MixedGaussianSpec):
        return {"family": "mixed_gaussian", **asdict(spec)}
    return {"family": "gaussian", "mean": spec.mean.tolist(), "covariance": spec.covariance.tolist()}


_SHORTHAND = re.compile(r"^\s*([A-Za-z_]+)\s*\(([^)]*)\)\s*$")
_FAMILIES = {
    "alpha": "alpha_stable",
    "alpha_stable": "alpha_stable",
    "s": "alpha_stable",
    "mixed": "mixed_gaussian",
    "mixed_gaussian": "mixed_gaussian",
    "m": "mixed_gaussian",
    "gaussian": "gaussian",
    "normal": "gaussian",
    "n": "gaussian",
}


def parse_noise_spec(value: Union[str, Dict]) -> NoiseSpec:
    """Build a NoiseSpec from the shorthand `alpha(1.2,0,2,0)` or a mapping with a `family` key."""
    if isinstance(value, str):
        match = _SHORTHAND.match(value)
        if match is None:
            raise ParameterDomainError(f"cannot parse noise spec {value!r}")
        family = _FAMILIES.get(match.group(1).lower())
        try:
            args = [float(x) for x in match.group(2).split(",") if x.strip()]
        except ValueError:
            raise ParameterDomainError(f"non-numeric parameter in noise spec {value!r}")
        expected = {"alpha_stable": 4, "mixed_gaussian": 4, "gaussian": 2}
        if family is None:
            raise ParameterDomainError(f"unknown noise family in {value!r}")
        if len(args) != expected[family]:
            raise ParameterDomainError(f"{family} takes {expected[family]} parameters, got {len(args)} in {value!r}")
        if family == "alpha_stable":
            return AlphaStableSpec(*args)
        if family == "mixed_gaussian":
            return MixedGaussianSpec(*args)
        return GaussianSpec(mean=[args[0]], covariance=[[args[1]]])

    value = dict(value)
    family = _FAMILIES.get(str(value.pop("family", "")).lower())
    try:
        if family == "alpha_stable":
            return AlphaStableSpec(**value)
        if family == "mixed_gaussian":
            return MixedGaussianSpec(**value)
        if family == "gaussian":
            return GaussianSpec(**value)
    except TypeError as e:
        raise ParameterDomainError(f"bad {family} parameters: {e}")
    raise ParameterDomainError(f"unknown noise family in {value!r}")


# %%
def _chambers_mallows_stuck(a: float, b: float, shape, rng: np.random.Generator) -> np.ndarray:
    ## standard S(a, b, 1, 0) variates
    v = rng.uniform(-np.pi / 2, np.pi / 2, size=shape)
    w = rng.standard_exponential(size=shape)
    if a == 1.0:
        bv = np.pi / 2 + b * v
        return 2 / np.pi * (bv * np.tan(v) - b * np.log((np.pi / 2) * w * np.cos(v) / bv))
    tan_a = np.tan(np.pi * a / 2)
    shift = np.arctan(b * tan_a) / a
    scale = (1 + (b * tan_a) ** 2) ** (1 / (2 * a))
    return (
        scale
        * np.sin(a * (v + shift))
        / np.cos(v) ** (1 / a)
        * (np.cos(v - a * (v + shift)) / w) ** ((1 - a) / a)
    )


def sample(spec: NoiseSpec, rng: np.random.Generator, count: int, dim: Optional[int] = None) -> np.ndarray:
    """Draw `count` i.i.d. noise vectors, shape (count, dim).

    One-dimensional specs are applied independently to every dimension when dim > 1.
    """
    if count < 1:
        raise ParameterDomainError(f"count must be >= 1, got {count}")
    dim = spec.dim if dim is None else dim
    if spec.dim != 1 and spec.dim != dim:
        raise ParameterDomainError(f"noise spec has dimension {spec.dim}, requested {dim}")
    shape = (count, dim)

    if isinstance(spec, GaussianSpec):
        if spec.dim == 1:
            return spec.mean[0] + np.sqrt(spec.covariance[0, 0]) * rng.standard_normal(shape)
        return rng.multivariate_normal(spec.mean, spec.covariance, size=count)

    if isinstance(spec, MixedGaussianSpec):
        first = rng.random(shape) < spec.mixing
        std = np.where(first, np.sqrt(spec.variance_1), np.sqrt(spec.variance_2))
        return spec.mean + std * rng.standard_normal(shape)

    if isinstance(spec, AlphaStableSpec):
        a, b = spec.char_exponent, spec.symmetry
        c = spec.dispersion ** (1 / a)
        x = c * _chambers_mallows_stuck(a, b, shape, rng) + spec.location
        if a == 1.0:
            x += 2 / np.pi * b * c * np.log(c)
        return x

    raise ParameterDomainError(f"unknown noise spec {spec!r}")


# %%
def _component_log_pdf(x: np.ndarray, means: np.ndarray, covariances: np.ndarray) -> np.ndarray:
    n, q = x.shape
    out = np.empty((n, len(means)))
    for i, (mean, cov) in enumerate(zip(means, covariances)):
        chol = np.linalg.cholesky(cov)
        z = scipy.linalg.solve_triangular(chol, (x - mean).T, lower=True)
        out[:, i] = -0.5 * np.sum(z**2, axis=0) - np.sum(np.log(np.diag(chol))) - 0.5 * q * LOG_2PI
    return out


class _Collapse(Exception):
    pass


def _run_em(x, init_weights, init_means, init_covs, floor, config):
    n, q = x.shape
    kappa = len(init_means)
    weights = np.array(init_weights, dtype=float)
    means = np.array(init_means, dtype=float)
    covs = np.array(init_covs, dtype=float)
    history = []

    for it in range(1, config.max_iter + 1):
        ## E-step
        try:
            log_prob = _component_log_pdf(x, means, covs) + np.log(weights)
        except np.linalg.LinAlgError:
            raise _Collapse("non positive-definite component covariance")
        log_norm = logsumexp(log_prob, axis=1)
        ll = float(np.sum(log_norm))
        if not np.isfinite(ll):
            raise _Collapse("non-finite log-likelihood")
        if history and ll < history[-1] - config.monotone_tol * abs(history[-1]):
            raise _Collapse(f"log-likelihood decreased at iteration {it}: {history[-1]:.10g} -> {ll:.10g}")
        history.append(ll)
        if len(history) > 1 and abs(ll - history[-2]) <= config.tol * abs(history[-2]):
            break
        if it == config.max_iter:
            logger.warning(f"EM stopped at max_iter={config.max_iter} without reaching tol={config.tol}")
            break

        ## M-step
        resp = np.exp(log_prob - log_norm[:, None])
        nk = resp.sum(axis=0)
        if np.any(nk < q + 1):
            raise _Collapse(f"component weight collapsed: {nk / n}")
        weights = nk / n
        weights /= weights.sum()
        means = resp.T @ x / nk[:, None]
        for i in range(kappa):
            diff = x - means[i]
            cov = (resp[:, i, None] * diff).T @ diff / nk[i]
            cov = 0.5 * (cov + cov.T)
            if np.trace(cov) < q * floor:
                raise _Collapse(f"component {i} covariance trace {np.trace(cov):.3g} below floor")
            eigval, eigvec = np.linalg.eigh(cov)
            if eigval.min() < floor:
                cov = (eigvec * np.maximum(eigval, floor)) @ eigvec.T
            covs[i] = cov

    return weights, means, covs, history


def _scale_seeding(x, kappa, sample_cov, random_state):
    """Initial components from k-means++ / k-means on log radial distance to the median.

    Every component starts at the median with the sample covariance rescaled to
    the spread of its scale cluster, so a single extreme sample never owns a
    component.
    """
    q = x.shape[1]
    center = np.median(x, axis=0)
    radius2 = np.sum((x - center) ** 2, axis=1) / q
    level = 1e-6 * np.trace(sample_cov) / q
    features = 0.5 * np.log(radius2 + level)
    labels = KMeans(n_clusters=kappa, n_init=1, random_state=random_state).fit_predict(features[:, None])

    weights = np.bincount(labels, minlength=kappa).astype(float)
    scales = np.array([radius2[labels == i].mean() if weights[i] > 0 else level for i in range(kappa)])
    weights = np.maximum(weights, 1.0)
    weights /= weights.sum()
    shape = sample_cov / (np.trace(sample_cov) / q) + 1e-6 * np.eye(q)
    covs = np.maximum(scales, level)[:, None, None] * shape
    return weights, np.tile(center, (kappa, 1)), covs


def em_fit_gmm(
    samples: np.ndarray,
    kappa: int,
    config: Optional[EmConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> GmmModel:
    """Fit a kappa-component Gaussian mixture by EM.

    Components come back sorted by ascending covariance trace. The log-likelihood
    must not decrease between iterations; an attempt that does, or whose
    component collapses, is restarted from a fresh scale seeding.
    """
    config = EmConfig() if config is None else config
    rng = np.random.default_rng() if rng is None else rng

    x = np.asarray(samples, dtype=float)
    if x.size == 0:
        raise InputError("empty sample set")
    if x.ndim == 1:
        x = x[:, None]
    n, q = x.shape
    if kappa < 1:
        raise InputError(f"kappa must be >= 1, got {kappa}")
    if n < 10 * kappa:
        raise InputError(f"need at least {10 * kappa} samples for kappa={kappa}, got {n}")
    if not np.all(np.isfinite(x)):
        raise InputError("samples contain non-finite values")

    sample_mean = x.mean(axis=0)
    centered = x - sample_mean
    sample_cov = centered.T @ centered / n
    sample_cov = 0.5 * (sample_cov + sample_cov.T)
    if np.trace(sample_cov) <= 0:
        raise InputError("samples have zero spread")

    if kappa == 1:
        ll = float(np.sum(_component_log_pdf(x, sample_mean[None], sample_cov[None])))
        return GmmModel(
            weights=np.ones(1),
            means=sample_mean[None],
            covariances=sample_cov[None],
            sample_count=n,
            n_iter=1,
            log_likelihood_history=(ll,),
        )

    floor = config.floor_scale * np.trace(sample_cov)
    for attempt in range(config.max_restarts + 1):
        index = rng.choice(n, size=min(n, config.subsample), replace=False)
        seed = _scale_seeding(x[index], kappa, sample_cov, int(rng.integers(2**31 - 1)))
        try:
            weights, means, covs, history = _run_em(x, *seed, floor, config)
        except _Collapse as e:
            logger.warning(f"EM attempt {attempt + 1}/{config.max_restarts + 1} (kappa={kappa}) failed: {e}")
            continue
        model = GmmModel(
            weights=weights,
            means=means,
            covariances=covs,
            sample_count=n,
            n_iter=len(history),
            restarts=attempt,
            log_likelihood_history=tuple(history),
        )
        return model.sorted_by_trace()

    raise CalibrationError(f"EM failed for kappa={kappa} after {config.max_restarts + 1} attempts")


def overall_covariance(model: GmmModel) -> np.ndarray:
    """Covariance of the whole mixture: sum_i w_i (R_i + (mu_i - mu)(mu_i - mu)^T)."""
    mean = model.weights @ model.means
    spread = model.means - mean
    cov = np.einsum("i,ijk->jk", model.weights, model.covariances) + np.einsum(
        "i,ij,ik->jk", model.weights, spread, spread
    )
    return 0.5 * (cov + cov.T)


# %%
def save_samples_csv(samples: np.ndarray, path: str):
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    df = pd.DataFrame(samples, columns=[f"v{i}" for i in range(samples.shape[1])])
    with fsspec.open(path, "w") as fp:
        df.to_csv(fp, index=False, float_format="%.17g")


def load_samples_csv(path: str) -> np.ndarray:
    with fsspec.open(path, "r") as fp:
        df = pd.read_csv(fp)
    if len(df) == 0:
        raise InputError(f"{path} holds no samples")
    return df.to_numpy(dtype=float)
