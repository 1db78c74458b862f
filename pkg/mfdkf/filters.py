# %%
import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from .errors import FilterDivergence, NumericalError
from .fusion_model import FusedObservation, SubModelBank

logger = logging.getLogger(__name__)

ANOMALY_THRESHOLD = 1e-300
ANOMALY_MODES = ("corrective", "prior")
LOG_2PI = np.log(2.0 * np.pi)


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


# %%
@dataclass(frozen=True)
class LinearSystem:
    """x(k) = A x(k-1) + G w(k-1), w ~ N(0, Q); z_n(k) = H x(k) + v_n(k). G defaults to identity."""

    A: np.ndarray
    Q: np.ndarray
    H: np.ndarray
    G: Optional[np.ndarray] = None
    Q_eff: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        p = A.shape[0]
        if A.shape != (p, p):
            raise ValueError(f"A must be square, got {A.shape}")
        if H.shape[1] != p:
            raise ValueError(f"H has {H.shape[1]} columns, state dimension is {p}")
        if self.G is None:
            G = None
            if Q.shape != (p, p):
                raise ValueError(f"Q must be {p}x{p}, got {Q.shape}")
            Q_eff = Q
        else:
            G = np.atleast_2d(np.asarray(self.G, dtype=float))
            if G.shape[0] != p or G.shape[1] != Q.shape[0] or Q.shape[0] != Q.shape[1]:
                raise ValueError(f"G {G.shape} and Q {Q.shape} do not map into a {p}-dim state")
            Q_eff = G @ Q @ G.T
        if not np.allclose(Q, Q.T) or np.linalg.eigvalsh(_sym(Q)).min() < -1e-12:
            raise ValueError("Q must be symmetric positive semi-definite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "Q_eff", _sym(Q_eff))

    @property
    def p(self) -> int:
        return self.A.shape[0]

    @property
    def q(self) -> int:
        return self.H.shape[0]


@dataclass(frozen=True)
class InitialCondition:
    x0: np.ndarray
    x_hat0: np.ndarray
    M0: np.ndarray


@dataclass(frozen=True)
class KfState:
    x: np.ndarray
    M: np.ndarray


@dataclass(frozen=True)
class NodeFilterState:
    """Sub-filter bank of one node. Sub-filter quantities are stacked along the first axis."""

    x: np.ndarray
    M: np.ndarray
    chi: np.ndarray
    estimate: np.ndarray
    covariance: np.ndarray
    anomaly: bool = False
    P: Optional[np.ndarray] = None
    S: Optional[np.ndarray] = None
    K: Optional[np.ndarray] = None
    U: Optional[np.ndarray] = None

    @property
    def L(self) -> int:
        return len(self.chi)

    def recentered(self, estimate: np.ndarray) -> "NodeFilterState":
        """Move the fused estimate to `estimate`, shifting every sub-filter by the same correction."""
        return replace(self, x=self.x + (estimate - self.estimate), estimate=np.array(estimate, dtype=float))


class KfUpdate(NamedTuple):
    x: np.ndarray
    M: np.ndarray
    K: np.ndarray
    S: np.ndarray
    U: np.ndarray


class ProbabilityUpdate(NamedTuple):
    chi: np.ndarray
    anomaly: bool


# %%
def kf_predict(sys: LinearSystem, x_prev: np.ndarray, M_prev: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    x_prev = np.asarray(x_prev, dtype=float)
    M_prev = np.asarray(M_prev, dtype=float)
    if x_prev.shape[-1] != sys.p or M_prev.shape[-2:] != (sys.p, sys.p):
        raise ValueError(f"state {x_prev.shape} / covariance {M_prev.shape} do not match p={sys.p}")
    x_bar = x_prev @ sys.A.T
    P = _sym(sys.A @ M_prev @ sys.A.T + sys.Q_eff)
    return x_bar, P


def _gain(S: np.ndarray, PCt: np.ndarray) -> np.ndarray:
    return np.swapaxes(np.linalg.solve(S, np.swapaxes(PCt, -1, -2)), -1, -2)


def kf_update(x_bar: np.ndarray, P: np.ndarray, C: np.ndarray, B: np.ndarray, Y: np.ndarray) -> KfUpdate:
    """Kalman measurement update in Joseph form, broadcast over any leading batch axes of x_bar, P and B."""
    C = np.atleast_2d(C)
    Y = np.atleast_1d(Y)
    p, D = C.shape[1], C.shape[0]
    batch = np.broadcast_shapes(np.shape(x_bar)[:-1], np.shape(P)[:-2], np.shape(B)[:-2])
    x_bar = np.broadcast_to(x_bar, batch + (p,))
    P = np.broadcast_to(P, batch + (p, p))
    B = np.broadcast_to(B, batch + (D, D))

    U = Y - x_bar @ C.T
    PCt = P @ C.T
    S = _sym(C @ PCt + B)
    try:
        K = _gain(S, PCt)
    except np.linalg.LinAlgError:
        ridge = 1e-9 * np.maximum(np.trace(S, axis1=-2, axis2=-1) / D, np.finfo(float).tiny)
        S = S + ridge[..., None, None] * np.eye(D)
        logger.warning(f"singular innovation covariance, retrying with ridge {np.max(ridge):.3g}")
        try:
            K = _gain(S, PCt)
        except np.linalg.LinAlgError:
            raise NumericalError("innovation covariance is singular after ridge retry")

    x = x_bar + np.einsum("...ij,...j->...i", K, U)
    IKC = np.eye(p) - K @ C
    M = _sym(IKC @ P @ np.swapaxes(IKC, -1, -2) + K @ B @ np.swapaxes(K, -1, -2))
    return KfUpdate(x=x, M=M, K=K, S=S, U=U)


def cdkf_step(sys: LinearSystem, fused: FusedObservation, state: KfState) -> KfState:
    """One predict/update cycle against the static nominal covariance fused.B."""
    x_bar, P = kf_predict(sys, state.x[None], state.M[None])
    upd = kf_update(x_bar, P, fused.C, fused.B[None], fused.Y)
    if not np.all(np.isfinite(upd.x[0])):
        raise FilterDivergence("non-finite CDKF estimate")
    return KfState(x=upd.x[0], M=upd.M[0])


# %%
def imm_mix(chi_prev: np.ndarray, transition: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Mixing probabilities mix[i, j] = P[i, j] chi[i] / cbar[j] and normalizers cbar."""
    cbar = chi_prev @ transition
    if np.any(cbar <= 0):
        raise NumericalError(f"degenerate mixing: normalizer {cbar.min():.3g}")
    mix = transition * chi_prev[:, None] / cbar[None, :]
    return mix, cbar


def imm_mixed_moments(x: np.ndarray, M: np.ndarray, mix: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    x_pre = mix.T @ x
    spread = x[:, None, :] - x_pre[None, :, :]
    M_pre = np.einsum("ij,ikl->jkl", mix, M) + np.einsum("ij,ijk,ijl->jkl", mix, spread, spread)
    return x_pre, _sym(M_pre)


def _moment_match(chi: np.ndarray, x: np.ndarray, M: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = chi @ x
    spread = x - mean
    cov = np.einsum("i,ikl->kl", chi, M) + np.einsum("i,ik,il->kl", chi, spread, spread)
    return mean, _sym(cov)


def submodel_log_likelihood(U: np.ndarray, S: np.ndarray, log_cbar: np.ndarray) -> np.ndarray:
    U = np.atleast_1d(U)
    S = np.atleast_2d(S) if np.ndim(S) < 2 else S
    D = U.shape[-1]
    sign, logdet = np.linalg.slogdet(S)
    maha = np.einsum("...i,...i->...", U, np.linalg.solve(S, U[..., None])[..., 0])
    log_lik = log_cbar - 0.5 * (D * LOG_2PI + logdet + maha)
    return np.where((sign > 0) & np.isfinite(log_lik), log_lik, -np.inf)


def submodel_likelihood(U: np.ndarray, S: np.ndarray, cbar: float) -> np.ndarray:
    """Gaussian density of the innovation scaled by the mixing normalizer; non-finite results read as 0."""
    with np.errstate(divide="ignore"):
        log_cbar = np.log(cbar)
    return np.exp(submodel_log_likelihood(U, S, log_cbar))


def update_model_probabilities(log_lik: np.ndarray, threshold: float = ANOMALY_THRESHOLD) -> ProbabilityUpdate:
    """Normalize likelihoods into model probabilities; flag an anomaly when they have all underflowed."""
    log_lik = np.where(np.isnan(log_lik), -np.inf, log_lik)
    total = logsumexp(log_lik)
    if not np.isfinite(total) or total <= np.log(threshold):
        return ProbabilityUpdate(chi=None, anomaly=True)
    chi = np.exp(log_lik - total)
    return ProbabilityUpdate(chi=chi / chi.sum(), anomaly=False)


def fuse_estimates(x: np.ndarray, chi: np.ndarray) -> np.ndarray:
    return chi @ x


def fused_covariance(x: np.ndarray, M: np.ndarray, chi: np.ndarray) -> np.ndarray:
    return _moment_match(chi, x, M)[1]


# %%
def init_node_state(bank: SubModelBank, init: InitialCondition) -> NodeFilterState:
    L = bank.L
    x_hat0 = np.asarray(init.x_hat0, dtype=float)
    M0 = np.asarray(init.M0, dtype=float)
    return NodeFilterState(
        x=np.tile(x_hat0, (L, 1)),
        M=np.tile(M0, (L, 1, 1)),
        chi=bank.priors.copy(),
        estimate=x_hat0.copy(),
        covariance=M0.copy(),
    )


def mfdkf_step(
    sys: LinearSystem,
    bank: SubModelBank,
    fused: FusedObservation,
    state: NodeFilterState,
    anomaly_mode: str = "corrective",
    threshold: float = ANOMALY_THRESHOLD,
    generic_mixing: bool = False,
) -> NodeFilterState:
    if anomaly_mode not in ANOMALY_MODES:
        raise ValueError(f"unknown anomaly mode {anomaly_mode!r}, expected one of {ANOMALY_MODES}")
    L = bank.L

    ## interaction
    if L == 1:
        x_pre, M_pre = state.x, state.M
        cbar = np.ones(1)
    elif bank.identical_rows and not generic_mixing:
        ## every column of the mixing matrix equals chi, so all sub-models share one mixed moment
        x_mix, M_mix = _moment_match(state.chi, state.x, state.M)
        x_pre, M_pre = x_mix[None], M_mix[None]
        cbar = bank.priors
    else:
        mix, cbar = imm_mix(state.chi, bank.transition)
        x_pre, M_pre = imm_mixed_moments(state.x, state.M, mix)

    ## sub-filters
    x_bar, P = kf_predict(sys, x_pre, M_pre)
    upd = kf_update(x_bar, P, fused.C, bank.covariances, fused.Y)
    x, M, K, S, U = (np.array(a) for a in upd)

    ## model probabilities
    anomaly = False
    if L == 1:
        chi = np.ones(1)
    else:
        with np.errstate(divide="ignore"):
            log_cbar = np.log(cbar)
        chi, anomaly = update_model_probabilities(submodel_log_likelihood(U, S, log_cbar), threshold)
        if anomaly and anomaly_mode == "prior":
            chi = cbar / cbar.sum()
        elif anomaly:
            j = bank.largest_index
            B_nominal = bank.covariances[j]
            B_j = np.outer(U[j], U[j]) + 1e-6 * np.trace(B_nominal) * np.eye(len(U[j]))
            xb_j = x_bar[j] if len(x_bar) > 1 else x_bar[0]
            P_j = P[j] if len(P) > 1 else P[0]
            redo = kf_update(xb_j[None], P_j[None], fused.C, B_j[None], fused.Y)
            x[j], M[j], K[j], S[j], U[j] = (a[0] for a in redo)
            chi = np.zeros(L)
            chi[j] = 1.0

    estimate = fuse_estimates(x, chi)
    if not np.all(np.isfinite(estimate)):
        raise FilterDivergence("non-finite MFDKF estimate")
    return NodeFilterState(
        x=x,
        M=M,
        chi=chi,
        estimate=estimate,
        covariance=fused_covariance(x, M, chi),
        anomaly=anomaly,
        P=P,
        S=S,
        K=K,
        U=U,
    )
