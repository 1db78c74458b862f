# %%
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataAvailabilityError
from .filters import LinearSystem, NodeFilterState, mfdkf_step
from .fusion_model import FusedModel, SubModelBank
from .wsn import Topology, degree, neighbors


# %%
@dataclass(frozen=True)
class ConsensusConfig:
    xi: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.xi < 1.0:
            raise ConfigError("xi", f"xi must satisfy 0 ≤ ξ < 1, got {self.xi}")

    def gain(self, d: int) -> float:
        return self.xi / d


@dataclass(frozen=True)
class NodeModel:
    fused: FusedModel
    bank: Optional[SubModelBank]


def propagate(sys: LinearSystem, estimates: np.ndarray) -> np.ndarray:
    """phi_n(k) = A x_n(k-1) for every node, shape (N, p)."""
    return np.asarray(estimates, dtype=float) @ sys.A.T


def consensus_correction(x_hat: np.ndarray, phi_self: np.ndarray, phi_neighbors: Sequence[np.ndarray], eta: float) -> np.ndarray:
    if len(phi_neighbors) == 0:
        return np.array(x_hat, dtype=float)
    return x_hat + eta * np.sum(np.asarray(phi_neighbors) - phi_self, axis=0)


def consensus_fuse(x_hat: np.ndarray, phi: np.ndarray, topo: Topology, n: int, config: ConsensusConfig) -> np.ndarray:
    if config.xi == 0.0:
        return np.array(x_hat, dtype=float)
    others = [m for m in neighbors(topo, n) if m != n]
    for m in others + [n]:
        if m >= len(phi) or not np.all(np.isfinite(phi[m])):
            raise DataAvailabilityError(f"propagated estimate of node {m + 1} is not available")
    return consensus_correction(x_hat, phi[n], [phi[m] for m in others], config.gain(degree(topo, n)))


# %%
def _consensus_network_step(
    sys: LinearSystem,
    states: List[NodeFilterState],
    z: np.ndarray,
    models: List[NodeModel],
    topo: Topology,
    config: ConsensusConfig,
    **kwargs,
) -> List[NodeFilterState]:
    ## all local steps read the previous snapshot before any node is corrected
    phi = propagate(sys, np.stack([s.estimate for s in states]))
    local = [mfdkf_step(sys, model.bank, model.fused.observe(z), state, **kwargs) for model, state in zip(models, states)]
    if config.xi == 0.0:
        return local
    return [s.recentered(consensus_fuse(s.estimate, phi, topo, n, config)) for n, s in enumerate(local)]


def c_mfdkf_step(
    sys: LinearSystem,
    states: List[NodeFilterState],
    z: np.ndarray,
    models: List[NodeModel],
    topo: Topology,
    config: ConsensusConfig,
    **kwargs,
) -> List[NodeFilterState]:
    """MFDKF over each node's fused neighbourhood observation, then one consensus correction."""
    return _consensus_network_step(sys, states, z, models, topo, config, **kwargs)


def s_mfdkf_step(
    sys: LinearSystem,
    states: List[NodeFilterState],
    z: np.ndarray,
    local_models: List[NodeModel],
    topo: Topology,
    config: ConsensusConfig,
    **kwargs,
) -> List[NodeFilterState]:
    """MFDKF on each node's own observation only (kappa sub-models), then one consensus correction."""
    for n, model in enumerate(local_models):
        if model.fused.neighbors != [n]:
            raise ValueError(f"S-MFDKF node {n + 1} must observe only itself, got {model.fused.neighbors}")
    return _consensus_network_step(sys, states, z, local_models, topo, config, **kwargs)
