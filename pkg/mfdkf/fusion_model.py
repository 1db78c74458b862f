# %%
import itertools
from dataclasses import dataclass
from typing import List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
import scipy.linalg

from .errors import ConfigError, DataAvailabilityError
from .noise import GmmModel
from .wsn import Topology, neighbors


# %%
@dataclass(frozen=True)
class FusedObservation:
    Y: np.ndarray
    C: np.ndarray
    B: np.ndarray


@dataclass(frozen=True)
class FusedModel:
    """Time-invariant part of a node's fused observation: who is stacked, with which C and nominal B."""

    node: int
    neighbors: List[int]
    C: np.ndarray
    B: np.ndarray

    def observe(self, z: np.ndarray) -> FusedObservation:
        return FusedObservation(Y=stack_observations(z, self.neighbors), C=self.C, B=self.B)


def stack_observations(z: Union[np.ndarray, Mapping[int, np.ndarray]], nodes: Sequence[int]) -> np.ndarray:
    """Concatenate per-node observations in the given node order. Missing or NaN entries are unavailable."""
    blocks = []
    for m in nodes:
        try:
            y = z[m]
        except (KeyError, IndexError):
            y = None
        if y is None or np.any(np.isnan(y)):
            raise DataAvailabilityError(f"observation of node {m + 1} is not available")
        blocks.append(np.atleast_1d(np.asarray(y, dtype=float)))
    return np.concatenate(blocks)


def build_fused_model(topo: Topology, n: int, per_node_H: Sequence[np.ndarray], per_node_R: Sequence[np.ndarray]) -> FusedModel:
    nbrs = neighbors(topo, n)
    C = np.vstack([np.atleast_2d(per_node_H[m]) for m in nbrs])
    B = scipy.linalg.block_diag(*[np.atleast_2d(per_node_R[m]) for m in nbrs])
    return FusedModel(node=n, neighbors=nbrs, C=C, B=B)


def build_fused_observation(
    topo: Topology,
    n: int,
    per_node_observations: Union[np.ndarray, Mapping[int, np.ndarray]],
    per_node_H: Sequence[np.ndarray],
    per_node_R: Sequence[np.ndarray],
) -> FusedObservation:
    return build_fused_model(topo, n, per_node_H, per_node_R).observe(per_node_observations)


# %%
@dataclass(frozen=True)
class SubModelBank:
    kappa: int
    block_dim: int
    priors: np.ndarray
    covariances: np.ndarray
    combos: np.ndarray
    transition: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.transition is None:
            object.__setattr__(self, "transition", transition_matrix(self))

    @property
    def L(self) -> int:
        return len(self.priors)

    @property
    def degree(self) -> int:
        return self.combos.shape[1]

    @property
    def traces(self) -> np.ndarray:
        return np.trace(self.covariances, axis1=1, axis2=2)

    @property
    def largest_index(self) -> int:
        ## ties resolve to the highest index, the all-largest combination
        traces = self.traces
        return int(self.L - 1 - np.argmax(traces[::-1]))

    @property
    def identical_rows(self) -> bool:
        return bool(np.all(self.transition == self.transition[0]))


def enumerate_submodels(gmms: Sequence[GmmModel], kappa: int) -> SubModelBank:
    """All kappa^d component assignments over the neighbours, first neighbour as the most significant digit."""
    for t, gmm in enumerate(gmms):
        if gmm.kappa != kappa:
            raise ConfigError("kappa", f"neighbor {t} has a {gmm.kappa}-component mixture, expected {kappa}")
    q = gmms[0].dim
    d = len(gmms)
    combos = np.array(list(itertools.product(range(kappa), repeat=d)), dtype=int).reshape(-1, d)

    priors = np.ones(len(combos))
    covariances = np.zeros((len(combos), d * q, d * q))
    for t, gmm in enumerate(gmms):
        priors *= gmm.weights[combos[:, t]]
        covariances[:, t * q : (t + 1) * q, t * q : (t + 1) * q] = gmm.covariances[combos[:, t]]

    return SubModelBank(kappa=kappa, block_dim=q, priors=priors, covariances=covariances, combos=combos)


def transition_matrix(bank: SubModelBank) -> np.ndarray:
    return np.tile(bank.priors, (len(bank.priors), 1))


def bank_summary(bank: SubModelBank, node: int) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "node": node + 1,
            "L": bank.L,
            "submodel": np.arange(bank.L),
            "combo": ["".join(str(c) for c in combo) for combo in bank.combos],
            "prior": bank.priors,
            "trace": bank.traces,
        }
    )
