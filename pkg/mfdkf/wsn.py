# %%
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import TopologyError

## 1-based edge list of the built-in 10-node network; node 10 is isolated
PAPER10_EDGES = [(1, 8), (2, 3), (3, 4), (4, 5), (4, 6), (5, 7), (6, 8), (7, 8), (7, 9)]


# %%
def validate(adjacency: Union["Topology", np.ndarray]) -> List[str]:
    """Return every violation of the undirected, binary, self-looped adjacency contract. Empty means ok."""
    if isinstance(adjacency, Topology):
        adjacency = adjacency.adjacency
    a = np.asarray(adjacency)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        return [f"adjacency must be square, got shape {a.shape}"]
    if a.shape[0] == 0:
        return ["network has no nodes"]

    violations = []
    for m, n in zip(*np.nonzero((a != 0) & (a != 1))):
        violations.append(f"a_mn = {a[m, n]} is not binary at ({m + 1},{n + 1})")
    for m, n in zip(*np.nonzero(a != a.T)):
        if m < n:
            violations.append(f"a_mn ≠ a_nm at ({m + 1},{n + 1})")
    for n in np.nonzero(np.diag(a) != 1)[0]:
        violations.append(f"missing self-edge at {n + 1}")
    return violations


@dataclass(frozen=True)
class Topology:
    adjacency: np.ndarray

    def __post_init__(self):
        adjacency = np.array(self.adjacency, dtype=int)
        violations = validate(adjacency)
        if violations:
            raise TopologyError(violations)
        adjacency.setflags(write=False)
        object.__setattr__(self, "adjacency", adjacency)

    @property
    def node_count(self) -> int:
        return self.adjacency.shape[0]

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    @classmethod
    def from_edges(cls, node_count: int, edges: Iterable[Sequence[int]]) -> "Topology":
        """Build from 1-based undirected edge pairs; self-edges are added for every node."""
        if node_count < 1:
            raise TopologyError([f"node_count must be >= 1, got {node_count}"])
        adjacency = np.eye(node_count, dtype=int)
        violations = []
        for edge in edges:
            if len(edge) != 2:
                violations.append(f"edge {tuple(edge)} is not a pair")
                continue
            m, n = int(edge[0]), int(edge[1])
            if not (1 <= m <= node_count and 1 <= n <= node_count):
                violations.append(f"edge ({m},{n}) references a node outside 1..{node_count}")
                continue
            adjacency[m - 1, n - 1] = adjacency[n - 1, m - 1] = 1
        if violations:
            raise TopologyError(violations)
        return cls(adjacency)

    @classmethod
    def paper10(cls) -> "Topology":
        return cls.from_edges(10, PAPER10_EDGES)

    @classmethod
    def complete(cls, node_count: int) -> "Topology":
        return cls(np.ones((node_count, node_count), dtype=int))

    @classmethod
    def isolated(cls, node_count: int = 1) -> "Topology":
        return cls(np.eye(node_count, dtype=int))


# %%
def _check_node(topo: Topology, n: int):
    if not 0 <= n < topo.node_count:
        raise IndexError(f"node {n} out of range for a {topo.node_count}-node network")


def degree(topo: Topology, n: int) -> int:
    """Degree of 0-based node n, self-edge included."""
    _check_node(topo, n)
    return int(topo.adjacency[n].sum())


def neighbors(topo: Topology, n: int) -> List[int]:
    """Ascending 0-based ids adjacent to n, n itself included."""
    _check_node(topo, n)
    return np.nonzero(topo.adjacency[n])[0].tolist()


def edge_list(topo: Topology) -> List[Tuple[int, int]]:
    rows, cols = np.nonzero(np.triu(topo.adjacency, k=1))
    return [(int(m) + 1, int(n) + 1) for m, n in zip(rows, cols)]


def topology_summary(topo: Topology) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "node": np.arange(1, topo.node_count + 1),
            "degree": topo.degrees,
            "neighbors": [" ".join(str(m + 1) for m in neighbors(topo, n)) for n in range(topo.node_count)],
        }
    )
