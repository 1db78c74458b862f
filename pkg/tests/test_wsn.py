import numpy as np
import pytest

from mfdkf.errors import TopologyError
from mfdkf.wsn import Topology, degree, edge_list, neighbors, topology_summary, validate


def test_paper10_degrees():
    topo = Topology.paper10()
    assert topo.node_count == 10
    np.testing.assert_array_equal(topo.degrees, [2, 2, 3, 4, 3, 3, 4, 4, 2, 1])
    assert [degree(topo, n) for n in range(10)] == topo.degrees.tolist()


def test_paper10_neighbors():
    topo = Topology.paper10()
    assert neighbors(topo, 3) == [2, 3, 4, 5]
    assert neighbors(topo, 9) == [9]
    for n in range(topo.node_count):
        assert n in neighbors(topo, n)
        assert len(neighbors(topo, n)) == degree(topo, n)


def test_three_node_line():
    topo = Topology(np.array([[1, 1, 0], [1, 1, 1], [0, 1, 1]]))
    assert topo.degrees.tolist() == [2, 3, 2]
    assert neighbors(topo, 1) == [0, 1, 2]
    assert edge_list(topo) == [(1, 2), (2, 3)]


def test_single_node():
    topo = Topology.isolated()
    assert degree(topo, 0) == 1
    assert neighbors(topo, 0) == [0]


def test_asymmetric_adjacency():
    a = np.array([[1, 1, 0], [0, 1, 0], [0, 0, 1]])
    assert validate(a) == ["a_mn ≠ a_nm at (1,2)"]
    with pytest.raises(TopologyError) as e:
        Topology(a)
    assert e.value.violations == ["a_mn ≠ a_nm at (1,2)"]


def test_missing_self_edge():
    a = np.array([[1, 1], [1, 0]])
    assert validate(a) == ["missing self-edge at 2"]


def test_non_binary_and_non_square():
    assert len(validate(np.array([[1, 2], [2, 1]]))) == 2
    assert validate(np.ones((2, 3))) == ["adjacency must be square, got shape (2, 3)"]


def test_from_edges_rejects_unknown_nodes():
    with pytest.raises(TopologyError):
        Topology.from_edges(3, [(1, 4)])


def test_out_of_range_node():
    topo = Topology.complete(3)
    with pytest.raises(IndexError):
        degree(topo, 3)
    with pytest.raises(IndexError):
        neighbors(topo, -1)


def test_edge_list_round_trip():
    topo = Topology.paper10()
    np.testing.assert_array_equal(Topology.from_edges(10, edge_list(topo)).adjacency, topo.adjacency)


def test_topology_summary():
    table = topology_summary(Topology.paper10())
    assert table["degree"].tolist() == [2, 2, 3, 4, 3, 3, 4, 4, 2, 1]
    assert table.loc[3, "neighbors"] == "3 4 5 6"
    assert table.loc[9, "neighbors"] == "10"
