import numpy as np
import pytest

from mfdkf.consensus import ConsensusConfig, NodeModel, c_mfdkf_step, s_mfdkf_step
from mfdkf.filters import KfState, cdkf_step, imm_mix, init_node_state
from mfdkf.fusion_model import build_fused_model, enumerate_submodels
from mfdkf.harness import cv_system, disagreement_series, rotating_system
from mfdkf.noise import AlphaStableSpec, GmmModel, MixedGaussianSpec, overall_covariance, sample
from mfdkf.wsn import Topology, degree


def random_case(seed):
    rng = np.random.default_rng(seed)
    N = int(rng.integers(1, 5))
    edges = [(m + 1, n + 1) for m in range(N) for n in range(m + 1, N) if rng.random() < 0.5]
    topo = Topology.from_edges(N, edges)
    system, init = rotating_system() if rng.random() < 0.7 else cv_system()
    kappa = int(rng.integers(1, 4))
    q = system.q
    gmms = []
    for _ in range(N):
        weights = rng.dirichlet(np.ones(kappa))
        scales = np.sort(rng.uniform(0.1, 1000.0, size=kappa))
        gmms.append(GmmModel(weights=weights, means=np.zeros((kappa, q)), covariances=scales[:, None, None] * np.eye(q)))
    if rng.random() < 0.5:
        spec = AlphaStableSpec(float(rng.uniform(1.1, 2.0)), 0.0, float(rng.uniform(0.5, 3.0)), 0.0)
    else:
        spec = MixedGaussianSpec(float(rng.uniform(0.7, 0.99)), 0.0, 1.0, float(rng.uniform(10.0, 1e4)))
    z = sample(spec, rng, 25 * N, dim=q).reshape(25, N, q)
    return rng, topo, system, init, gmms, z


def node_models(topo, system, gmms, local):
    fusion = Topology.isolated(topo.node_count) if local else topo
    R = [overall_covariance(g) for g in gmms]
    models = []
    for n in range(topo.node_count):
        fused = build_fused_model(fusion, n, [system.H] * topo.node_count, R)
        models.append(NodeModel(fused=fused, bank=enumerate_submodels([gmms[m] for m in fused.neighbors], gmms[0].kappa)))
    return models


@pytest.mark.parametrize("seed", range(100))
def test_random_networks_keep_invariants(seed):
    rng, topo, system, init, gmms, z = random_case(seed)
    local = bool(rng.random() < 0.5)
    xi = float(rng.uniform(0.0, 0.95))
    step = s_mfdkf_step if local else c_mfdkf_step
    models = node_models(topo, system, gmms, local)
    for n, model in enumerate(models):
        assert model.bank.L == gmms[0].kappa ** (1 if local else degree(topo, n))

    states = [init_node_state(m.bank, init) for m in models]
    estimates = []
    for zk in z:
        states = step(system, states, zk, models, topo, ConsensusConfig(xi))
        for s in states:
            assert abs(s.chi.sum() - 1.0) < 1e-10
            assert np.all(s.chi >= 0)
            assert np.all(np.isfinite(s.estimate))
            np.testing.assert_allclose(s.M, np.swapaxes(s.M, -1, -2), atol=1e-10 * max(1.0, np.abs(s.M).max()))
            for m in s.M:
                assert np.linalg.eigvalsh(m).min() >= -1e-10 * np.trace(m)
        estimates.append([s.estimate for s in states])
    assert np.all(np.isfinite(disagreement_series(np.array(estimates))))


@pytest.mark.parametrize("seed", range(20))
def test_random_networks_single_component_matches_baseline(seed):
    _, topo, system, init, gmms, z = random_case(seed)
    gmms = [GmmModel(weights=[1.0], means=g.means[:1], covariances=g.covariances[-1:]) for g in gmms]
    models = node_models(topo, system, gmms, local=False)
    states = [init_node_state(m.bank, init) for m in models]
    kf = [KfState(x=init.x_hat0, M=init.M0)] * topo.node_count
    for zk in z:
        states = c_mfdkf_step(system, states, zk, models, topo, ConsensusConfig(0.0))
        kf = [cdkf_step(system, m.fused.observe(zk), s) for m, s in zip(models, kf)]
        for s, k in zip(states, kf):
            np.testing.assert_allclose(s.estimate, k.x, rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("seed", range(100, 120))
def test_random_mixing_columns_equal_probabilities(seed):
    rng = np.random.default_rng(seed)
    _, topo, system, init, gmms, z = random_case(seed)
    bank = node_models(topo, system, gmms, local=False)[0].bank
    chi = rng.dirichlet(np.ones(bank.L))
    mix, cbar = imm_mix(chi, bank.transition)
    np.testing.assert_allclose(mix, np.tile(chi[:, None], (1, bank.L)), rtol=1e-12)
    np.testing.assert_allclose(cbar, bank.priors, rtol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_random_networks_are_deterministic(seed):
    runs = []
    for _ in range(2):
        rng, topo, system, init, gmms, z = random_case(seed)
        models = node_models(topo, system, gmms, local=False)
        states = [init_node_state(m.bank, init) for m in models]
        for zk in z:
            states = c_mfdkf_step(system, states, zk, models, topo, ConsensusConfig(0.5))
        runs.append(np.stack([s.estimate for s in states]))
    np.testing.assert_array_equal(runs[0], runs[1])
