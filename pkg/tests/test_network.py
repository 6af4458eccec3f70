"""Network model: generation, similarity estimation, offloading dynamics."""

import numpy as np
import pytest

from fedoff.network import (DeviceState, NetworkState, ScenarioConfig,
                            ScenarioError, InfeasiblePlanError,
                            apply_offload_step, estimate_similarity,
                            generate_scenario, load_scenario, save_scenario,
                            useful_coefficients)


def make_device(i, n, features, labels, count=None, theta=1e9, budget=1e9,
                cap=1e9, cost=0.0):
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=int)
    return DeviceState(
        id=i, proc_capacity=cap, proc_cost=cost, recv_buffer=theta,
        tx_budget=budget, tx_cost=np.full(n, 0.1),
        data_count=float(len(labels) if count is None else count),
        features=features, labels=labels)


def two_device_net(lam=None, adjacency=None):
    n = 2
    d0 = make_device(0, n, [[0.0, 0.0]], [0])
    d1 = make_device(1, n, [[1.0, 1.0]], [1])
    a = np.array([[0.0, 1.0], [1.0, 0.0]]) if adjacency is None else adjacency
    lam = np.zeros((n, n)) if lam is None else lam
    return NetworkState(devices=[d0, d1], adjacency=a, similarity=lam,
                        conn_similarity=lam * a)


class TestGenerateScenario:
    def test_paper_statistics(self):
        cfg = ScenarioConfig(n_devices=100, sample_budget=6, horizon=10,
                             agg_period=5, link_prob=0.1, labels_per_device=3,
                             data_mean=50.0, rng_seed=3)
        net = generate_scenario(cfg)
        assert net.n_devices == 100
        for dev in net.devices:
            assert len(set(dev.labels.tolist())) <= 3
            assert dev.data_count == dev.dataset_size
            assert dev.proc_cost * dev.data_count <= dev.proc_capacity + 1e-9
        counts = net.data_counts()
        assert abs(counts.mean() - 50.0) < 3.0
        # variance defaults to 0.2 * mean
        assert counts.std() < 3 * np.sqrt(0.2 * 50.0)
        density = net.adjacency.mean()
        assert abs(density - 0.1) < 0.03
        assert np.all(np.diag(net.adjacency) == 0)

    def test_empty_graph(self):
        cfg = ScenarioConfig(n_devices=10, sample_budget=2, horizon=5,
                             agg_period=1, link_prob=0.0, rng_seed=0)
        net = generate_scenario(cfg)
        assert np.all(net.adjacency == 0)
        assert np.all(net.conn_similarity == 0)

    def test_determinism(self, tmp_path):
        cfg = ScenarioConfig(n_devices=12, sample_budget=3, horizon=5,
                             agg_period=1, rng_seed=42)
        save_scenario(generate_scenario(cfg), tmp_path / "a.json")
        save_scenario(generate_scenario(cfg), tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_rejects_bad_config(self):
        with pytest.raises(ScenarioError):
            generate_scenario(ScenarioConfig(data_mean=0.0))
        with pytest.raises(ScenarioError):
            generate_scenario(ScenarioConfig(n_devices=4, sample_budget=5))

    def test_config_roundtrip(self, tmp_path):
        cfg = ScenarioConfig(n_devices=7, sample_budget=2, rng_seed=9,
                             recv_buffer_range=(1.0, 2.0))
        cfg.to_file(tmp_path / "cfg.json")
        assert ScenarioConfig.from_file(tmp_path / "cfg.json") == cfg


class TestEstimateSimilarity:
    def test_identical_datasets(self):
        feats = [[0.0, 1.0], [2.0, 3.0]]
        labels = [0, 1]
        n = 2
        net = NetworkState(
            devices=[make_device(0, n, feats, labels),
                     make_device(1, n, feats, labels)],
            adjacency=np.zeros((n, n)), similarity=np.zeros((n, n)),
            conn_similarity=np.zeros((n, n)))
        lam = estimate_similarity(net, probe_size=2, epsilon=1e-6)
        assert lam[0, 1] == 1.0 and lam[1, 0] == 1.0

    def test_disjoint_labels(self):
        n = 2
        net = NetworkState(
            devices=[make_device(0, n, [[0.0, 0.0]], [0]),
                     make_device(1, n, [[0.0, 0.0]], [1])],
            adjacency=np.zeros((n, n)), similarity=np.zeros((n, n)),
            conn_similarity=np.zeros((n, n)))
        lam = estimate_similarity(net, probe_size=1, epsilon=1e9)
        assert lam[0, 1] == 0.0 and lam[1, 0] == 0.0

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(5)
        n = 3
        devices = []
        for i in range(n):
            size = rng.integers(5, 50)
            labels = rng.integers(0, 3, size=size)
            feats = rng.normal(size=(size, 2))
            devices.append(make_device(i, n, feats, labels))
        net = NetworkState(devices=devices, adjacency=np.zeros((n, n)),
                           similarity=np.zeros((n, n)),
                           conn_similarity=np.zeros((n, n)))
        eps = 1.0
        lam = estimate_similarity(net, probe_size=50, epsilon=eps)

        # Oracle: exhaustive pairwise comparison over full datasets.
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                di, dj = net.devices[i], net.devices[j]
                hits = 0
                for a in range(di.dataset_size):
                    found = False
                    for b in range(dj.dataset_size):
                        if di.labels[a] == dj.labels[b] and \
                           np.linalg.norm(di.features[a] - dj.features[b]) <= eps:
                            found = True
                            break
                    hits += found
                assert lam[i, j] == pytest.approx(hits / di.dataset_size)

    def test_empty_dataset_rejected(self):
        n = 1
        dev = make_device(0, n, np.zeros((0, 2)), [])
        net = NetworkState(devices=[dev], adjacency=np.zeros((n, n)),
                           similarity=np.zeros((n, n)),
                           conn_similarity=np.zeros((n, n)))
        with pytest.raises(ScenarioError):
            estimate_similarity(net)


class TestApplyOffloadStep:
    def test_zero_plan_is_noop(self):
        net = two_device_net()
        nxt = apply_offload_step(net, np.zeros((2, 2)))
        assert nxt.time == net.time + 1
        assert np.array_equal(nxt.data_counts(), net.data_counts())
        assert np.array_equal(nxt.conn_similarity, net.conn_similarity)

    def test_full_transfer_saturates_edge(self):
        # Sender 0 with 30 points, receiver 1; Lambda starts at 0.
        n = 2
        d0 = make_device(0, n, np.zeros((30, 2)), np.zeros(30))
        d1 = make_device(1, n, np.ones((5, 2)), np.ones(5))
        a = np.array([[0.0, 1.0], [0.0, 0.0]])
        net = NetworkState(devices=[d0, d1], adjacency=a,
                           similarity=np.zeros((n, n)),
                           conn_similarity=np.zeros((n, n)))
        phi = np.array([[0.0, 1.0], [0.0, 0.0]])
        nxt = apply_offload_step(net, phi, np.random.default_rng(0))
        assert nxt.conn_similarity[0, 1] == 1.0
        assert nxt.data_counts()[1] == pytest.approx(5 + 30)
        assert nxt.devices[1].dataset_size == 35
        # Further offloading from 0 to 1 contributes nothing.
        nxt2 = apply_offload_step(nxt, phi, np.random.default_rng(1))
        assert nxt2.data_counts()[1] == pytest.approx(35)
        assert nxt2.devices[1].dataset_size == 35

    def test_hand_arithmetic_example(self):
        # Lambda=0.5, Phi=0.4, D_sender=100 -> received 20, Lambda'=0.7.
        n = 2
        d0 = make_device(0, n, np.zeros((100, 2)), np.zeros(100))
        d1 = make_device(1, n, np.ones((10, 2)), np.ones(10))
        a = np.array([[0.0, 1.0], [0.0, 0.0]])
        lam = np.array([[0.0, 0.5], [0.0, 0.0]])
        net = NetworkState(devices=[d0, d1], adjacency=a, similarity=lam,
                           conn_similarity=lam * a)
        phi = np.array([[0.0, 0.4], [0.0, 0.0]])
        nxt = apply_offload_step(net, phi, np.random.default_rng(0))
        assert nxt.data_counts()[1] == pytest.approx(10 + 20)
        assert nxt.conn_similarity[0, 1] == pytest.approx(0.7)
        assert nxt.devices[1].dataset_size == 30  # floor(0.4*100*0.5) kept

    def test_rejects_infeasible(self):
        net = two_device_net()
        with pytest.raises(InfeasiblePlanError):
            apply_offload_step(net, np.array([[0.0, 1.5], [0.0, 0.0]]))
        bad_edge = np.array([[0.5, 0.0], [0.0, 0.0]])  # diagonal is no edge
        with pytest.raises(InfeasiblePlanError):
            apply_offload_step(net, bad_edge)

    def test_receive_buffer_enforced(self):
        n = 2
        d0 = make_device(0, n, np.zeros((100, 2)), np.zeros(100))
        d1 = make_device(1, n, np.ones((5, 2)), np.ones(5), theta=10.0)
        a = np.array([[0.0, 1.0], [0.0, 0.0]])
        net = NetworkState(devices=[d0, d1], adjacency=a,
                           similarity=np.zeros((n, n)),
                           conn_similarity=np.zeros((n, n)))
        with pytest.raises(InfeasiblePlanError) as err:
            apply_offload_step(net, np.array([[0.0, 0.5], [0.0, 0.0]]))
        assert "(9)" in str(err.value)

    def test_determinism(self):
        cfg = ScenarioConfig(n_devices=8, sample_budget=2, horizon=5,
                             agg_period=1, link_prob=0.6, rng_seed=1)
        net = generate_scenario(cfg)
        phi = np.where(net.adjacency > 0, 0.05, 0.0)
        a = apply_offload_step(net, phi, np.random.default_rng(7))
        b = apply_offload_step(net, phi, np.random.default_rng(7))
        for da, db in zip(a.devices, b.devices):
            assert np.array_equal(da.features, db.features)
            assert da.data_count == db.data_count


class TestDynamicsProperties:
    def run_random_trajectory(self, seed, steps=6):
        from fedoff.baselines import random_offload_step
        from fedoff.sampling import SamplingDecision

        cfg = ScenarioConfig(n_devices=6, sample_budget=2, horizon=steps,
                             agg_period=1, link_prob=0.7, data_mean=20.0,
                             rng_seed=seed)
        net = generate_scenario(cfg)
        sampling = SamplingDecision.from_ids([0, 1, 2], 6)
        rng = np.random.default_rng(seed + 100)
        states = [net]
        for _ in range(steps):
            phi = random_offload_step(net, sampling, rng)
            net = apply_offload_step(net, phi, rng)
            states.append(net)
        return states

    @pytest.mark.parametrize("seed", range(5))
    def test_lambda_monotone_and_bounded(self, seed):
        states = self.run_random_trajectory(seed)
        for prev, cur in zip(states, states[1:]):
            assert np.all(cur.conn_similarity >= prev.conn_similarity - 1e-15)
            assert np.all(cur.conn_similarity <= 1.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_conservation(self, seed):
        states = self.run_random_trajectory(seed)
        for prev, cur in zip(states, states[1:]):
            # reconstruct received quantity from the prior state
            idx = states.index(cur)
            counts = prev.data_counts()
            assert np.all(cur.data_counts() >= counts - 1e-12)

    def test_dataset_tracks_effective_count(self):
        # |dataset| and the continuous count drift by < 1 per in-edge per step
        states = self.run_random_trajectory(3, steps=5)
        n = states[0].n_devices
        for t, state in enumerate(states):
            for i, dev in enumerate(state.devices):
                in_edges = int((state.adjacency[:, i] > 0).sum())
                slack = in_edges * max(t, 1)
                assert abs(dev.dataset_size - dev.data_count) <= slack + 1e-9


def test_scenario_snapshot_roundtrip(tmp_path):
    from fedoff.baselines import random_offload_step
    from fedoff.sampling import SamplingDecision

    cfg = ScenarioConfig(n_devices=5, sample_budget=2, horizon=4,
                         agg_period=2, link_prob=0.5, rng_seed=11)
    net = generate_scenario(cfg)
    rng = np.random.default_rng(0)
    phi = random_offload_step(net, SamplingDecision.from_ids([0, 1], 5), rng)
    net = apply_offload_step(net, phi, rng)
    save_scenario(net, tmp_path / "snap.json")
    back = load_scenario(tmp_path / "snap.json")
    assert back.time == net.time
    assert np.array_equal(back.adjacency, net.adjacency)
    assert np.allclose(back.conn_similarity, net.conn_similarity)
    for a, b in zip(net.devices, back.devices):
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)
        assert a.data_count == b.data_count
    save_scenario(back, tmp_path / "snap2.json")
    assert (tmp_path / "snap.json").read_bytes() == (tmp_path / "snap2.json").read_bytes()
