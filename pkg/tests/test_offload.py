"""Offloading optimizer: objective, feasibility, per-step solver, horizon."""

import numpy as np
import pytest

from fedoff.network import DeviceState, NetworkState, apply_offload_step, \
    useful_coefficients
from fedoff.offload import (ObjectiveModel, OffloadError, OffloadPlan,
                            SolverOptions, check_feasible,
                            initial_objective_model, objective, receive_room,
                            solve_horizon, solve_timestep,
                            update_gradient_estimate)
from fedoff.sampling import SamplingDecision


def make_device(i, n, count, *, theta=1e9, budget=1e9, cap=None, cost=1.0,
                tx_cost=0.5):
    count = int(count)
    return DeviceState(
        id=i, proc_capacity=cap if cap is not None else cost * count * 100,
        proc_cost=cost, recv_buffer=theta, tx_budget=budget,
        tx_cost=np.full(n, tx_cost), data_count=float(count),
        features=np.zeros((count, 2)), labels=np.zeros(count, dtype=int))


def three_node_instance(seed=0, lam_range=(0.0, 0.9)):
    """One unsampled sender (node 2) feeding two sampled receivers (0, 1)."""
    rng = np.random.default_rng(seed)
    n = 3
    devs = []
    for i in range(n):
        count = int(rng.integers(10, 60))
        cost = rng.uniform(0.5, 2.0)
        devs.append(make_device(
            i, n, count, theta=rng.uniform(5, 40), budget=rng.uniform(5, 40),
            cap=cost * count * rng.uniform(1.2, 3.0), cost=cost,
            tx_cost=rng.uniform(0.1, 1.0)))
    a = np.zeros((n, n))
    a[2, 0] = a[2, 1] = 1.0
    lam = rng.uniform(*lam_range, size=(n, n))
    net = NetworkState(devices=devs, adjacency=a, similarity=lam,
                       conn_similarity=lam * a)
    sampling = SamplingDecision.from_ids([0, 1], n)
    model = ObjectiveModel(sampling=sampling,
                           unsampled_mass=devs[2].data_count,
                           grad_estimate=rng.uniform(0.1, 5.0),
                           gamma=rng.uniform(0.5, 2.0))
    return net, sampling, model


def grid_search_oracle(net, model, res=0.01):
    """Exhaustive feasible-grid minimum for the 3-node instance."""
    g = np.arange(0.0, 1.0 + 1e-12, res)
    p0, p1 = np.meshgrid(g, g, indexing="ij")
    counts = net.data_counts()
    u = useful_coefficients(net)
    room = receive_room(net)
    sender = net.devices[2]
    feasible = p0 + p1 <= 1.0 + 1e-12
    feasible &= counts[2] * (p0 * sender.tx_cost[0] + p1 * sender.tx_cost[1]) \
        <= sender.tx_budget + 1e-12
    feasible &= p0 * u[2, 0] <= room[0] + 1e-12
    feasible &= p1 * u[2, 1] <= room[1] + 1e-12
    d0 = counts[0] + p0 * u[2, 0]
    d1 = counts[1] + p1 * u[2, 1]
    d_n = d0 + d1 + model.unsampled_mass
    obj = model.unsampled_mass / d_n * model.grad_estimate \
        + model.gamma / 2 * (1 / np.sqrt(d0) + 1 / np.sqrt(d1))
    return float(np.where(feasible, obj, np.inf).min())


class TestObjective:
    def test_zero_plan_baseline(self):
        net, sampling, model = three_node_instance(1)
        counts = net.data_counts()
        d_s = counts[0] + counts[1]
        d_n = d_s + counts[2]
        expect = counts[2] / d_n * model.grad_estimate + model.gamma / 2 * (
            1 / np.sqrt(counts[0]) + 1 / np.sqrt(counts[1]))
        assert objective(np.zeros((3, 3)), net, model) == pytest.approx(expect)

    def test_saturated_edge_changes_nothing(self):
        net, sampling, model = three_node_instance(2)
        net.conn_similarity[2, 0] = 1.0
        phi = np.zeros((3, 3))
        phi[2, 0] = 0.8
        assert objective(phi, net, model) == pytest.approx(
            objective(np.zeros((3, 3)), net, model))

    def test_matches_independent_arithmetic(self):
        # Dual implementation: plain Python loops over the definition.
        net, sampling, model = three_node_instance(3)
        rng = np.random.default_rng(0)
        for _ in range(20):
            phi = np.zeros((3, 3))
            phi[2, 0], phi[2, 1] = rng.uniform(0, 0.5, size=2)
            counts = net.data_counts()
            d = {}
            for i in (0, 1):
                recv = counts[2] * phi[2, i] * (1 - net.conn_similarity[2, i])
                d[i] = counts[i] + recv
            d_s = d[0] + d[1]
            d_n = d_s + counts[2]
            expect = (d_n - d_s) / d_n * model.grad_estimate \
                + (model.gamma / 2) * sum(1 / np.sqrt(d[i]) for i in (0, 1))
            assert objective(phi, net, model) == pytest.approx(expect, rel=1e-12)

    def test_zero_data_rejected(self):
        net, sampling, model = three_node_instance(4)
        net.devices[0].data_count = 0.0
        with pytest.raises(OffloadError):
            objective(np.zeros((3, 3)), net, model)


class TestGradientEstimate:
    def make_model(self):
        _, sampling, model = three_node_instance(5)
        return model

    def test_equal_gradients_clamped_above_one(self):
        model = self.make_model()
        out = update_gradient_estimate(model, observed=1.0, previous=1.0,
                                       t_observed=5, tau=5)
        assert out.alpha == pytest.approx(1.0 + 1e-6)
        assert out.extrapolated(6).grad_estimate == pytest.approx(1.0, rel=1e-5)

    def test_halving_example(self):
        model = self.make_model()
        out = update_gradient_estimate(model, observed=1.0, previous=2.0,
                                       t_observed=1, tau=1)
        assert out.alpha == pytest.approx(2.0)
        assert out.extrapolated(2).grad_estimate == pytest.approx(0.5)
        assert out.extrapolated(3).grad_estimate == pytest.approx(0.25)

    def test_alpha_clamp_max(self):
        model = self.make_model()
        out = update_gradient_estimate(model, observed=1e-9, previous=1e3,
                                       t_observed=1, tau=1)
        assert out.alpha == model.alpha_max

    def test_nonpositive_rejected(self):
        model = self.make_model()
        with pytest.raises(OffloadError):
            update_gradient_estimate(model, observed=0.0, previous=1.0,
                                     t_observed=1, tau=1)

    def test_extrapolation_tracks_convex_run(self):
        # On a deterministic geometric decay the extrapolation is near-exact.
        model = self.make_model()
        rho = 0.8  # per-step decay of the observed gradient magnitude
        tau = 3
        obs = [2.0, 2.0 * rho ** tau]
        out = update_gradient_estimate(model, observed=obs[1], previous=obs[0],
                                       t_observed=2 * tau, tau=tau)
        for step in range(1, tau + 1):
            realized = obs[1] * rho ** step
            est = out.extrapolated(2 * tau + step).grad_estimate
            assert abs(est - realized) / realized < 0.5


class TestCheckFeasible:
    def test_zero_plan_feasible(self):
        net, sampling, _ = three_node_instance(6)
        report = check_feasible(np.zeros((3, 3)), net, sampling)
        assert report.feasible
        assert report.worst_slack() >= 0.0

    def test_budget_overrun_flagged(self):
        net, sampling, _ = three_node_instance(7)
        net.devices[2].tx_budget = 1.0
        phi = np.zeros((3, 3))
        phi[2, 0] = 1.0
        report = check_feasible(phi, net, sampling)
        names = [c.name for c in report.violated()]
        assert "transmit-budget (11)" in names

    def test_randomized_matches_bruteforce(self):
        rng = np.random.default_rng(8)
        for seed in range(10):
            n = 4
            devs = [make_device(i, n, rng.integers(5, 40),
                                theta=rng.uniform(1, 20),
                                budget=rng.uniform(1, 20),
                                cap=rng.uniform(20, 200),
                                cost=rng.uniform(0.2, 2.0),
                                tx_cost=rng.uniform(0.1, 1.0))
                    for i in range(n)]
            a = (rng.random((n, n)) < 0.7).astype(float)
            np.fill_diagonal(a, 0)
            lam = rng.uniform(0, 1, (n, n))
            net = NetworkState(devices=devs, adjacency=a, similarity=lam,
                               conn_similarity=lam * a)
            sampling = SamplingDecision.from_ids([0, 1], n)
            phi = rng.uniform(0, 0.5, (n, n))
            report = check_feasible(phi, net, sampling)
            by_name = {c.name: c for c in report.checks}

            # Brute-force re-evaluation, plain loops.
            x = [1, 1, 0, 0]
            counts = net.data_counts()
            recv = [sum(counts[k] * phi[k][i] * (1 - net.conn_similarity[k, i])
                        for k in range(n)) for i in range(n)]
            worst9 = min(devs[i].recv_buffer - recv[i] for i in range(n))
            assert by_name["receive-buffer (9)"].worst_slack == pytest.approx(worst9)
            worst10 = min(devs[i].proc_capacity
                          - devs[i].proc_cost * (counts[i] + recv[i])
                          for i in range(n))
            assert by_name["processing (10)"].worst_slack == pytest.approx(worst10)
            worst11 = min(
                devs[k].tx_budget - counts[k] * sum(
                    x[i] * phi[k][i] * devs[k].tx_cost[i] for i in range(n))
                for k in range(n))
            assert by_name["transmit-budget (11)"].worst_slack == pytest.approx(worst11)
            worst12 = min(1.0 - sum(phi[k]) for k in range(n))
            assert by_name["row-sum (12)"].worst_slack == pytest.approx(worst12)
            worst13 = -max((1 - x[i]) * (1 - x[k]) * phi[k][i]
                           for k in range(n) for i in range(n))
            assert by_name["support-unsampled-pair (13)"].worst_slack == \
                pytest.approx(worst13)
            worst14 = -max(x[k] * phi[k][i] for k in range(n) for i in range(n))
            assert by_name["support-sampled-sender (14)"].worst_slack == \
                pytest.approx(worst14)
            worst15 = -max((1 - a[k][i]) * phi[k][i]
                           for k in range(n) for i in range(n))
            assert by_name["support-adjacency (15)"].worst_slack == \
                pytest.approx(worst15)
            assert by_name["sample-size (16)"].satisfied
            assert by_name["phi-nonneg (17)"].worst_slack == pytest.approx(phi.min())


class TestSolveTimestep:
    def test_single_edge_saturates_binding_constraint(self):
        n = 2
        sender = make_device(0, n, 40, budget=8.0, tx_cost=0.5)
        receiver = make_device(1, n, 20, theta=12.0, cap=1e9, cost=1.0)
        a = np.array([[0.0, 1.0], [0.0, 0.0]])
        net = NetworkState(devices=[sender, receiver], adjacency=a,
                           similarity=np.zeros((n, n)),
                           conn_similarity=np.zeros((n, n)))
        sampling = SamplingDecision.from_ids([1], n)
        model = initial_objective_model(sampling, net, grad_magnitude=1.0)
        phi = solve_timestep(net, model)
        # binding: row <= 1, budget 8/(40*0.5)=0.4, receive 12/40=0.3
        assert phi[0, 1] == pytest.approx(0.3, abs=1e-6)

    def test_no_cross_edges_gives_zero(self):
        net, sampling, model = three_node_instance(9)
        net.adjacency = np.zeros((3, 3))
        net.conn_similarity = np.zeros((3, 3))
        assert np.all(solve_timestep(net, model) == 0)

    @pytest.mark.parametrize("seed", range(25))
    def test_grid_search_optimality(self, seed):
        net, sampling, model = three_node_instance(seed)
        phi = solve_timestep(net, model)
        ours = objective(phi, net, model)
        best = grid_search_oracle(net, model)
        # The solver may undercut the finite grid, never trail it.
        assert ours <= best + 1e-3

    @pytest.mark.parametrize("seed", range(25))
    def test_emitted_plan_feasible(self, seed):
        net, sampling, model = three_node_instance(seed)
        phi = solve_timestep(net, model)
        report = check_feasible(phi, net, sampling)
        assert report.feasible, report.summary()

    def test_infeasible_initial_state_reported(self):
        net, sampling, model = three_node_instance(10)
        net.devices[0].proc_capacity = 0.1  # p*D already exceeds P
        with pytest.raises(OffloadError):
            solve_timestep(net, model)


class TestConvexityAndMonotonicity:
    def feasible_phi(self, net, sampling, rng):
        from fedoff.baselines import random_offload_step
        return random_offload_step(net, sampling, rng)

    @pytest.mark.parametrize("seed", range(8))
    def test_convexity_witness(self, seed):
        net, sampling, model = three_node_instance(seed + 30)
        rng = np.random.default_rng(seed)
        pa = self.feasible_phi(net, sampling, rng)
        pb = self.feasible_phi(net, sampling, rng)
        for theta in (0.0, 0.25, 0.5, 0.75, 1.0):
            mix = theta * pa + (1 - theta) * pb
            assert objective(mix, net, model) <= \
                theta * objective(pa, net, model) \
                + (1 - theta) * objective(pb, net, model) + 1e-12

    @pytest.mark.parametrize("seed", range(8))
    def test_more_useful_data_never_hurts(self, seed):
        net, sampling, model = three_node_instance(seed + 50)
        rng = np.random.default_rng(seed)
        phi = self.feasible_phi(net, sampling, rng) * 0.5
        base = objective(phi, net, model)
        bumped = phi.copy()
        target = (2, 0) if net.conn_similarity[2, 0] < 1 else (2, 1)
        bumped[target] += 0.01
        assert objective(bumped, net, model) <= base + 1e-15


class TestSolveHorizon:
    def test_empty_horizon(self):
        net, sampling, model = three_node_instance(11)
        plan = solve_horizon(net, model, sampling, horizon=0, tau=1)
        assert plan.horizon == 0
        assert plan.objective_value == 0.0

    def test_front_loaded_budgets_exhaust(self):
        # Tight processing capacity: all useful transfer happens in step 1.
        n = 3
        sender = make_device(2, n, 50, budget=1e9, tx_cost=0.1)
        recv0 = make_device(0, n, 20, theta=1e9, cap=25.0, cost=1.0)
        recv1 = make_device(1, n, 20, theta=1e9, cap=25.0, cost=1.0)
        a = np.zeros((n, n))
        a[2, 0] = a[2, 1] = 1.0
        net = NetworkState(devices=[recv0, recv1, sender], adjacency=a,
                           similarity=np.zeros((n, n)),
                           conn_similarity=np.zeros((n, n)))
        sampling = SamplingDecision.from_ids([0, 1], n)
        model = initial_objective_model(sampling, net, grad_magnitude=1.0)
        plan = solve_horizon(net, model, sampling, horizon=4, tau=2,
                             rng=np.random.default_rng(0))
        received_1 = (plan.phis[0][2] * 50).sum()
        assert received_1 == pytest.approx(10.0, abs=1e-5)  # caps fill: 2*5
        for phi in plan.phis[1:]:
            assert np.all(phi * 50 <= 1e-5)

    def test_every_step_feasible_and_not_worse_than_zero_plan(self):
        net, sampling, model = three_node_instance(12)
        zero_value = objective(np.zeros((3, 3)), net, model)
        plan = solve_horizon(net, model, sampling, horizon=5, tau=2,
                             rng=np.random.default_rng(1))
        assert plan.feasible()
        assert plan.objective_value <= zero_value + 1e-12

    def test_plan_roundtrip(self, tmp_path):
        net, sampling, model = three_node_instance(13)
        plan = solve_horizon(net, model, sampling, horizon=3, tau=1,
                             rng=np.random.default_rng(2))
        plan.save(tmp_path / "plan.json")
        back = OffloadPlan.load(tmp_path / "plan.json")
        assert back.horizon == plan.horizon
        for a, b in zip(plan.phis, back.phis):
            assert np.allclose(a, b)


class TestOneShotRule:
    def test_cumulative_effective_fraction_bounded(self):
        net, sampling, model = three_node_instance(14, lam_range=(0.0, 0.3))
        state = net
        rng = np.random.default_rng(3)
        cumulative = np.zeros((3, 3))
        for _ in range(12):
            phi = solve_timestep(state, model)
            useful_fraction = phi * (1 - state.conn_similarity)
            cumulative += useful_fraction
            state = apply_offload_step(state, phi, rng)
        assert np.all(cumulative <= 1.0 + 1e-9)
        assert np.all(state.conn_similarity <= 1.0)
