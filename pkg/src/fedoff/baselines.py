"""Comparison schemes: random/heuristic device sampling and random/greedy
data offloading."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import NetworkState, apply_offload_step, useful_coefficients
from .offload import OffloadPlan, check_feasible, receive_room
from .sampling import SamplingDecision

SAMPLING_KINDS = ("smart", "random", "heuristic", "all_nodes")
OFFLOAD_KINDS = ("optimized", "random", "greedy", "none")


@dataclass
class SchemeSpec:
    """A sampling strategy paired with an offloading strategy."""

    sampling_kind: str
    offload_kind: str
    repetitions: int = 5  # averaging for the random sampler

    def __post_init__(self):
        if self.sampling_kind not in SAMPLING_KINDS:
            raise ValueError(f"unknown sampling kind {self.sampling_kind!r}")
        if self.offload_kind not in OFFLOAD_KINDS:
            raise ValueError(f"unknown offload kind {self.offload_kind!r}")
        if self.sampling_kind == "all_nodes" and self.offload_kind != "none":
            raise ValueError("all_nodes pairs only with offload_kind 'none'")

    @property
    def name(self) -> str:
        if self.offload_kind == "none":
            return self.sampling_kind
        return f"{self.sampling_kind}_w_offload"


def sample_random(net: NetworkState, budget: int,
                  rng: np.random.Generator) -> SamplingDecision:
    """Uniformly random size-S device subset."""
    if budget > net.n_devices:
        raise ValueError(f"budget {budget} exceeds device count {net.n_devices}")
    ids = rng.choice(net.n_devices, size=budget, replace=False)
    return SamplingDecision.from_ids(sorted(int(i) for i in ids), net.n_devices)


def sample_heuristic(net: NetworkState, budget: int) -> SamplingDecision:
    """Top-S devices by processing capacity, ties broken by lowest index."""
    if budget > net.n_devices:
        raise ValueError(f"budget {budget} exceeds device count {net.n_devices}")
    caps = np.array([d.proc_capacity for d in net.devices])
    order = np.lexsort((np.arange(net.n_devices), -caps))
    return SamplingDecision.from_ids(sorted(int(i) for i in order[:budget]),
                                     net.n_devices)


def sample_all(net: NetworkState) -> SamplingDecision:
    return SamplingDecision.from_ids(range(net.n_devices), net.n_devices)


def _support_mask(state: NetworkState, sampling: SamplingDecision) -> np.ndarray:
    x = sampling.mask
    return (~x[:, None]) & x[None, :] & (state.adjacency > 0)


def random_offload_step(state: NetworkState, sampling: SamplingDecision,
                        rng: np.random.Generator) -> np.ndarray:
    """Uniform draws on the support, scaled down into the feasible polytope.

    Order: clamp rows to the simplex, scale rows for the transmit budget, then
    scale columns for the receive and processing limits.
    """
    n = state.n_devices
    support = _support_mask(state, sampling)
    phi = np.where(support, rng.random((n, n)), 0.0)

    row_sums = phi.sum(axis=1)
    over = row_sums > 1.0
    phi[over] /= row_sums[over][:, None]

    counts = state.data_counts()
    for k in range(n):
        spend = counts[k] * float(phi[k] @ state.devices[k].tx_cost)
        if spend > state.devices[k].tx_budget:
            phi[k] *= state.devices[k].tx_budget / spend

    useful = useful_coefficients(state)
    room = receive_room(state)
    received = (phi * useful).sum(axis=0)
    for i in range(n):
        if received[i] > room[i]:
            scale = max(room[i], 0.0) / received[i]
            phi[:, i] *= scale

    # Tiny uniform shrink clears float rounding on the scaled constraints.
    return phi * (1.0 - 1e-12)


def greedy_offload_step(state: NetworkState,
                        sampling: SamplingDecision) -> np.ndarray:
    """Fill each sampled device from its largest-data neighbors first,
    saturating the binding constraint; similarity is deliberately ignored in
    the ordering (raw datapoints are what this baseline maximizes)."""
    n = state.n_devices
    support = _support_mask(state, sampling)
    counts = state.data_counts()
    useful = useful_coefficients(state)
    room = np.maximum(receive_room(state), 0.0)
    budget_left = np.array([d.tx_budget for d in state.devices], dtype=float)
    row_left = np.ones(n)
    phi = np.zeros((n, n))

    for i in sorted(sampling.ids):
        senders = np.flatnonzero(support[:, i])
        senders = sorted(senders, key=lambda k: (-counts[k], k))
        for k in senders:
            if counts[k] <= 0:
                continue
            limit = row_left[k]
            unit_cost = counts[k] * state.devices[k].tx_cost[i]
            if unit_cost > 0:
                limit = min(limit, budget_left[k] / unit_cost)
            if useful[k, i] > 0:
                limit = min(limit, room[i] / useful[k, i])
            ratio = max(0.0, limit * (1.0 - 1e-12))
            if ratio <= 0:
                continue
            phi[k, i] = ratio
            row_left[k] -= ratio
            budget_left[k] -= ratio * unit_cost
            room[i] -= ratio * useful[k, i]
    return phi


class RandomOffload:
    """Per-step re-randomized offloading policy."""

    def __init__(self, sampling: SamplingDecision, rng: np.random.Generator):
        self.sampling = sampling
        self.rng = rng

    def plan(self, state: NetworkState, t: int) -> np.ndarray:
        return random_offload_step(state, self.sampling, self.rng)

    def observe(self, state: NetworkState, t: int, grad_mag: float) -> None:
        pass


class GreedyOffload:
    def __init__(self, sampling: SamplingDecision):
        self.sampling = sampling

    def plan(self, state: NetworkState, t: int) -> np.ndarray:
        return greedy_offload_step(state, self.sampling)

    def observe(self, state: NetworkState, t: int, grad_mag: float) -> None:
        pass


def _plan_over_horizon(net: NetworkState, sampling: SamplingDecision,
                       horizon: int, step_fn, rng: np.random.Generator) -> OffloadPlan:
    state = net
    phis, reports = [], []
    for _ in range(horizon):
        phi = step_fn(state)
        reports.append(check_feasible(phi, state, sampling))
        state = apply_offload_step(state, phi, rng=rng)
        phis.append(phi)
    return OffloadPlan(phis=phis, objective_value=float("nan"),
                       feasibility=reports)


def offload_random(net: NetworkState, sampling: SamplingDecision,
                   horizon: int, rng: np.random.Generator) -> OffloadPlan:
    """Random feasible offloading plan, re-randomized each step."""
    return _plan_over_horizon(
        net, sampling, horizon,
        lambda state: random_offload_step(state, sampling, rng), rng)


def offload_greedy(net: NetworkState, sampling: SamplingDecision,
                   horizon: int,
                   rng: np.random.Generator | None = None) -> OffloadPlan:
    """Greedy received-datapoint-maximizing plan over the horizon."""
    if rng is None:
        rng = np.random.default_rng(0)
    return _plan_over_horizon(
        net, sampling, horizon,
        lambda state: greedy_offload_step(state, sampling), rng)
