"""Federated training core: local gradient steps, periodic weighted
aggregation, global loss, the centralized reference model, and the simulation
loop that ties them to the offloading dynamics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .losses import accuracy as loss_accuracy
from .network import NetworkState, apply_offload_step


class TrainingError(RuntimeError):
    pass


class OffloadPolicy(Protocol):
    """Per-step offloading decision source for the simulation loop."""

    def plan(self, state: NetworkState, t: int) -> np.ndarray:
        ...

    def observe(self, state: NetworkState, t: int, grad_mag: float) -> None:
        ...


class ZeroOffload:
    """No D2D offloading."""

    def plan(self, state: NetworkState, t: int) -> np.ndarray:
        n = state.n_devices
        return np.zeros((n, n))

    def observe(self, state: NetworkState, t: int, grad_mag: float) -> None:
        pass


@dataclass
class ModelState:
    """Parameters of the sampled-FedL process at one instant."""

    local_params: dict[int, np.ndarray]
    global_params: np.ndarray
    centralized_params: np.ndarray
    step_size: float
    agg_period: int
    loss_kind: str


@dataclass
class SimulationTrace:
    """Per-step record of a sampled-FedL run with offloading."""

    sampling: np.ndarray              # bool mask, shape (N,)
    eta: float
    tau: int
    steps: int
    states: list[NetworkState] = field(default_factory=list)
    phis: list[np.ndarray | None] = field(default_factory=list)
    w_sampled: list[np.ndarray] = field(default_factory=list)
    locals_history: list[dict[int, np.ndarray]] = field(default_factory=list)
    v_central: list[np.ndarray] | None = None
    global_losses: list[float] = field(default_factory=list)
    accuracy_curve: list[float] = field(default_factory=list)  # one per aggregation
    delta_weights: dict[int, dict[int, float]] = field(default_factory=dict)
    grad_observations: dict[int, float] = field(default_factory=dict)

    @property
    def sampled_ids(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.sampling)]

    def datapoints_processed(self, through_step: int | None = None) -> float:
        """Cumulative datapoints handled by sampled devices per local step."""
        end = self.steps if through_step is None else through_step
        total = 0.0
        for t in range(1, end + 1):
            counts = self.states[t].data_counts()
            total += float(counts[self.sampling].sum())
        return total


def local_step(w: np.ndarray, features: np.ndarray, labels: np.ndarray,
               loss, eta: float) -> np.ndarray:
    """One gradient-descent step on the device's mean loss."""
    g = loss.grad(w, features, labels)
    if not np.all(np.isfinite(g)):
        raise TrainingError(
            f"non-finite gradient (|w|={np.linalg.norm(w):.3g}, n={len(labels)})")
    return w - eta * g


def aggregate(local_params: dict[int, np.ndarray],
              weights: dict[int, float]) -> np.ndarray:
    """Weighted average of sampled-device parameters."""
    if not local_params:
        raise TrainingError("no sampled devices to aggregate")
    total = sum(weights[i] for i in local_params)
    if any(weights[i] < 0 for i in local_params):
        raise TrainingError("negative aggregation weight")
    if total <= 0:
        raise TrainingError("all-zero aggregation weights")
    out = np.zeros_like(next(iter(local_params.values())))
    for i, w in local_params.items():
        out = out + (weights[i] / total) * w
    return out


def global_loss(w: np.ndarray, net: NetworkState, loss) -> float:
    """Network-wide loss: datapoint-weighted average of device losses."""
    counts = net.data_counts()
    total = counts.sum()
    if total <= 0:
        raise TrainingError("empty network")
    value = 0.0
    for dev, d in zip(net.devices, counts):
        if d > 0:
            value += d * loss.value(w, dev.features, dev.labels)
    return value / total


def global_grad(w: np.ndarray, net: NetworkState, loss) -> np.ndarray:
    counts = net.data_counts()
    total = counts.sum()
    if total <= 0:
        raise TrainingError("empty network")
    g = np.zeros_like(w)
    for dev, d in zip(net.devices, counts):
        if d > 0:
            g = g + d * loss.grad(w, dev.features, dev.labels)
    return g / total


def sampled_mean_grad(w: np.ndarray, net: NetworkState,
                      sampling: np.ndarray, loss) -> np.ndarray:
    """Data-weighted mean gradient over the sampled set (at common params w)."""
    counts = net.data_counts()
    ids = np.flatnonzero(sampling)
    total = counts[ids].sum()
    g = np.zeros_like(w)
    for i in ids:
        dev = net.devices[i]
        g = g + counts[i] * loss.grad(w, dev.features, dev.labels)
    return g / total


def run_centralized_reference(trace: SimulationTrace, loss) -> list[np.ndarray]:
    """Reference model with access to all network data.

    Follows gradient descent on the full-network loss between aggregations and
    resynchronizes to the sampled aggregate at each aggregation instant.
    Returns pre-resync parameters per step.
    """
    eta, tau = trace.eta, trace.tau
    v = [trace.w_sampled[0].copy()]
    cur = trace.w_sampled[0]
    for t in range(1, trace.steps + 1):
        cur = cur - eta * global_grad(cur, trace.states[t], loss)
        if not np.all(np.isfinite(cur)):
            raise TrainingError(f"centralized reference diverged at t={t}")
        v.append(cur)
        if t % tau == 0:
            cur = trace.w_sampled[t]
    return v


def simulate_fedl(net0: NetworkState, sampling: np.ndarray, loss,
                  eta: float, tau: int, steps: int,
                  policy: OffloadPolicy | None = None,
                  rng: np.random.Generator | None = None,
                  w0: np.ndarray | None = None,
                  test_set: tuple[np.ndarray, np.ndarray] | None = None,
                  track_reference: bool = False,
                  record_losses: bool = True) -> SimulationTrace:
    """Run sampled FedL for ``steps`` local iterations.

    Each step applies the policy's offloading matrix, then performs one local
    gradient step per sampled device on its post-offload dataset. Every ``tau``
    steps the server aggregates with data-quantity weights, synchronizes the
    sampled devices, and reports the observed mean gradient magnitude back to
    the policy.
    """
    if policy is None:
        policy = ZeroOffload()
    if rng is None:
        rng = np.random.default_rng(0)
    sampling = np.asarray(sampling, dtype=bool)
    ids = [int(i) for i in np.flatnonzero(sampling)]
    if not ids:
        raise TrainingError("sampled set is empty")

    if w0 is None:
        w0 = loss.init_params(np.random.default_rng(12345))
    local = {i: w0.copy() for i in ids}

    trace = SimulationTrace(sampling=sampling, eta=eta, tau=tau, steps=steps)
    trace.states.append(net0)
    trace.phis.append(None)
    trace.w_sampled.append(w0.copy())
    trace.locals_history.append({i: w.copy() for i, w in local.items()})
    if record_losses:
        trace.global_losses.append(global_loss(w0, net0, loss))

    # Initial gradient observation for the optimizer's extrapolation.
    g0 = sampled_mean_grad(w0, net0, sampling, loss)
    trace.grad_observations[0] = float(np.linalg.norm(g0))
    policy.observe(net0, 0, trace.grad_observations[0])

    state = net0
    period_delta = {i: 0.0 for i in ids}
    for t in range(1, steps + 1):
        phi = policy.plan(state, t)
        state = apply_offload_step(state, phi, rng=rng)
        counts = state.data_counts()
        for i in ids:
            dev = state.devices[i]
            local[i] = local_step(local[i], dev.features, dev.labels, loss, eta)
            period_delta[i] += counts[i]

        w_s = aggregate(local, period_delta)
        trace.states.append(state)
        trace.phis.append(phi)
        trace.w_sampled.append(w_s)
        trace.locals_history.append({i: w.copy() for i, w in local.items()})
        if record_losses:
            trace.global_losses.append(global_loss(w_s, state, loss))

        if t % tau == 0:
            k = t // tau
            trace.delta_weights[k] = dict(period_delta)
            for i in ids:
                local[i] = w_s.copy()
            trace.locals_history[-1] = {i: w.copy() for i, w in local.items()}
            grad_mag = float(np.linalg.norm(
                sampled_mean_grad(w_s, state, sampling, loss)))
            trace.grad_observations[t] = grad_mag
            policy.observe(state, t, grad_mag)
            if test_set is not None:
                trace.accuracy_curve.append(
                    loss_accuracy(loss, w_s, test_set[0], test_set[1]))
            period_delta = {i: 0.0 for i in ids}

    if track_reference:
        trace.v_central = run_centralized_reference(trace, loss)
    return trace
