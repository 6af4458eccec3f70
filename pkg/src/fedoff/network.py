"""Device network model: synthetic scenario generation, similarity estimation,
and the data-offloading state transition.

The network is a directed D2D graph over N devices. Each device holds a
labeled dataset plus capacity/cost parameters. Offloading moves data from
unsampled senders to sampled receivers; the connectivity-similarity matrix
discounts transfers by estimated dataset overlap and saturates as edges are
used up.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

SCENARIO_SCHEMA_VERSION = 1
CONFIG_SCHEMA_VERSION = 1


class ScenarioError(ValueError):
    """Invalid scenario configuration or state."""


class InfeasiblePlanError(ValueError):
    """An offloading matrix violates a transition constraint."""

    def __init__(self, constraint: str, detail: str):
        self.constraint = constraint
        self.detail = detail
        super().__init__(f"infeasible offload plan: {constraint}: {detail}")


@dataclass
class DeviceState:
    """Per-device capacities, costs, budgets, and current dataset.

    ``data_count`` is the continuous effective datapoint count driving the
    optimizer and aggregation weights; ``features``/``labels`` hold the
    physical datapoints used for training. The two agree at t=0 and drift by
    less than one datapoint per in-edge per step under offloading.
    """

    id: int
    proc_capacity: float   # datapoints processable per period (P)
    proc_cost: float       # cost units per datapoint (p)
    recv_buffer: float     # max datapoints receivable per step (theta)
    tx_budget: float       # transmit cost budget per step (Psi)
    tx_cost: np.ndarray    # per-recipient cost units per datapoint (psi, shape (N,))
    data_count: float      # effective datapoint count (D)
    features: np.ndarray   # shape (n, M)
    labels: np.ndarray     # shape (n,), integer labels

    def copy(self) -> "DeviceState":
        return DeviceState(
            id=self.id,
            proc_capacity=self.proc_capacity,
            proc_cost=self.proc_cost,
            recv_buffer=self.recv_buffer,
            tx_budget=self.tx_budget,
            tx_cost=self.tx_cost,
            data_count=self.data_count,
            features=self.features,
            labels=self.labels,
        )

    @property
    def dataset_size(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class NetworkState:
    """Full network snapshot: device roster plus adjacency/similarity matrices.

    Value semantics: transitions return a new NetworkState; arrays held here
    are treated as immutable.
    """

    devices: list[DeviceState]
    adjacency: np.ndarray        # (N, N) binary, A[k, i] = 1 iff k may send to i
    similarity: np.ndarray       # (N, N) lambda in [0, 1]
    conn_similarity: np.ndarray  # (N, N) Lambda = lambda * A elementwise
    time: int = 0
    # Per-edge record of sender point indices already offloaded (one-shot rule).
    sent: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    @property
    def n_devices(self) -> int:
        return len(self.devices)

    def data_counts(self) -> np.ndarray:
        return np.array([d.data_count for d in self.devices], dtype=float)

    def copy(self) -> "NetworkState":
        return NetworkState(
            devices=[d.copy() for d in self.devices],
            adjacency=self.adjacency,
            similarity=self.similarity,
            conn_similarity=self.conn_similarity,
            time=self.time,
            sent=dict(self.sent),
        )


@dataclass
class ScenarioConfig:
    """Parameters for synthetic heterogeneous-network generation."""

    n_devices: int = 20
    sample_budget: int = 3
    horizon: int = 25
    agg_period: int = 5
    link_prob: float = 0.1
    labels_per_device: int = 3
    num_labels: int = 10
    feature_dim: int = 8
    data_mean: float = 50.0
    data_var: float | None = None          # default 0.2 * data_mean
    similarity_epsilon: float | None = None  # default: duplicate tolerance
    probe_size: int | None = None          # default: max(5, 10% of dataset)
    rng_seed: int = 0
    class_sep: float = 6.0
    feature_noise: float = 1.0
    proc_cost_range: tuple[float, float] = (0.5, 2.0)
    capacity_headroom_range: tuple[float, float] = (1.5, 4.0)
    recv_buffer_range: tuple[float, float] | None = None  # default (0.25, 1.0) * mu
    tx_budget_range: tuple[float, float] | None = None    # default (0.2, 1.2) * mu
    tx_cost_range: tuple[float, float] = (0.1, 1.0)

    def validate(self) -> None:
        if self.data_mean <= 0:
            raise ScenarioError(f"data_mean must be > 0, got {self.data_mean}")
        if not 1 <= self.sample_budget <= self.n_devices:
            raise ScenarioError(
                f"sample_budget must be in [1, {self.n_devices}], got {self.sample_budget}"
            )
        if self.agg_period < 1:
            raise ScenarioError(f"agg_period must be >= 1, got {self.agg_period}")
        if self.horizon < self.agg_period:
            raise ScenarioError(
                f"horizon must be >= agg_period, got {self.horizon} < {self.agg_period}"
            )
        if not 0.0 <= self.link_prob <= 1.0:
            raise ScenarioError(f"link_prob must be in [0, 1], got {self.link_prob}")
        if not 1 <= self.labels_per_device <= self.num_labels:
            raise ScenarioError(
                f"labels_per_device must be in [1, {self.num_labels}], "
                f"got {self.labels_per_device}"
            )

    @property
    def resolved_data_var(self) -> float:
        return 0.2 * self.data_mean if self.data_var is None else self.data_var

    @property
    def resolved_epsilon(self) -> float:
        # Duplicate-feature tolerance unless the config says otherwise.
        return 1e-6 if self.similarity_epsilon is None else self.similarity_epsilon

    def resolved_recv_buffer_range(self) -> tuple[float, float]:
        if self.recv_buffer_range is not None:
            return self.recv_buffer_range
        return (0.25 * self.data_mean, 1.0 * self.data_mean)

    def resolved_tx_budget_range(self) -> tuple[float, float]:
        if self.tx_budget_range is not None:
            return self.tx_budget_range
        return (0.2 * self.data_mean, 1.2 * self.data_mean)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = CONFIG_SCHEMA_VERSION
        d["kind"] = "fedoff-config"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        d.pop("schema_version", None)
        d.pop("kind", None)
        for key in ("proc_cost_range", "capacity_headroom_range", "recv_buffer_range",
                    "tx_budget_range", "tx_cost_range"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def from_file(cls, path: str | Path) -> "ScenarioConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


class SyntheticTask:
    """Mixture-of-Gaussians classification task with fixed class centers."""

    def __init__(self, config: ScenarioConfig):
        rng = np.random.default_rng(config.rng_seed ^ 0x5EED)
        raw = rng.normal(size=(config.num_labels, config.feature_dim))
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
        self.class_means = config.class_sep * raw / norms
        self.feature_noise = config.feature_noise
        self.num_labels = config.num_labels
        self.feature_dim = config.feature_dim

    def sample(self, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Draw one feature vector per entry of ``labels``."""
        noise = rng.normal(scale=self.feature_noise,
                           size=(len(labels), self.feature_dim))
        return self.class_means[np.asarray(labels, dtype=int)] + noise

    def test_set(self, labels_present: np.ndarray, n: int,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Held-out set drawn uniformly over the union of present labels."""
        labels_present = np.asarray(sorted(set(int(v) for v in labels_present)))
        y = labels_present[rng.integers(0, len(labels_present), size=n)]
        return self.sample(y, rng), y


def generate_scenario(config: ScenarioConfig) -> NetworkState:
    """Build a synthetic network: label-skewed datasets, ER digraph, uniform
    capacity/cost draws. Deterministic given ``config.rng_seed``.
    """
    config.validate()
    rng = np.random.default_rng(config.rng_seed)
    task = SyntheticTask(config)
    n = config.n_devices
    mu = config.data_mean
    sigma = math.sqrt(config.resolved_data_var)

    # Directed ER adjacency, zero diagonal.
    adjacency = (rng.random((n, n)) < config.link_prob).astype(float)
    np.fill_diagonal(adjacency, 0.0)

    devices = []
    for i in range(n):
        label_pool = rng.choice(config.num_labels, size=config.labels_per_device,
                                replace=False)
        count = max(1, int(round(rng.normal(mu, sigma))))
        labels = label_pool[rng.integers(0, len(label_pool), size=count)]
        features = task.sample(labels, rng)

        proc_cost = rng.uniform(*config.proc_cost_range)
        headroom = rng.uniform(*config.capacity_headroom_range)
        # Capacity scales with the initial load so constraint p*D <= P holds at t=0.
        proc_capacity = max(proc_cost, 1e-9) * count * headroom
        recv_buffer = rng.uniform(*config.resolved_recv_buffer_range())
        tx_budget = rng.uniform(*config.resolved_tx_budget_range())
        tx_cost = rng.uniform(*config.tx_cost_range, size=n)

        devices.append(DeviceState(
            id=i,
            proc_capacity=proc_capacity,
            proc_cost=proc_cost,
            recv_buffer=recv_buffer,
            tx_budget=tx_budget,
            tx_cost=tx_cost,
            data_count=float(count),
            features=features,
            labels=labels.astype(int),
        ))

    net = NetworkState(
        devices=devices,
        adjacency=adjacency,
        similarity=np.zeros((n, n)),
        conn_similarity=np.zeros((n, n)),
        time=0,
    )
    lam = estimate_similarity(net, probe_size=config.probe_size,
                              epsilon=config.resolved_epsilon,
                              rng=np.random.default_rng(config.rng_seed ^ 0xA11))
    net.similarity = lam
    net.conn_similarity = lam * adjacency
    return net


def _similar_counts(probe_x: np.ndarray, probe_y: np.ndarray,
                    data_x: np.ndarray, data_y: np.ndarray,
                    epsilon: float) -> int:
    """Number of probe points similar to at least one target point."""
    hit = np.zeros(len(probe_y), dtype=bool)
    for label in np.unique(probe_y):
        rows = np.flatnonzero(probe_y == label)
        cols = np.flatnonzero(data_y == label)
        if len(cols) == 0:
            continue
        diff = probe_x[rows][:, None, :] - data_x[cols][None, :, :]
        dist = np.linalg.norm(diff, axis=2)
        hit[rows] |= (dist <= epsilon).any(axis=1)
    return int(hit.sum())


def estimate_similarity(net: NetworkState, probe_size: int | None = None,
                        epsilon: float = 1e-6,
                        rng: np.random.Generator | None = None) -> np.ndarray:
    """Estimate the initial similarity matrix by probe broadcast.

    lambda[i, j] is the fraction of a random sample of device i's data that is
    similar (same label, feature distance <= epsilon) to at least one point of
    device j. Not symmetric in general.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    n = net.n_devices
    for d in net.devices:
        if d.dataset_size == 0:
            raise ScenarioError(f"device {d.id} has an empty dataset")
    lam = np.zeros((n, n))
    for i, di in enumerate(net.devices):
        size = di.dataset_size
        if probe_size is None:
            k = max(5, math.ceil(0.1 * size))
        else:
            if probe_size < 1:
                raise ScenarioError(f"probe_size must be >= 1, got {probe_size}")
            k = probe_size
        k = min(k, size)
        idx = rng.choice(size, size=k, replace=False) if k < size \
            else np.arange(size)
        px, py = di.features[idx], di.labels[idx]
        for j, dj in enumerate(net.devices):
            if i == j:
                lam[i, j] = 1.0
                continue
            lam[i, j] = _similar_counts(px, py, dj.features, dj.labels, epsilon) / k
    return lam


def useful_coefficients(net: NetworkState) -> np.ndarray:
    """U[k, i] = D_k * (1 - Lambda[k, i]): useful datapoints moved per unit Phi."""
    counts = net.data_counts()
    return counts[:, None] * (1.0 - net.conn_similarity)


def _validate_transition(net: NetworkState, phi: np.ndarray, tol: float) -> None:
    n = net.n_devices
    if phi.shape != (n, n):
        raise InfeasiblePlanError("shape", f"expected {(n, n)}, got {phi.shape}")
    if np.min(phi) < -tol:
        raise InfeasiblePlanError("phi-nonneg (17)", f"min entry {np.min(phi):.3g}")
    if np.max(phi) > 1.0 + tol:
        raise InfeasiblePlanError("phi-upper", f"max entry {np.max(phi):.3g}")
    off_edge = phi * (1.0 - net.adjacency)
    if np.max(np.abs(off_edge)) > tol:
        k, i = np.unravel_index(np.argmax(np.abs(off_edge)), phi.shape)
        raise InfeasiblePlanError("support (15)", f"phi[{k},{i}] > 0 on a non-edge")
    row_sums = phi.sum(axis=1)
    if np.max(row_sums) > 1.0 + tol:
        k = int(np.argmax(row_sums))
        raise InfeasiblePlanError("row-sum (12)", f"row {k} sums to {row_sums[k]:.6g}")

    counts = net.data_counts()
    received = (phi * useful_coefficients(net)).sum(axis=0)
    for i, dev in enumerate(net.devices):
        if received[i] > dev.recv_buffer + tol:
            raise InfeasiblePlanError(
                "receive-buffer (9)",
                f"device {i} receives {received[i]:.6g} > theta {dev.recv_buffer:.6g}")
        new_count = counts[i] + received[i]
        if dev.proc_cost * new_count > dev.proc_capacity + tol:
            raise InfeasiblePlanError(
                "processing (10)",
                f"device {i}: p*D = {dev.proc_cost * new_count:.6g} "
                f"> P {dev.proc_capacity:.6g}")
    for k, dev in enumerate(net.devices):
        spend = counts[k] * float(phi[k] @ dev.tx_cost)
        if spend > dev.tx_budget + tol:
            raise InfeasiblePlanError(
                "transmit-budget (11)",
                f"device {k} spends {spend:.6g} > Psi {dev.tx_budget:.6g}")


def apply_offload_step(net: NetworkState, phi: np.ndarray,
                       rng: np.random.Generator | None = None,
                       tol: float = 1e-9) -> NetworkState:
    """Advance the network one step under offloading ratios ``phi``.

    Effective counts and the connectivity-similarity matrix follow the
    continuous dynamics; physical datapoints move as a seeded i.i.d. selection
    of floor(useful amount) sender points not previously offloaded on that
    edge (recipients keep what they get, senders never resend).
    """
    phi = np.asarray(phi, dtype=float)
    _validate_transition(net, phi, tol)
    if rng is None:
        rng = np.random.default_rng(0)

    counts = net.data_counts()
    useful = useful_coefficients(net)
    received = (phi * useful).sum(axis=0)

    new_lam = net.conn_similarity + (1.0 - net.conn_similarity) * phi
    new_lam = np.where(phi >= 1.0, 1.0, new_lam)
    new_lam = np.clip(new_lam, net.conn_similarity, 1.0)

    devices = [d.copy() for d in net.devices]
    sent = dict(net.sent)
    for k in range(net.n_devices):
        row = phi[k]
        for i in np.flatnonzero(row > 0):
            n_keep = int(math.floor(row[i] * useful[k, i]))
            if n_keep <= 0:
                continue
            mask = sent.get((k, int(i)))
            size_k = net.devices[k].dataset_size
            if mask is None:
                mask = np.zeros(size_k, dtype=bool)
            elif len(mask) < size_k:
                mask = np.concatenate([mask, np.zeros(size_k - len(mask), dtype=bool)])
            pool = np.flatnonzero(~mask)
            if len(pool) == 0:
                continue
            n_keep = min(n_keep, len(pool))
            chosen = rng.choice(pool, size=n_keep, replace=False)
            mask = mask.copy()
            mask[chosen] = True
            sent[(k, int(i))] = mask
            src = net.devices[k]
            dst = devices[i]
            dst.features = np.concatenate([dst.features, src.features[chosen]])
            dst.labels = np.concatenate([dst.labels, src.labels[chosen]])
    for i, dev in enumerate(devices):
        dev.data_count = counts[i] + received[i]

    return NetworkState(
        devices=devices,
        adjacency=net.adjacency,
        similarity=net.similarity,
        conn_similarity=new_lam,
        time=net.time + 1,
        sent=sent,
    )


def save_scenario(net: NetworkState, path: str | Path) -> None:
    """Write a versioned snapshot of the full network state."""
    payload = {
        "schema_version": SCENARIO_SCHEMA_VERSION,
        "kind": "fedoff-scenario",
        "time": net.time,
        "adjacency": net.adjacency.tolist(),
        "similarity": net.similarity.tolist(),
        "conn_similarity": net.conn_similarity.tolist(),
        "devices": [
            {
                "id": d.id,
                "proc_capacity": d.proc_capacity,
                "proc_cost": d.proc_cost,
                "recv_buffer": d.recv_buffer,
                "tx_budget": d.tx_budget,
                "tx_cost": d.tx_cost.tolist(),
                "data_count": d.data_count,
                "features": d.features.tolist(),
                "labels": d.labels.tolist(),
            }
            for d in net.devices
        ],
        "sent": [
            {"edge": [k, i], "indices": np.flatnonzero(mask).tolist()}
            for (k, i), mask in sorted(net.sent.items())
        ],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_scenario(path: str | Path) -> NetworkState:
    payload = json.loads(Path(path).read_text())
    if payload.get("kind") != "fedoff-scenario":
        raise ScenarioError(f"not a scenario snapshot: {path}")
    if payload.get("schema_version") != SCENARIO_SCHEMA_VERSION:
        raise ScenarioError(
            f"unsupported scenario schema {payload.get('schema_version')}")
    devices = [
        DeviceState(
            id=d["id"],
            proc_capacity=d["proc_capacity"],
            proc_cost=d["proc_cost"],
            recv_buffer=d["recv_buffer"],
            tx_budget=d["tx_budget"],
            tx_cost=np.array(d["tx_cost"], dtype=float),
            data_count=d["data_count"],
            features=np.array(d["features"], dtype=float),
            labels=np.array(d["labels"], dtype=int),
        )
        for d in payload["devices"]
    ]
    sent = {}
    for entry in payload.get("sent", []):
        k, i = entry["edge"]
        mask = np.zeros(devices[k].dataset_size, dtype=bool)
        mask[np.array(entry["indices"], dtype=int)] = True
        sent[(k, i)] = mask
    return NetworkState(
        devices=devices,
        adjacency=np.array(payload["adjacency"], dtype=float),
        similarity=np.array(payload["similarity"], dtype=float),
        conn_similarity=np.array(payload["conn_similarity"], dtype=float),
        time=payload["time"],
        sent=sent,
    )
