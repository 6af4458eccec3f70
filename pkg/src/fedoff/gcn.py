"""Two-layer graph convolutional sampler: forward pass, corpus generation by
exhaustive search on small network realizations, analytic-backprop training,
and the branch-based post-processing that turns node probabilities into a
sampled set.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .losses import make_loss
from .network import NetworkState, ScenarioConfig, generate_scenario
from .offload import OptimizedOffload, SolverOptions
from .sampling import SamplingDecision
from .training import global_loss, simulate_fedl

# Candidate ranking tolerates a coarser solve than the production optimizer.
CORPUS_SOLVER_OPTIONS = SolverOptions(max_iters=150, grad_map_tol=1e-4,
                                      dykstra_cycles=15, dykstra_tol=1e-10)

logger = logging.getLogger("fedoff.gcn")

GCN_SCHEMA_VERSION = 1
FEATURE_DIM = 4  # [data count, processing capacity, processing cost, receive buffer]


class GcnError(ValueError):
    pass


@dataclass
class GcnModel:
    """Trainable weights plus the feature standardization fitted at training."""

    q1: np.ndarray              # (FEATURE_DIM, hidden_dim)
    q2: np.ndarray              # (hidden_dim, 1)
    feature_shift: np.ndarray = None
    feature_scale: np.ndarray = None

    def __post_init__(self):
        if self.feature_shift is None:
            self.feature_shift = np.zeros(self.q1.shape[0])
        if self.feature_scale is None:
            self.feature_scale = np.ones(self.q1.shape[0])

    @property
    def hidden_dim(self) -> int:
        return self.q1.shape[1]

    def save(self, path: str | Path) -> None:
        payload = {
            "schema_version": GCN_SCHEMA_VERSION,
            "kind": "fedoff-gcn",
            "feature_dim": int(self.q1.shape[0]),
            "hidden_dim": int(self.hidden_dim),
            "q1": self.q1.ravel().tolist(),
            "q2": self.q2.ravel().tolist(),
            "feature_shift": self.feature_shift.tolist(),
            "feature_scale": self.feature_scale.tolist(),
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "GcnModel":
        payload = json.loads(Path(path).read_text())
        if payload.get("kind") != "fedoff-gcn":
            raise GcnError(f"not a GCN weights file: {path}")
        u, o = payload["feature_dim"], payload["hidden_dim"]
        return cls(
            q1=np.array(payload["q1"]).reshape(u, o),
            q2=np.array(payload["q2"]).reshape(o, 1),
            feature_shift=np.array(payload["feature_shift"]),
            feature_scale=np.array(payload["feature_scale"]),
        )


def init_gcn(hidden_dim: int = 16, rng: np.random.Generator | None = None) -> GcnModel:
    if rng is None:
        rng = np.random.default_rng(0)
    q1 = rng.normal(scale=0.5, size=(FEATURE_DIM, hidden_dim))
    q2 = rng.normal(scale=0.5, size=(hidden_dim, 1))
    return GcnModel(q1=q1, q2=q2)


@dataclass
class GcnInput:
    """Node features and the augmented connectivity-similarity matrix."""

    features: np.ndarray   # (N, FEATURE_DIM)
    augmented: np.ndarray  # (N, N), connectivity-similarity + identity


def build_gcn_input(net: NetworkState) -> GcnInput:
    features = np.array([
        [d.data_count, d.proc_capacity, d.proc_cost, d.recv_buffer]
        for d in net.devices
    ])
    augmented = net.conn_similarity + np.eye(net.n_devices)
    return GcnInput(features=features, augmented=augmented)


def _normalized_operator(augmented: np.ndarray) -> np.ndarray:
    degree = augmented.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(degree)
    return inv_sqrt[:, None] * augmented * inv_sqrt[None, :]


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max()
    return shifted - np.log(np.exp(shifted).sum())


def gcn_forward(model: GcnModel, inp: GcnInput) -> np.ndarray:
    """Node sampling probabilities; strictly positive, summing to one."""
    n, u = inp.features.shape
    if u != model.q1.shape[0]:
        raise GcnError(
            f"feature dim {u} does not match weights {model.q1.shape[0]}")
    if inp.augmented.shape != (n, n):
        raise GcnError(f"augmented matrix shape {inp.augmented.shape} != {(n, n)}")
    op = _normalized_operator(inp.augmented)
    scaled = (inp.features - model.feature_shift) / model.feature_scale
    h1 = np.maximum(op @ scaled @ model.q1, 0.0)
    h2 = op @ h1 @ model.q2
    return np.exp(_log_softmax(h2.ravel()))


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------

@dataclass
class CorpusSample:
    features: np.ndarray
    augmented: np.ndarray
    target: np.ndarray        # bool mask over nodes, sum = budget
    budget: int
    seed: int
    objective: float


@dataclass
class TrainingCorpus:
    samples: list[CorpusSample] = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        payload = {
            "schema_version": GCN_SCHEMA_VERSION,
            "kind": "fedoff-corpus",
            "samples": [
                {
                    "features": s.features.tolist(),
                    "augmented": s.augmented.tolist(),
                    "target": [int(v) for v in s.target],
                    "budget": s.budget,
                    "seed": s.seed,
                    "objective": s.objective,
                }
                for s in self.samples
            ],
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "TrainingCorpus":
        payload = json.loads(Path(path).read_text())
        if payload.get("kind") != "fedoff-corpus":
            raise GcnError(f"not a corpus file: {path}")
        return cls(samples=[
            CorpusSample(
                features=np.array(s["features"]),
                augmented=np.array(s["augmented"]),
                target=np.array(s["target"], dtype=bool),
                budget=s["budget"],
                seed=s["seed"],
                objective=s["objective"],
            )
            for s in payload["samples"]
        ])


def evaluate_sampling(net: NetworkState, ids, loss, eta: float, tau: int,
                      steps: int, gamma: float, seed: int,
                      solver_options: SolverOptions | None = None) -> float:
    """Realized FedL loss objective for one candidate sampled set: optimize
    offloading, simulate training, return the global loss averaged over
    aggregation instants."""
    sampling = SamplingDecision.from_ids(ids, net.n_devices)
    policy = OptimizedOffload(sampling, gamma=gamma,
                              options=solver_options or CORPUS_SOLVER_OPTIONS)
    trace = simulate_fedl(net, sampling.mask, loss, eta=eta, tau=tau,
                          steps=steps, policy=policy,
                          rng=np.random.default_rng(seed),
                          record_losses=False)
    instants = [t for t in range(tau, steps + 1, tau)] or [steps]
    return float(np.mean([
        global_loss(trace.w_sampled[t], trace.states[t], loss)
        for t in instants]))


def build_corpus(config: ScenarioConfig, realizations: int,
                 eta: float = 0.01, window: int | None = None,
                 gamma: float = 1.0, candidate_ceiling: int = 10_000,
                 loss_kind: str = "mlp") -> TrainingCorpus:
    """Exhaustively label small network realizations with their best sampling.

    For every candidate size-S subset of each realization, optimizes
    offloading, runs FedL for one aggregation window, and records the subset
    achieving the smallest time-averaged global loss.
    """
    n, budget = config.n_devices, config.sample_budget
    n_candidates = math.comb(n, budget)
    if n_candidates > candidate_ceiling:
        raise GcnError(
            f"C({n},{budget}) = {n_candidates} exceeds candidate ceiling "
            f"{candidate_ceiling}")
    steps = config.agg_period if window is None else window
    corpus = TrainingCorpus()
    for e in range(realizations):
        cfg_e = replace(config, rng_seed=config.rng_seed + 7919 * e)
        net = generate_scenario(cfg_e)
        loss = make_loss(loss_kind, cfg_e.feature_dim,
                         num_classes=cfg_e.num_labels)
        best_ids, best_obj = None, float("inf")
        for ids in itertools.combinations(range(n), budget):
            obj = evaluate_sampling(net, ids, loss, eta, config.agg_period,
                                    steps, gamma, seed=cfg_e.rng_seed)
            if obj < best_obj:
                best_ids, best_obj = ids, obj
        inp = build_gcn_input(net)
        target = np.zeros(n, dtype=bool)
        target[list(best_ids)] = True
        corpus.samples.append(CorpusSample(
            features=inp.features, augmented=inp.augmented, target=target,
            budget=budget, seed=cfg_e.rng_seed, objective=best_obj))
        logger.debug("corpus realization %d: best=%s obj=%.5f", e, best_ids, best_obj)
    return corpus


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _corpus_loss_and_grads(model: GcnModel, corpus: TrainingCorpus):
    total = 0.0
    dq1 = np.zeros_like(model.q1)
    dq2 = np.zeros_like(model.q2)
    for s in corpus.samples:
        op = _normalized_operator(s.augmented)
        scaled = (s.features - model.feature_shift) / model.feature_scale
        pre1 = op @ scaled
        z1 = pre1 @ model.q1
        h1 = np.maximum(z1, 0.0)
        pre2 = op @ h1
        z2 = (pre2 @ model.q2).ravel()
        logp = _log_softmax(z2)
        total += -float(logp[s.target].sum())

        probs = np.exp(logp)
        dz2 = s.budget * probs - s.target.astype(float)
        dq2 += pre2.T @ dz2[:, None]
        dh1 = (op.T @ dz2[:, None]) @ model.q2.T
        dz1 = dh1 * (z1 > 0)
        dq1 += pre1.T @ dz1
    m = len(corpus.samples)
    return total / m, dq1 / m, dq2 / m


def train_gcn(corpus: TrainingCorpus, epochs: int = 300, lr: float = 0.05,
              hidden_dim: int = 16, seed: int = 0,
              model: GcnModel | None = None) -> GcnModel:
    """Fit GCN weights by full-batch gradient descent on the multi-hot
    negative log-likelihood, with backtracking so the loss never increases."""
    if not corpus.samples:
        raise GcnError("empty training corpus")
    if model is None:
        model = init_gcn(hidden_dim, np.random.default_rng(seed))
        stacked = np.concatenate([s.features for s in corpus.samples])
        model.feature_shift = stacked.mean(axis=0)
        scale = stacked.std(axis=0)
        model.feature_scale = np.where(scale > 1e-12, scale, 1.0)

    value, dq1, dq2 = _corpus_loss_and_grads(model, corpus)
    if not np.isfinite(value):
        raise GcnError("non-finite training loss at initialization")
    step = lr
    for epoch in range(epochs):
        if lr == 0.0:
            break
        while True:
            cand = GcnModel(q1=model.q1 - step * dq1, q2=model.q2 - step * dq2,
                            feature_shift=model.feature_shift,
                            feature_scale=model.feature_scale)
            cand_value, cand_dq1, cand_dq2 = _corpus_loss_and_grads(cand, corpus)
            if cand_value <= value or step < 1e-14:
                break
            step *= 0.5
        if cand_value > value:
            break  # no descent direction progress at float resolution
        if not np.isfinite(cand_value):
            raise GcnError(f"training diverged at epoch {epoch}")
        model, value, dq1, dq2 = cand, cand_value, cand_dq1, cand_dq2
        step = min(step * 1.2, 10.0 * lr if lr > 0 else step)
    logger.debug("train_gcn final loss %.6f", value)
    return model


# ---------------------------------------------------------------------------
# Branch-based selection
# ---------------------------------------------------------------------------

def _top_fraction(values: np.ndarray, candidates: np.ndarray,
                  fraction: float = 0.02) -> np.ndarray:
    """Indices of the top max(1, ceil(fraction * count)) candidates by value,
    ties broken toward lower index."""
    count = len(candidates)
    keep = max(1, math.ceil(fraction * count))
    order = sorted(candidates, key=lambda i: (-values[i], i))
    return np.array(order[:keep], dtype=int)


def _percentile_band(values: np.ndarray, candidates: np.ndarray,
                     quantile: float = 0.98) -> np.ndarray:
    """Candidates whose value reaches the given quantile of the candidate
    values, ties included (so equally-most-dissimilar nodes all qualify)."""
    vals = values[candidates]
    threshold = np.quantile(vals, quantile)
    keep = candidates[vals >= threshold - 1e-12]
    if len(keep) == 0:
        keep = _top_fraction(values, candidates)
    return keep


def gcn_branch_select(probs: np.ndarray, net: NetworkState,
                      budget: int) -> SamplingDecision:
    """Walk the similarity graph from a high-data, high-probability seed,
    repeatedly picking the highest-probability node among the most dissimilar
    neighbors of the last pick, until the budget is filled."""
    n = net.n_devices
    if budget > n:
        raise GcnError(f"budget {budget} exceeds device count {n}")
    probs = np.asarray(probs, dtype=float)
    if probs.shape != (n,):
        raise GcnError(f"probability vector shape {probs.shape} != ({n},)")
    if budget == n:
        return SamplingDecision.from_ids(range(n), n)

    counts = net.data_counts()
    elite = _top_fraction(counts, np.arange(n))
    chosen: list[int] = []

    def fallback() -> int:
        pool = [i for i in elite if i not in chosen]
        if not pool:
            pool = [i for i in range(n) if i not in chosen]
        return max(pool, key=lambda i: (probs[i], -i))

    current = int(max(elite, key=lambda i: (probs[i], -i)))
    chosen.append(current)
    while len(chosen) < budget:
        nbrs = np.flatnonzero(net.adjacency[current] > 0)
        nxt = None
        if len(nbrs):
            dissim = 1.0 - net.conn_similarity[current]
            branch = _percentile_band(dissim, nbrs)
            open_branch = [int(j) for j in branch if j not in chosen]
            if open_branch:
                nxt = max(open_branch, key=lambda j: (probs[j], -j))
        if nxt is None:
            nxt = int(fallback())
        chosen.append(nxt)
        current = nxt
    return SamplingDecision.from_ids(sorted(chosen), n, budget=budget)
