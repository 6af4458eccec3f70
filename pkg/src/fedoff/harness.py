"""Experiment driver: builds scenarios, runs every sampling/offloading scheme,
computes the accuracy / aggregations-to-threshold / datapoints-processed
metrics, runs the convex bound fleet, and writes versioned CSV reports.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace, asdict
from pathlib import Path

import numpy as np

from . import bounds as bounds_mod
from .baselines import (GreedyOffload, RandomOffload, SchemeSpec, sample_all,
                        sample_heuristic, sample_random)
from .gcn import GcnModel, build_corpus, build_gcn_input, gcn_branch_select, \
    gcn_forward, train_gcn
from .losses import make_loss
from .network import ScenarioConfig, SyntheticTask, generate_scenario
from .offload import OptimizedOffload
from .sampling import SamplingDecision
from .training import SimulationTrace, ZeroOffload, simulate_fedl

logger = logging.getLogger("fedoff.harness")

RESULT_SCHEMA_VERSION = 1

SCHEME_NAMES = {
    "smart": SchemeSpec("smart", "none"),
    "smart_offload": SchemeSpec("smart", "optimized"),
    "random": SchemeSpec("random", "none"),
    "random_offload": SchemeSpec("random", "random"),
    "heuristic": SchemeSpec("heuristic", "none"),
    "heuristic_offload": SchemeSpec("heuristic", "greedy"),
    "all_nodes": SchemeSpec("all_nodes", "none"),
}

_KIND_CODE = {"smart": 11, "random": 12, "heuristic": 13, "all_nodes": 14,
              "optimized": 21, "random_off": 22, "greedy": 23, "none": 24}

# Statistical constant for the convex bound fleet; dominates the calibrated
# per-trace requirement (max 1.3 across the fleet) with ~4x margin.
FLEET_GAMMA = 5.0


@dataclass
class ExperimentConfig:
    """Scenario plus training and sampler hyperparameters."""

    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    eta: float = 0.01
    test_size: int = 400
    gamma: float = 1.0          # offloading-objective statistical weight
    mlp_hidden: int = 16
    gcn_hidden: int = 16
    gcn_epochs: int = 300
    gcn_lr: float = 0.05
    corpus_realizations: int = 20
    corpus_devices: int = 10
    corpus_link_prob: float | None = None  # default: denser than the target net
    corpus_window: int | None = None       # FedL steps per candidate; default tau
    threshold_fraction: float = 0.6

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scenario"] = self.scenario.to_dict()
        d["schema_version"] = RESULT_SCHEMA_VERSION
        d["kind"] = "fedoff-experiment-config"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d.pop("schema_version", None)
        d.pop("kind", None)
        d["scenario"] = ScenarioConfig.from_dict(d["scenario"])
        return cls(**d)

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_config(seed: int = 0) -> ExperimentConfig:
    """Desk-scale default: 20 devices, 10-class blobs, 3 labels per device.

    Transfer budgets are deliberately scarce so that where data moves matters;
    class overlap keeps accuracy sensitive to per-class sample counts rather
    than bare label presence.
    """
    scenario = ScenarioConfig(
        n_devices=20,
        sample_budget=3,
        horizon=200,
        agg_period=5,
        link_prob=0.12,
        labels_per_device=3,
        num_labels=10,
        feature_dim=8,
        data_mean=40.0,
        similarity_epsilon=24.0,
        probe_size=20,
        rng_seed=seed,
        class_sep=9.0,
        feature_noise=3.0,
        capacity_headroom_range=(1.05, 6.0),
        recv_buffer_range=(2.0, 10.0),
        tx_budget_range=(2.0, 12.0),
    )
    return ExperimentConfig(scenario=scenario, test_size=2000,
                            corpus_window=20, corpus_realizations=20)


@dataclass
class ExperimentResult:
    """Outcome of one scheme on one scenario (averaged over repetitions for
    randomized schemes)."""

    scheme: str
    seed: int
    accuracy_curve: list[float]
    datapoints_curve: list[float]   # cumulative datapoints processed per aggregation
    sampled_sets: list[list[int]]
    repetitions: int
    traces: list[SimulationTrace] | None = None  # kept only on request

    @property
    def final_accuracy(self) -> float:
        return self.accuracy_curve[-1] if self.accuracy_curve else float("nan")

    def to_dict(self) -> dict:
        return {
            "schema_version": RESULT_SCHEMA_VERSION,
            "kind": "fedoff-result",
            "scheme": self.scheme,
            "seed": self.seed,
            "accuracy_curve": self.accuracy_curve,
            "datapoints_curve": self.datapoints_curve,
            "sampled_sets": self.sampled_sets,
            "repetitions": self.repetitions,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentResult":
        return cls(scheme=d["scheme"], seed=d["seed"],
                   accuracy_curve=d["accuracy_curve"],
                   datapoints_curve=d["datapoints_curve"],
                   sampled_sets=d["sampled_sets"],
                   repetitions=d["repetitions"])


def train_smart_sampler(config: ExperimentConfig,
                        realizations: int | None = None) -> GcnModel:
    """Train GCN weights on small exhaustively-labeled network realizations."""
    scen = config.scenario
    link = config.corpus_link_prob
    if link is None:
        # Keep expected degree comparable to the target network.
        link = min(1.0, scen.link_prob * scen.n_devices / config.corpus_devices)
    window = config.corpus_window or scen.agg_period
    corpus_cfg = replace(
        scen,
        n_devices=config.corpus_devices,
        link_prob=link,
        horizon=max(window, scen.agg_period),
        rng_seed=scen.rng_seed ^ 0xC09B,
    )
    corpus = build_corpus(
        corpus_cfg,
        realizations=config.corpus_realizations if realizations is None
        else realizations,
        eta=config.eta,
        window=window,
        gamma=config.gamma,
    )
    return train_gcn(corpus, epochs=config.gcn_epochs, lr=config.gcn_lr,
                     hidden_dim=config.gcn_hidden, seed=scen.rng_seed)


def select_devices(config: ExperimentConfig, scheme: SchemeSpec,
                   net, gcn_model: GcnModel | None,
                   rep: int = 0) -> SamplingDecision:
    scen = config.scenario
    if scheme.sampling_kind == "smart":
        if gcn_model is None:
            raise ValueError("smart sampling requires trained GCN weights")
        probs = gcn_forward(gcn_model, build_gcn_input(net))
        return gcn_branch_select(probs, net, scen.sample_budget)
    if scheme.sampling_kind == "random":
        rng = np.random.default_rng(
            [scen.rng_seed, _KIND_CODE["random"], rep])
        return sample_random(net, scen.sample_budget, rng)
    if scheme.sampling_kind == "heuristic":
        return sample_heuristic(net, scen.sample_budget)
    return sample_all(net)


def _offload_policy(scheme: SchemeSpec, sampling: SamplingDecision,
                    config: ExperimentConfig, rep: int):
    scen = config.scenario
    if scheme.offload_kind == "optimized":
        return OptimizedOffload(sampling, gamma=config.gamma)
    if scheme.offload_kind == "random":
        rng = np.random.default_rng(
            [scen.rng_seed, _KIND_CODE["random_off"], rep])
        return RandomOffload(sampling, rng)
    if scheme.offload_kind == "greedy":
        return GreedyOffload(sampling)
    return ZeroOffload()


def run_experiment(config: ExperimentConfig, scheme: SchemeSpec,
                   gcn_model: GcnModel | None = None,
                   keep_traces: bool = False) -> ExperimentResult:
    """Run one scheme end to end; randomized schemes average over
    ``scheme.repetitions`` sampled sets."""
    scen = config.scenario
    net = generate_scenario(scen)
    task = SyntheticTask(scen)
    all_labels = np.concatenate([d.labels for d in net.devices])
    test_rng = np.random.default_rng([scen.rng_seed, 0x7E57])
    test_set = task.test_set(all_labels, config.test_size, test_rng)
    loss = make_loss("mlp", scen.feature_dim, num_classes=scen.num_labels,
                     hidden_dim=config.mlp_hidden)
    w0 = loss.init_params(np.random.default_rng([scen.rng_seed, 0x1817]))

    reps = scheme.repetitions if scheme.sampling_kind == "random" else 1
    curves, datapoints, sampled_sets, traces = [], [], [], []
    for rep in range(reps):
        sampling = select_devices(config, scheme, net, gcn_model, rep)
        policy = _offload_policy(scheme, sampling, config, rep)
        sim_rng = np.random.default_rng(
            [scen.rng_seed, _KIND_CODE[scheme.sampling_kind],
             _KIND_CODE[scheme.offload_kind], rep])
        trace = simulate_fedl(net, sampling.mask, loss, eta=config.eta,
                              tau=scen.agg_period, steps=scen.horizon,
                              policy=policy, rng=sim_rng, w0=w0,
                              test_set=test_set)
        k_count = scen.horizon // scen.agg_period
        curves.append(trace.accuracy_curve)
        datapoints.append([trace.datapoints_processed(k * scen.agg_period)
                           for k in range(1, k_count + 1)])
        sampled_sets.append(sampling.ids)
        if keep_traces:
            traces.append(trace)

    return ExperimentResult(
        scheme=scheme.name,
        seed=scen.rng_seed,
        accuracy_curve=np.mean(np.array(curves), axis=0).tolist(),
        datapoints_curve=np.mean(np.array(datapoints), axis=0).tolist(),
        sampled_sets=sampled_sets,
        repetitions=reps,
        traces=traces if keep_traces else None,
    )


def aggregations_to_threshold(result: ExperimentResult,
                              reference_accuracy: float) -> int | None:
    """1-based index of the first aggregation reaching the reference accuracy;
    None when never reached."""
    for k, acc in enumerate(result.accuracy_curve, start=1):
        if acc >= reference_accuracy:
            return k
    return None


def datapoints_to_threshold(result: ExperimentResult,
                            reference_accuracy: float) -> float | None:
    k = aggregations_to_threshold(result, reference_accuracy)
    if k is None:
        return None
    return result.datapoints_curve[k - 1]


def reference_accuracy(results: list[ExperimentResult],
                       fraction: float = 0.6) -> float:
    """Reference level: a fraction of the all-nodes ceiling (or of the best
    final accuracy when no all-nodes run is present)."""
    ceiling = None
    for r in results:
        if r.scheme == "all_nodes":
            ceiling = r.final_accuracy
    if ceiling is None:
        ceiling = max(r.final_accuracy for r in results)
    return fraction * ceiling


def report(results: list[ExperimentResult], out_dir: str | Path,
           threshold_fraction: float = 0.6,
           bound_rows: list[dict] | None = None) -> list[Path]:
    """Write the versioned CSV report files; returns the created paths."""
    if not results:
        raise ValueError("no results to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    reference = reference_accuracy(results, threshold_fraction)

    curves_path = out / "accuracy_curves.csv"
    with open(curves_path, "w", newline="") as fh:
        fh.write("# schema: fedoff/curves-v1\n")
        writer = csv.writer(fh)
        writer.writerow(["scheme", "aggregation", "accuracy",
                         "datapoints_processed"])
        for r in results:
            for k, (acc, dp) in enumerate(zip(r.accuracy_curve,
                                              r.datapoints_curve), start=1):
                writer.writerow([r.scheme, k, repr(float(acc)),
                                 repr(float(dp))])
    written.append(curves_path)

    summary_path = out / "summary.csv"
    with open(summary_path, "w", newline="") as fh:
        fh.write("# schema: fedoff/summary-v1\n")
        writer = csv.writer(fh)
        writer.writerow(["scheme", "final_accuracy", "reference_accuracy",
                         "aggregations_to_reference"])
        for r in results:
            k = aggregations_to_threshold(r, reference)
            writer.writerow([r.scheme, repr(float(r.final_accuracy)),
                             repr(float(reference)),
                             "-" if k is None else k])
    written.append(summary_path)

    datapoints_path = out / "datapoints.csv"
    with open(datapoints_path, "w", newline="") as fh:
        fh.write("# schema: fedoff/datapoints-v1\n")
        writer = csv.writer(fh)
        writer.writerow(["scheme", "reference_accuracy",
                         "datapoints_to_reference"])
        for r in results:
            dp = datapoints_to_threshold(r, reference)
            writer.writerow([r.scheme, repr(float(reference)),
                             "-" if dp is None else repr(float(dp))])
    written.append(datapoints_path)

    if bound_rows is not None:
        bounds_path = out / "bounds.csv"
        bounds_mod.write_bound_report(bound_rows, bounds_path)
        written.append(bounds_path)
    return written


# ---------------------------------------------------------------------------
# Convex bound fleet
# ---------------------------------------------------------------------------

@dataclass
class FleetRun:
    seed: int
    loss_kind: str
    tau: int
    n_devices: int
    evaluation: bounds_mod.BoundEvaluation
    required_gamma: float
    trace: SimulationTrace
    loss: object
    params: bounds_mod.BoundParams


def fleet_scenario(run_index: int, base_seed: int = 0) -> tuple[ScenarioConfig, str]:
    """Small convex-loss scenario for the bound fleet.

    Devices share one two-label pool so per-device gradients concentrate
    around the network gradient as datasets grow.
    """
    tau = 1 + run_index % 3
    n = 4 + run_index % 7
    loss_kind = "quadratic" if run_index % 2 == 0 else "logistic"
    cfg = ScenarioConfig(
        n_devices=n,
        sample_budget=max(1, n // 3),
        horizon=3 * tau,
        agg_period=tau,
        link_prob=0.5,
        labels_per_device=2,
        num_labels=2,
        feature_dim=3,
        data_mean=24.0,
        rng_seed=base_seed + 1000 + run_index,
        class_sep=1.0,
    )
    return cfg, loss_kind


def run_fleet_member(run_index: int, base_seed: int = 0,
                     gamma: float = FLEET_GAMMA,
                     eta_margin: float = 0.8) -> FleetRun:
    cfg, loss_kind = fleet_scenario(run_index, base_seed)
    net = generate_scenario(cfg)
    loss = make_loss(loss_kind, cfg.feature_dim)
    pooled_x = np.concatenate([d.features for d in net.devices])
    pooled_y = np.concatenate([d.labels for d in net.devices]).astype(float)
    lip, beta = bounds_mod.estimate_smoothness(loss, pooled_x, pooled_y)
    eta = eta_margin / beta

    samp_rng = np.random.default_rng([cfg.rng_seed, 77])
    sampling = sample_random(net, cfg.sample_budget, samp_rng)
    policy = OptimizedOffload(sampling, gamma=1.0)
    trace = simulate_fedl(net, sampling.mask, loss, eta=eta,
                          tau=cfg.agg_period, steps=cfg.horizon, policy=policy,
                          rng=np.random.default_rng([cfg.rng_seed, 78]),
                          track_reference=True)
    params = bounds_mod.BoundParams(lipschitz=lip, smoothness=beta, eta=eta,
                                    gamma=gamma,
                                    similarity_epsilon=cfg.resolved_epsilon)
    evaluation = bounds_mod.evaluate_trace(trace, loss, params)
    return FleetRun(seed=cfg.rng_seed, loss_kind=loss_kind, tau=cfg.agg_period,
                    n_devices=cfg.n_devices, evaluation=evaluation,
                    required_gamma=bounds_mod.required_gamma(trace, loss),
                    trace=trace, loss=loss, params=params)


def run_convex_fleet(n_runs: int = 50, base_seed: int = 0,
                     gamma: float = FLEET_GAMMA) -> list[FleetRun]:
    runs = [run_fleet_member(i, base_seed, gamma) for i in range(n_runs)]
    logger.info("fleet: %d runs, max required gamma %.3f", n_runs,
                max(r.required_gamma for r in runs))
    return runs


def fleet_bound_rows(runs: list[FleetRun]) -> list[dict]:
    rows = []
    for idx, run in enumerate(runs):
        for row in run.evaluation.rows:
            rows.append({"run": idx, **row})
    return rows
