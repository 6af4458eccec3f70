"""Similarity-aware D2D offloading optimizer.

Solves the per-timestep offloading subproblem as a convex program: the
objective trades the sampled-versus-network data deficit against the
statistical error at each sampled device, both decreasing in the useful data
received. With the connectivity-similarity state frozen at the previous step,
every constraint is affine in the offloading ratios, so the feasible region is
a polytope assembled from per-row capped simplices and budget half-spaces plus
per-column receive half-spaces. A projected-gradient method with Dykstra
projections solves each step.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .network import NetworkState, apply_offload_step, useful_coefficients
from .projections import dykstra
from .sampling import SamplingDecision

logger = logging.getLogger("fedoff.offload")

PLAN_SCHEMA_VERSION = 1


class OffloadError(RuntimeError):
    pass


@dataclass
class ObjectiveModel:
    """State of the offloading objective between aggregations."""

    sampling: SamplingDecision
    unsampled_mass: float          # total data held by unsampled devices (constant)
    grad_estimate: float           # current estimate of the mean gradient magnitude
    gamma: float = 1.0             # statistical-error constant
    alpha: float = 1.0 + 1e-6      # per-step gradient decay factor (> 1)
    alpha_max: float = 10.0
    last_observation: float = 0.0  # gradient magnitude at the last aggregation
    last_obs_time: int = 0

    def extrapolated(self, t: int) -> "ObjectiveModel":
        """Model with the gradient estimate advanced to time t."""
        steps = max(0, t - self.last_obs_time)
        est = self.last_observation / (self.alpha ** steps)
        return replace(self, grad_estimate=est)


def initial_objective_model(sampling: SamplingDecision, state: NetworkState,
                            grad_magnitude: float, gamma: float = 1.0,
                            alpha_max: float = 10.0) -> ObjectiveModel:
    counts = state.data_counts()
    return ObjectiveModel(
        sampling=sampling,
        unsampled_mass=float(counts[~sampling.mask].sum()),
        grad_estimate=grad_magnitude,
        gamma=gamma,
        alpha=1.0 + 1e-6,
        alpha_max=alpha_max,
        last_observation=grad_magnitude,
        last_obs_time=0,
    )


def update_gradient_estimate(model: ObjectiveModel, observed: float,
                             previous: float, t_observed: int,
                             tau: int) -> ObjectiveModel:
    """Refresh the decay factor after an aggregation.

    The per-step factor is the tau-th root of the ratio of consecutive
    observed gradient magnitudes, clamped into (1, alpha_max].
    """
    if observed <= 0 or previous <= 0:
        raise OffloadError(
            f"gradient magnitudes must be positive, got {previous}, {observed}")
    alpha = (previous / observed) ** (1.0 / tau)
    alpha = min(max(alpha, 1.0 + 1e-6), model.alpha_max)
    return replace(model, alpha=alpha, last_observation=observed,
                   last_obs_time=t_observed, grad_estimate=observed)


def objective(phi: np.ndarray, state: NetworkState, model: ObjectiveModel) -> float:
    """Offloading objective at one timestep.

    Deficit term: (D_N - D_S)/D_N times the gradient-magnitude estimate.
    Statistical term: mean over sampled devices of gamma / sqrt(D_i), with the
    post-offload effective counts.
    """
    counts = state.data_counts()
    useful = useful_coefficients(state)
    received = (np.asarray(phi, dtype=float) * useful).sum(axis=0)
    ids = model.sampling.ids
    d_new = counts[ids] + received[ids]
    if np.any(d_new <= 0):
        raise OffloadError("sampled device would have zero data")
    d_s = float(d_new.sum())
    d_n = d_s + model.unsampled_mass
    term_a = (model.unsampled_mass / d_n) * model.grad_estimate
    term_b = (model.gamma / len(ids)) * float(np.sum(1.0 / np.sqrt(d_new)))
    return term_a + term_b


# ---------------------------------------------------------------------------
# Feasibility checking
# ---------------------------------------------------------------------------

@dataclass
class ConstraintCheck:
    name: str
    satisfied: bool
    worst_slack: float
    detail: str = ""


@dataclass
class FeasibilityReport:
    checks: list[ConstraintCheck]
    tol: float

    @property
    def feasible(self) -> bool:
        return all(c.satisfied for c in self.checks)

    def violated(self) -> list[ConstraintCheck]:
        return [c for c in self.checks if not c.satisfied]

    def worst_slack(self) -> float:
        return min(c.worst_slack for c in self.checks)

    def summary(self) -> dict:
        return {c.name: {"satisfied": c.satisfied, "worst_slack": c.worst_slack}
                for c in self.checks}


def check_feasible(phi: np.ndarray, state: NetworkState,
                   sampling: SamplingDecision, tol: float = 1e-9) -> FeasibilityReport:
    """Evaluate every offloading constraint, reporting per-constraint slack.

    Always returns a report; slacks are (bound - value), so negative slack
    below -tol marks a violation.
    """
    phi = np.asarray(phi, dtype=float)
    n = state.n_devices
    x = sampling.mask.astype(float)
    counts = state.data_counts()
    useful = useful_coefficients(state)
    received = (phi * useful).sum(axis=0)
    checks: list[ConstraintCheck] = []

    def add(name: str, slacks: np.ndarray, detail: str = "") -> None:
        worst = float(np.min(slacks)) if np.size(slacks) else 0.0
        checks.append(ConstraintCheck(name=name, satisfied=worst >= -tol,
                                      worst_slack=worst, detail=detail))

    theta = np.array([d.recv_buffer for d in state.devices])
    add("receive-buffer (9)", theta - received)

    p = np.array([d.proc_cost for d in state.devices])
    cap = np.array([d.proc_capacity for d in state.devices])
    add("processing (10)", cap - p * (counts + received))

    spend = np.array([counts[k] * float((phi[k] * x) @ state.devices[k].tx_cost)
                      for k in range(n)])
    budgets = np.array([d.tx_budget for d in state.devices])
    add("transmit-budget (11)", budgets - spend)

    add("row-sum (12)", 1.0 - phi.sum(axis=1))

    pair = (1.0 - x)[None, :] * (1.0 - x)[:, None] * phi
    add("support-unsampled-pair (13)", -np.abs(pair).ravel())

    add("support-sampled-sender (14)", -np.abs(x[:, None] * phi).ravel())

    add("support-adjacency (15)", -np.abs((1.0 - state.adjacency) * phi).ravel())

    add("sample-size (16)", np.array([-abs(sampling.size - sampling.budget)]),
        detail=f"|S|={sampling.size}, budget={sampling.budget}")

    add("phi-nonneg (17)", phi.ravel())
    lam = state.conn_similarity
    add("lambda-bounds (17)", np.concatenate([lam.ravel(), 1.0 - lam.ravel()]))
    return FeasibilityReport(checks=checks, tol=tol)


# ---------------------------------------------------------------------------
# Per-timestep solver
# ---------------------------------------------------------------------------

@dataclass
class SolverOptions:
    max_iters: int = 10_000
    grad_map_tol: float = 1e-8
    dykstra_cycles: int = 120
    dykstra_tol: float = 1e-13
    initial_step: float = 1.0


def _batched_capped_simplex(v: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Project each row of ``v`` (valid entries per ``mask``) onto
    {w >= 0, sum(w) <= 1}, vectorized over rows."""
    w = np.where(mask, np.maximum(v, 0.0), 0.0)
    need = w.sum(axis=1) > 1.0
    if not np.any(need):
        return w
    padded = np.where(mask, v, -np.inf)
    u = -np.sort(-padded, axis=1)
    finite = np.isfinite(u)
    css = np.cumsum(np.where(finite, u, 0.0), axis=1)
    ranks = np.arange(1, v.shape[1] + 1)[None, :]
    cond = np.where(finite, u * ranks > css - 1.0, False)
    rho = cond.shape[1] - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = (np.take_along_axis(css, rho[:, None], axis=1).ravel() - 1.0) \
        / (rho + 1.0)
    simplex = np.where(mask, np.maximum(v - theta[:, None], 0.0), 0.0)
    return np.where(need[:, None], simplex, w)


def _batched_row_halfspace(v: np.ndarray, coeff: np.ndarray,
                           bound: np.ndarray) -> np.ndarray:
    """Project rows onto {w : coeff_row . w <= bound_row}."""
    excess = np.einsum("rc,rc->r", coeff, v) - bound
    normsq = np.einsum("rc,rc->r", coeff, coeff)
    factor = np.where((excess > 0) & (normsq > 0), excess / np.maximum(normsq, 1e-300), 0.0)
    return v - factor[:, None] * coeff


@dataclass
class _Subproblem:
    """Offloading subproblem on the dense (senders x sampled-receivers) grid."""

    senders: np.ndarray      # device ids of the rows
    receivers: np.ndarray    # device ids of the columns
    mask: np.ndarray         # (R, C) validity of each edge
    useful: np.ndarray       # (R, C) useful-data coefficient, 0 where invalid
    base_counts: np.ndarray  # (C,) receiver data counts before this step
    extra_sampled: float     # data mass of sampled devices outside the grid
    n_sampled: int
    unsampled_mass: float
    grad_estimate: float
    gamma: float
    budget_coeff: np.ndarray  # (R, C) D_k * psi_{k,i}, 0 where invalid
    budget_bound: np.ndarray  # (R,)
    recv_bound: np.ndarray    # (C,)

    def counts_after(self, z: np.ndarray) -> np.ndarray:
        return self.base_counts + (self.useful * z).sum(axis=0)

    def value(self, z: np.ndarray) -> float:
        d = self.counts_after(z)
        d_s = float(d.sum()) + self.extra_sampled
        d_n = d_s + self.unsampled_mass
        return (self.unsampled_mass / d_n) * self.grad_estimate \
            + (self.gamma / self.n_sampled) * float(np.sum(1.0 / np.sqrt(d)))

    def grad(self, z: np.ndarray) -> np.ndarray:
        d = self.counts_after(z)
        d_s = float(d.sum()) + self.extra_sampled
        d_n = d_s + self.unsampled_mass
        coef_a = -self.unsampled_mass * self.grad_estimate / (d_n ** 2)
        coef_b = -(self.gamma / (2.0 * self.n_sampled)) * d ** (-1.5)
        return self.useful * (coef_a + coef_b[None, :])

    def project(self, z: np.ndarray, options: SolverOptions) -> np.ndarray:
        sets = [
            lambda v: _batched_capped_simplex(v, self.mask),
            lambda v: _batched_row_halfspace(v, self.budget_coeff,
                                             self.budget_bound),
            lambda v: _batched_row_halfspace(v.T, self.useful.T,
                                             self.recv_bound).T,
        ]
        return dykstra(z, sets, max_cycles=options.dykstra_cycles,
                       tol=options.dykstra_tol)

    def polish(self, z: np.ndarray) -> np.ndarray:
        """Uniform shrink so every affine constraint strictly holds."""
        z = np.where(self.mask, np.maximum(z, 0.0), 0.0)
        ratio = 1.0
        row_sums = z.sum(axis=1)
        ratio = max(ratio, float(row_sums.max(initial=0.0)))
        spend = np.einsum("rc,rc->r", self.budget_coeff, z)
        with np.errstate(divide="ignore", invalid="ignore"):
            over = np.where(self.budget_bound > 0, spend / self.budget_bound, 1.0)
        ratio = max(ratio, float(np.nanmax(over, initial=1.0)))
        got = np.einsum("rc,rc->c", self.useful, z)
        with np.errstate(divide="ignore", invalid="ignore"):
            over = np.where(self.recv_bound > 0, got / self.recv_bound, 1.0)
        ratio = max(ratio, float(np.nanmax(over, initial=1.0)))
        if ratio > 1.0:
            z = z / (ratio * (1.0 + 1e-12))
        return z


def receive_room(state: NetworkState) -> np.ndarray:
    """Per-device bound on received data from constraints (9) and (10)."""
    counts = state.data_counts()
    room = np.empty(state.n_devices)
    for i, dev in enumerate(state.devices):
        room[i] = dev.recv_buffer
        if dev.proc_cost > 0:
            room[i] = min(room[i], dev.proc_capacity / dev.proc_cost - counts[i])
    return room


def _build_subproblem(state: NetworkState, model: ObjectiveModel) -> _Subproblem | None:
    mask = model.sampling.mask
    counts = state.data_counts()
    room = receive_room(state)
    if np.any(room < -1e-9):
        bad = int(np.argmin(room))
        raise OffloadError(
            f"infeasible polytope: device {bad} violates processing capacity (10) "
            f"before offloading")
    useful = useful_coefficients(state)

    free = (~mask[:, None]) & mask[None, :] & (state.adjacency > 0) \
        & (useful > 0) & (room[None, :] > 0)
    senders = np.flatnonzero(free.any(axis=1))
    receivers = np.flatnonzero(free.any(axis=0))
    if len(senders) == 0:
        return None

    grid_mask = free[np.ix_(senders, receivers)]
    grid_useful = np.where(grid_mask, useful[np.ix_(senders, receivers)], 0.0)
    psi = np.array([state.devices[int(k)].tx_cost[receivers] for k in senders])
    budget_coeff = np.where(grid_mask, counts[senders][:, None] * psi, 0.0)
    ids = model.sampling.ids
    receiver_set = set(int(i) for i in receivers)
    off_grid = [i for i in ids if i not in receiver_set]
    return _Subproblem(
        senders=senders,
        receivers=receivers,
        mask=grid_mask,
        useful=grid_useful,
        base_counts=counts[receivers],
        extra_sampled=float(counts[off_grid].sum()) if off_grid else 0.0,
        n_sampled=len(ids),
        unsampled_mass=model.unsampled_mass,
        grad_estimate=model.grad_estimate,
        gamma=model.gamma,
        budget_coeff=budget_coeff,
        budget_bound=np.array([state.devices[int(k)].tx_budget
                               for k in senders], dtype=float),
        recv_bound=room[receivers],
    )


def solve_timestep(state: NetworkState, model: ObjectiveModel,
                   sampling: SamplingDecision | None = None,
                   options: SolverOptions | None = None,
                   warm_start: np.ndarray | None = None) -> np.ndarray:
    """Minimize the offloading objective over the per-step polytope.

    Projected gradient descent with backtracking; Dykstra projections onto the
    row simplices, budget half-spaces, and receive half-spaces. Stops at
    gradient-mapping norm below tolerance or the iteration cap.
    """
    if sampling is not None and sampling is not model.sampling:
        model = replace(model, sampling=sampling)
    if options is None:
        options = SolverOptions()
    n = state.n_devices
    sub = _build_subproblem(state, model)
    phi = np.zeros((n, n))
    if sub is None:
        return phi

    if warm_start is not None:
        z = sub.project(warm_start[np.ix_(sub.senders, sub.receivers)]
                        * sub.mask, options)
    else:
        z = np.zeros(sub.mask.shape)
    step = options.initial_step
    fz = sub.value(z)
    for it in range(options.max_iters):
        g = sub.grad(z)
        while True:
            cand = sub.project(z - step * g, options)
            delta = cand - z
            quad = fz + float((g * delta).sum()) \
                + float((delta * delta).sum()) / (2.0 * step)
            f_cand = sub.value(cand)
            if f_cand <= quad + 1e-15 or step < 1e-14:
                break
            step *= 0.5
        moved = float(np.linalg.norm(cand - z))
        z, fz = cand, f_cand
        if moved / step < options.grad_map_tol:
            logger.debug("solve_timestep converged in %d iterations", it + 1)
            break
        step = min(step * 1.3, 1e6)

    z = sub.polish(z)
    phi[np.ix_(sub.senders, sub.receivers)] = z
    return phi


# ---------------------------------------------------------------------------
# Horizon solver
# ---------------------------------------------------------------------------

@dataclass
class OffloadPlan:
    """Time-indexed offloading ratios with feasibility metadata."""

    phis: list[np.ndarray]
    objective_value: float
    feasibility: list[FeasibilityReport] = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return len(self.phis)

    def feasible(self) -> bool:
        return all(r.feasible for r in self.feasibility)

    def save(self, path: str | Path) -> None:
        payload = {
            "schema_version": PLAN_SCHEMA_VERSION,
            "kind": "fedoff-plan",
            "objective_value": self.objective_value,
            "steps": [
                {
                    "t": t + 1,
                    "triplets": [[int(k), int(i), float(phi[k, i])]
                                 for k, i in zip(*np.nonzero(phi))],
                    "n": int(phi.shape[0]),
                }
                for t, phi in enumerate(self.phis)
            ],
            "feasible": self.feasible() if self.feasibility else None,
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "OffloadPlan":
        payload = json.loads(Path(path).read_text())
        if payload.get("kind") != "fedoff-plan":
            raise OffloadError(f"not an offload plan file: {path}")
        phis = []
        for step in payload["steps"]:
            phi = np.zeros((step["n"], step["n"]))
            for k, i, val in step["triplets"]:
                phi[k, i] = val
            phis.append(phi)
        return cls(phis=phis, objective_value=payload["objective_value"])


def solve_horizon(net: NetworkState, model: ObjectiveModel,
                  sampling: SamplingDecision, horizon: int, tau: int,
                  rng: np.random.Generator | None = None,
                  step_hook=None,
                  options: SolverOptions | None = None) -> OffloadPlan:
    """Plan offloading over t = 1..horizon by chaining per-step solves.

    ``step_hook(state, t)``, when given, is called after each offloading
    application; a non-None return value at an aggregation instant is treated
    as the observed mean-gradient magnitude and refreshes the decay factor.
    Without a hook the gradient estimate follows pure extrapolation.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    state = net
    phis: list[np.ndarray] = []
    reports: list[FeasibilityReport] = []
    realized = 0.0
    model = replace(model, sampling=sampling)
    for t in range(1, horizon + 1):
        model_t = model.extrapolated(t)
        phi = solve_timestep(state, model_t, options=options)
        report = check_feasible(phi, state, sampling)
        realized += objective(phi, state, model_t)
        state = apply_offload_step(state, phi, rng=rng)
        phis.append(phi)
        reports.append(report)
        if step_hook is not None:
            observed = step_hook(state, t)
            if observed is not None and t % tau == 0:
                model = update_gradient_estimate(
                    model, observed, model.last_observation, t, tau)
    objective_value = realized / horizon if horizon > 0 else 0.0
    return OffloadPlan(phis=phis, objective_value=objective_value,
                       feasibility=reports)


class OptimizedOffload:
    """Simulation-loop policy wrapping the per-step convex solver."""

    def __init__(self, sampling: SamplingDecision, gamma: float = 1.0,
                 alpha_max: float = 10.0, options: SolverOptions | None = None):
        self.sampling = sampling
        self.gamma = gamma
        self.alpha_max = alpha_max
        self.options = options
        self.model: ObjectiveModel | None = None
        self._last_phi: np.ndarray | None = None

    def plan(self, state: NetworkState, t: int) -> np.ndarray:
        if self.model is None:
            raise OffloadError("policy used before the initial gradient observation")
        phi = solve_timestep(state, self.model.extrapolated(t),
                             options=self.options, warm_start=self._last_phi)
        self._last_phi = phi
        return phi

    def observe(self, state: NetworkState, t: int, grad_mag: float) -> None:
        grad_mag = max(float(grad_mag), 1e-12)
        if self.model is None:
            self.model = initial_objective_model(
                self.sampling, state, grad_mag, gamma=self.gamma,
                alpha_max=self.alpha_max)
        else:
            self.model = update_gradient_estimate(
                self.model, grad_mag, self.model.last_observation, t,
                max(t - self.model.last_obs_time, 1))
