"""Numerical evaluation of the convergence bounds on simulation traces.

Everything here is offline analysis: the sampled-versus-full gradient gap, the
per-device gradient-divergence bounds, the in-period parameter-divergence
bound, and the loss-gap bound with its two-term Taylor surrogate. Evaluations
follow the step convention of the dynamics: the quantities attributed to step
y use the parameters entering the step and the datasets the step trained on.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import LogisticLoss, QuadraticLoss
from .network import NetworkState
from .training import SimulationTrace, global_grad, global_loss

BOUND_REPORT_SCHEMA = "fedoff/bounds-v1"


class BoundError(ValueError):
    pass


@dataclass
class BoundParams:
    """Constants entering the bound formulas."""

    lipschitz: float            # L, for the loss values
    smoothness: float           # beta, for the gradients
    eta: float                  # gradient step size; eta * beta <= 1 required
    gamma: float = 1.0          # statistical constant in the delta_i bound
    loss_floor: float = 1e-12   # epsilon, lower bound on observed loss gaps
    xi: float = 1.0             # min inverse squared sync-point distance to optimum
    similarity_epsilon: float | None = None  # documentation link to the network model

    def __post_init__(self):
        if self.eta * self.smoothness > 1.0 + 1e-12:
            raise BoundError(
                f"eta * beta = {self.eta * self.smoothness:.6g} exceeds 1")


def _device_grads(state: NetworkState, w: np.ndarray, loss) -> list[np.ndarray]:
    return [loss.grad(w, d.features, d.labels) for d in state.devices]


def compute_zeta(trace: SimulationTrace, loss, t: int,
                 w: np.ndarray | None = None,
                 state: NetworkState | None = None) -> np.ndarray:
    """Gap between the sampled-weighted mean gradient and the full-network
    mean gradient, both at parameters ``w`` (default: the sampled aggregate at
    step t) on the datasets at step t."""
    state = trace.states[t] if state is None else state
    w = trace.w_sampled[t] if w is None else w
    ids = trace.sampled_ids
    if not ids:
        raise BoundError("empty sampled set")
    counts = state.data_counts()
    grads = _device_grads(state, w, loss)
    g_s = sum(counts[i] * grads[i] for i in ids)
    d_s = counts[list(ids)].sum()
    full = sum(counts[i] * grads[i] for i in range(state.n_devices))
    d_n = counts.sum()
    return g_s / d_s - full / d_n


@dataclass
class DeltaTerms:
    deficit: float      # (D_N - D_S)/D_N * |mean sampled gradient|
    statistical: float  # gamma / sqrt(D_i)
    unsampled: float    # |C|, unsampled gradient mass

    @property
    def total(self) -> float:
        return self.deficit + self.statistical + self.unsampled


def compute_delta_i(trace: SimulationTrace, loss, t: int, i: int,
                    gamma: float, w: np.ndarray | None = None,
                    state: NetworkState | None = None) -> DeltaTerms:
    """Per-device gradient-divergence bound delta_i at step t."""
    state = trace.states[t] if state is None else state
    w = trace.w_sampled[t] if w is None else w
    ids = trace.sampled_ids
    if i not in ids:
        raise BoundError(f"device {i} is not sampled")
    counts = state.data_counts()
    if counts[i] <= 0:
        raise BoundError(f"device {i} has no data at t={t}")
    grads = _device_grads(state, w, loss)
    d_s = counts[list(ids)].sum()
    d_n = counts.sum()
    mean_sampled = sum(counts[j] * grads[j] for j in ids) / d_s
    unsampled_ids = [j for j in range(state.n_devices) if j not in ids]
    c_vec = sum((counts[j] * grads[j] for j in unsampled_ids),
                np.zeros_like(w)) / d_n
    return DeltaTerms(
        deficit=float((d_n - d_s) / d_n * np.linalg.norm(mean_sampled)),
        statistical=float(gamma / math.sqrt(counts[i])),
        unsampled=float(np.linalg.norm(c_vec)),
    )


def prop1_lhs(trace: SimulationTrace, loss, t: int, i: int,
              w: np.ndarray | None = None,
              state: NetworkState | None = None) -> float:
    """Left side of the per-device divergence inequality at step t."""
    state = trace.states[t] if state is None else state
    w = trace.w_sampled[t] if w is None else w
    zeta = compute_zeta(trace, loss, t, w=w, state=state)
    dev = state.devices[i]
    gi = loss.grad(w, dev.features, dev.labels)
    gn = global_grad(w, state, loss)
    return float(np.linalg.norm(gi - gn - zeta))


def delta_sampled(trace: SimulationTrace, loss, t: int, gamma: float,
                  w: np.ndarray | None = None,
                  state: NetworkState | None = None) -> float:
    """Data-weighted aggregate of the per-device bounds (exact sum-of-ratios
    form)."""
    state = trace.states[t] if state is None else state
    counts = state.data_counts()
    ids = trace.sampled_ids
    num = sum(counts[i] * compute_delta_i(trace, loss, t, i, gamma,
                                          w=w, state=state).total
              for i in ids)
    return float(num / counts[list(ids)].sum())


def _step_zeta_norm(trace: SimulationTrace, loss, y: int) -> float:
    # Step-y convention: parameters entering the step, datasets trained on.
    return float(np.linalg.norm(
        compute_zeta(trace, loss, y, w=trace.w_sampled[y - 1],
                     state=trace.states[y])))


def _step_delta_sampled(trace: SimulationTrace, loss, y: int, gamma: float) -> float:
    return delta_sampled(trace, loss, y, gamma, w=trace.w_sampled[y - 1],
                         state=trace.states[y])


def upsilon(trace: SimulationTrace, loss, y: int, k: int, gamma: float) -> float:
    """Divergence accumulator for step y of period k."""
    growth = 2.0 ** (y - 1 - (k - 1) * trace.tau) - 1.0
    if growth == 0.0:
        return 0.0
    return _step_delta_sampled(trace, loss, y, gamma) * growth


def theorem1_bound(trace: SimulationTrace, loss, params: BoundParams,
                   t: int) -> float:
    """In-period upper bound on the sampled-versus-centralized parameter
    divergence at step t."""
    tau = trace.tau
    k = math.ceil(t / tau)
    if not ((k - 1) * tau < t <= k * tau):
        raise BoundError(f"t={t} outside aggregation period {k}")
    total = 0.0
    for y in range((k - 1) * tau + 1, t + 1):
        total += upsilon(trace, loss, y, k, params.gamma)
        total += _step_zeta_norm(trace, loss, y)
    return total / params.smoothness


def observed_divergence(trace: SimulationTrace, t: int) -> float:
    if trace.v_central is None:
        raise BoundError("trace has no centralized reference")
    return float(np.linalg.norm(trace.w_sampled[t] - trace.v_central[t]))


def upsilon_hat(trace: SimulationTrace, loss, k_hat: int, gamma: float) -> float:
    """Accumulated divergence over the last completed aggregation period."""
    if k_hat < 1:
        return 0.0
    tau = trace.tau
    total = 0.0
    for y in range((k_hat - 1) * tau + 1, k_hat * tau + 1):
        total += upsilon(trace, loss, y, k_hat, gamma)
        total += _step_zeta_norm(trace, loss, y)
    return total


# ---------------------------------------------------------------------------
# Optimum and trace-derived constants
# ---------------------------------------------------------------------------

def minimizer(state: NetworkState, loss, tol: float = 1e-10,
              max_iters: int = 200_000) -> np.ndarray:
    """Global minimizer of the network loss: normal equations for quadratic,
    long-run gradient descent for logistic."""
    counts = state.data_counts()
    d_n = counts.sum()
    if isinstance(loss, QuadraticLoss):
        dim = loss.param_dim
        gram = np.zeros((dim, dim))
        rhs = np.zeros(dim)
        for dev, d in zip(state.devices, counts):
            if d <= 0:
                continue
            weight = d / (d_n * len(dev.labels))
            gram += weight * dev.features.T @ dev.features
            rhs += weight * dev.features.T @ dev.labels
        return np.linalg.lstsq(gram, rhs, rcond=None)[0]
    if isinstance(loss, LogisticLoss):
        w = np.zeros(loss.param_dim)
        stacked = np.concatenate([d.features for d in state.devices])
        beta = _power_iteration(stacked.T @ stacked / len(stacked)) / 4.0
        step = 1.0 / max(beta, 1e-12)
        for _ in range(max_iters):
            g = global_grad(w, state, loss)
            if np.linalg.norm(g) < tol:
                break
            w = w - step * g
        return w
    raise BoundError(f"no minimizer routine for loss kind {loss.kind!r}")


def xi_from_trace(trace: SimulationTrace, w_star: np.ndarray,
                  through_step: int | None = None) -> float:
    """Smallest inverse squared distance from a synchronization point to the
    optimum."""
    end = trace.steps if through_step is None else through_step
    sync_times = [0] + [t for t in range(1, end + 1) if t % trace.tau == 0]
    worst = max(float(np.linalg.norm(trace.w_sampled[t] - w_star)) ** 2
                for t in sync_times)
    return 1.0 / max(worst, 1e-12)


def loss_floor_from_trace(trace: SimulationTrace, loss,
                          w_stars: list[np.ndarray]) -> float:
    """Half the smallest observed loss gap (sampled and reference models)."""
    gaps = []
    for t in range(1, trace.steps + 1):
        state = trace.states[t]
        f_star = global_loss(w_stars[t], state, loss)
        gaps.append(global_loss(trace.w_sampled[t], state, loss) - f_star)
        if trace.v_central is not None:
            gaps.append(global_loss(trace.v_central[t], state, loss) - f_star)
    return max(0.5 * min(gaps), 1e-12)


@dataclass
class CorollaryResult:
    t: int
    k_hat: int
    upsilon_hat: float
    denominator: float
    bound: float | None        # None when the bound is vacuous at t
    taylor: float | None
    loss_gap: float

    @property
    def vacuous(self) -> bool:
        return self.bound is None


def corollary1_bound(trace: SimulationTrace, loss, params: BoundParams,
                     t: int, w_star: np.ndarray) -> CorollaryResult:
    """Loss-gap bound at step t, with its two-term Taylor surrogate."""
    if t < 1:
        raise BoundError("corollary defined for t >= 1")
    k_hat = t // trace.tau
    up_hat = upsilon_hat(trace, loss, k_hat, params.gamma)
    a = t * params.xi * params.eta * (1.0 - params.smoothness * params.eta / 2.0)
    b = (k_hat + 1) * params.lipschitz / (params.smoothness * params.loss_floor ** 2)
    denom = a - b * up_hat
    state = trace.states[t]
    gap = global_loss(trace.w_sampled[t], state, loss) \
        - global_loss(w_star, state, loss)
    if denom <= 0:
        return CorollaryResult(t=t, k_hat=k_hat, upsilon_hat=up_hat,
                               denominator=denom, bound=None, taylor=None,
                               loss_gap=gap)
    taylor = 1.0 / a + b * up_hat / (a * a)
    return CorollaryResult(t=t, k_hat=k_hat, upsilon_hat=up_hat,
                           denominator=denom, bound=1.0 / denom, taylor=taylor,
                           loss_gap=gap)


# ---------------------------------------------------------------------------
# Smoothness constants
# ---------------------------------------------------------------------------

def _power_iteration(matrix: np.ndarray, iters: int = 2000,
                     tol: float = 1e-12) -> float:
    rng = np.random.default_rng(1)
    v = rng.normal(size=matrix.shape[0])
    v /= np.linalg.norm(v)
    value = 0.0
    for _ in range(iters):
        w = matrix @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        v_new = w / norm
        if abs(norm - value) <= tol * max(1.0, norm):
            return float(norm)
        value, v = norm, v_new
    return float(value)


def estimate_smoothness(loss, features: np.ndarray, labels: np.ndarray,
                        ball_radius: float = 10.0) -> tuple[float, float]:
    """(L, beta) for a convex loss on the given dataset.

    beta is the spectral norm of the mean Gram matrix (exact Hessian bound for
    the quadratic loss, the standard quarter bound for logistic). L bounds the
    loss's Lipschitz constant: over a parameter ball for quadratic, globally
    for logistic.
    """
    if getattr(loss, "convex", False) is not True:
        raise BoundError(f"smoothness estimation needs a convex loss, "
                         f"got {loss.kind!r}")
    n = len(labels)
    gram = features.T @ features / n
    spectral = _power_iteration(gram)
    if isinstance(loss, QuadraticLoss):
        beta = spectral
        lip = beta * ball_radius + float(np.linalg.norm(features.T @ labels / n))
        return lip, beta
    beta = spectral / 4.0
    lip = float(np.mean(np.linalg.norm(features, axis=1)))
    return lip, beta


def required_gamma(trace: SimulationTrace, loss) -> float:
    """Smallest constant making every per-device divergence bound hold on the
    trace, under both evaluation conventions used by the suite."""
    worst = 0.0
    ids = trace.sampled_ids
    for t in range(1, trace.steps + 1):
        for w in (trace.w_sampled[t], trace.w_sampled[t - 1]):
            state = trace.states[t]
            counts = state.data_counts()
            zeta = compute_zeta(trace, loss, t, w=w, state=state)
            gn = global_grad(w, state, loss)
            for i in ids:
                dev = state.devices[i]
                gi = loss.grad(w, dev.features, dev.labels)
                lhs = float(np.linalg.norm(gi - gn - zeta))
                terms = compute_delta_i(trace, loss, t, i, 0.0, w=w, state=state)
                need = (lhs - terms.deficit - terms.unsampled) \
                    * math.sqrt(counts[i])
                worst = max(worst, need)
    return worst


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class BoundEvaluation:
    """Per-step bound evaluations for one trace."""

    rows: list[dict] = field(default_factory=list)
    theorem_violations: int = 0
    prop1_violations: int = 0
    corollary_violations: int = 0


def evaluate_trace(trace: SimulationTrace, loss, params: BoundParams,
                   check_tol: float = 1e-9) -> BoundEvaluation:
    """Evaluate every bound at every step of a convex-loss trace."""
    if trace.v_central is None:
        raise BoundError("trace must be simulated with track_reference=True")
    w_stars = [minimizer(trace.states[t], loss) for t in range(trace.steps + 1)]
    eps = loss_floor_from_trace(trace, loss, w_stars)
    out = BoundEvaluation()
    for t in range(1, trace.steps + 1):
        k = math.ceil(t / trace.tau)
        div = observed_divergence(trace, t)
        th_bound = theorem1_bound(trace, loss, params, t)
        if div > th_bound + check_tol:
            out.theorem_violations += 1

        state = trace.states[t]
        for i in trace.sampled_ids:
            lhs = prop1_lhs(trace, loss, t, i)
            delta = compute_delta_i(trace, loss, t, i, params.gamma).total
            if lhs > delta + check_tol:
                out.prop1_violations += 1

        w_star = w_stars[t]
        params_t = BoundParams(
            lipschitz=params.lipschitz, smoothness=params.smoothness,
            eta=params.eta, gamma=params.gamma, loss_floor=eps,
            xi=xi_from_trace(trace, w_star, through_step=t),
            similarity_epsilon=params.similarity_epsilon)
        cor = corollary1_bound(trace, loss, params_t, t, w_star)
        if not cor.vacuous and cor.loss_gap > cor.bound + check_tol:
            out.corollary_violations += 1

        out.rows.append({
            "t": t,
            "k": k,
            "observed_divergence": div,
            "theorem1_bound": th_bound,
            "loss_gap": cor.loss_gap,
            "corollary1_bound": "" if cor.vacuous else cor.bound,
            "taylor_surrogate": "" if cor.vacuous else cor.taylor,
            "vacuous_flag": int(cor.vacuous),
        })
    return out


def write_bound_report(rows: list[dict], path: str | Path) -> None:
    fields = ["t", "k", "observed_divergence", "theorem1_bound", "loss_gap",
              "corollary1_bound", "taylor_surrogate", "vacuous_flag"]
    if rows and "run" in rows[0]:
        fields = ["run"] + fields
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {BOUND_REPORT_SCHEMA}\n")
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fields})
