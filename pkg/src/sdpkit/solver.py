"""Average-cost stochastic dynamic programming on rectangular grids.

Solves infinite-horizon, average-cost-per-stage control problems of the
form

    J + h(x) = min_u E_w [ cost(x, u, w) + h(f(x, u, w)) ]

on a `RectGrid`, with the differential value h represented as a
`GridFunction` (multilinear interpolation between nodes) and the scalar
noise expectation taken over a `DiscreteNoise` distribution.

All iteration is relative value iteration: after each sweep the value at
a fixed reference node is subtracted from the whole table, so the table
stays anchored at zero there, and the subtracted increment estimates the
average cost per stage.  Convergence is measured in the span seminorm
(max - min) of the sweep increment, which is invariant under the
anchoring shift.

Policy evaluation exploits that the stage costs and successor states are
fixed while the policy is fixed: the interpolation stencil of every
(node, noise) successor is assembled once into a sparse row-stochastic
matrix, and each evaluation sweep is a single matrix-vector product.

Determinism: identical inputs and configuration give bit-identical
results regardless of the `threads` setting, because nodes are
partitioned into chunks of a thread-independent size and every node's
reduction runs in a fixed order.  Problem callbacks must be pure and
thread-safe; node computations may run concurrently.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.special import ndtri

from .grids import GridFunction, RectGrid, interpolation_stencil, node_coordinates, save_grid_function

__all__ = [
    "DiscreteNoise",
    "ControlProblem",
    "SolverConfig",
    "EvaluationResult",
    "SolveReport",
    "DivergenceError",
    "discretize_noise",
    "bellman_sweep",
    "policy_evaluation",
    "policy_improvement",
    "policy_iteration",
    "value_iteration",
    "save_report",
]

WEIGHT_SUM_TOL = 1e-12

# Divergence guard: spans growing by this factor over this many sweeps abort.
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_WINDOW = 100


class DivergenceError(RuntimeError):
    """Raised when an iteration's span residuals grow instead of contracting."""

    def __init__(self, sweep: int, recent_spans: list[float]):
        self.sweep = sweep
        self.recent_spans = recent_spans
        super().__init__(
            f"span residual diverged by sweep {sweep}: "
            f"{recent_spans[0]:.6g} -> {recent_spans[-1]:.6g} "
            f"over the last {len(recent_spans) - 1} sweeps"
        )


@dataclass(frozen=True)
class DiscreteNoise:
    """Finite scalar noise distribution: support nodes with probabilities."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        nodes = np.ascontiguousarray(self.nodes, dtype=np.float64).reshape(-1)
        weights = np.ascontiguousarray(self.weights, dtype=np.float64).reshape(-1)
        if nodes.size < 1:
            raise ValueError("noise needs at least one node")
        if nodes.size != weights.size:
            raise ValueError(f"{nodes.size} nodes but {weights.size} weights")
        if not np.isfinite(nodes).all():
            raise ValueError("noise nodes must be finite")
        if np.any(weights < 0.0):
            raise ValueError("noise weights must be nonnegative")
        if abs(math.fsum(weights.tolist()) - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError(f"noise weights must sum to 1, got {math.fsum(weights.tolist())}")
        nodes.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @property
    def n(self) -> int:
        return self.nodes.size


_SQRT_2PI = math.sqrt(2.0 * math.pi)


def discretize_noise(std: float, n_nodes: int) -> DiscreteNoise:
    """Equal-probability discretization of a centred normal distribution.

    Splits N(0, std^2) into ``n_nodes`` strata of probability 1/n and
    places one node at each stratum's conditional mean,
    node_k = n * std * (pdf(a_k) - pdf(b_k)) for stratum (a_k, b_k) of
    the standard normal.  Node positions are mirrored around zero so the
    discrete mean vanishes exactly.
    """
    if not (math.isfinite(std) and std >= 0.0):
        raise ValueError(f"std must be finite and >= 0, got {std}")
    if n_nodes < 1:
        raise ValueError(f"need at least one node, got {n_nodes}")
    if std == 0.0 or n_nodes == 1:
        return DiscreteNoise(np.zeros(n_nodes), np.full(n_nodes, 1.0 / n_nodes))

    edges = ndtri(np.arange(n_nodes + 1) / n_nodes)  # edges[0], edges[-1] infinite
    pdf = np.exp(-0.5 * np.square(edges)) / _SQRT_2PI  # exp(-inf) -> 0 at the tails
    nodes = std * n_nodes * (pdf[:-1] - pdf[1:])
    half = n_nodes // 2
    nodes[n_nodes - 1 - np.arange(half)] = -nodes[:half]
    if n_nodes % 2 == 1:
        nodes[half] = 0.0
    return DiscreteNoise(nodes, np.full(n_nodes, 1.0 / n_nodes))


@dataclass
class ControlProblem:
    """A stationary control problem on a continuous state space.

    The callbacks are batch-oriented: for ``m`` evaluation points,
    ``dynamics(x, u, w)`` and ``stage_cost(x, u, w)`` receive
    ``x (m, state_dim)``, ``u (m, control_dim)`` and ``w (m,)`` arrays
    and return ``(m, state_dim)`` next states / ``(m,)`` costs.  They
    must be pure and thread-safe.

    ``control_candidates(x)`` maps one state point to the ordered,
    de-duplicated array of admissible control points there, shape
    ``(k, control_dim)`` with k >= 1.  When the candidate count is
    state-independent, supply ``control_candidates_batch`` as well
    (states ``(m, state_dim)`` to candidates ``(m, K, control_dim)``);
    the solver then avoids the per-node Python loop.  Repeated
    candidates are harmless: ties in the minimisation always resolve to
    the earliest candidate.
    """

    state_dim: int
    control_dim: int
    dynamics: Callable
    stage_cost: Callable
    control_candidates: Callable
    noise: DiscreteNoise
    control_candidates_batch: Callable | None = None

    def __post_init__(self) -> None:
        if self.state_dim < 1 or self.control_dim < 1:
            raise ValueError("state_dim and control_dim must be >= 1")

    def candidate_array(self, states: np.ndarray) -> np.ndarray:
        """Admissible controls at a batch of states, shape (m, K, control_dim).

        Ragged per-state candidate lists are padded by repeating their
        first entry, which cannot change any first-occurrence argmin.
        """
        if self.control_candidates_batch is not None:
            out = np.asarray(self.control_candidates_batch(states), dtype=np.float64)
            if out.ndim != 3 or out.shape[0] != states.shape[0] or out.shape[2] != self.control_dim:
                raise ValueError(f"candidate batch has shape {out.shape}, expected (m, K, {self.control_dim})")
            if out.shape[1] < 1:
                raise ValueError("control candidates must not be empty")
            return out

        rows = []
        for s in states:
            cand = np.asarray(self.control_candidates(s), dtype=np.float64)
            cand = cand.reshape(-1, self.control_dim)
            if cand.shape[0] < 1:
                raise ValueError(f"control candidates empty at state {tuple(s)}")
            rows.append(cand)
        k_max = max(r.shape[0] for r in rows)
        out = np.empty((len(rows), k_max, self.control_dim))
        for i, r in enumerate(rows):
            out[i, : r.shape[0]] = r
            out[i, r.shape[0] :] = r[0]
        return out


@dataclass(frozen=True)
class SolverConfig:
    """Tunables shared by the iteration drivers.

    ``eval_tol`` is relative: an iteration stops once the span of the
    sweep increment drops below ``eval_tol * (|J| + 1)`` for the current
    average-cost estimate J.  ``chunk_nodes == 0`` picks a chunk size
    automatically; the choice never depends on ``threads``, which keeps
    results bit-identical across thread counts.
    """

    reference_node: int = 0
    eval_tol: float = 1e-9
    eval_max_sweeps: int = 1000
    max_improvements: int = 10
    policy_change_tol: float = 0.0
    threads: int = 1
    chunk_nodes: int = 0

    def __post_init__(self) -> None:
        if self.reference_node < 0:
            raise ValueError("reference_node must be >= 0")
        if self.eval_tol <= 0.0:
            raise ValueError("eval_tol must be > 0")
        if self.eval_max_sweeps < 1 or self.max_improvements < 1:
            raise ValueError("sweep and improvement caps must be >= 1")
        if self.policy_change_tol < 0.0:
            raise ValueError("policy_change_tol must be >= 0")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.chunk_nodes < 0:
            raise ValueError("chunk_nodes must be >= 0")


@dataclass
class EvaluationResult:
    """Outcome of evaluating one fixed policy."""

    avg_cost: float
    value: GridFunction
    sweeps: int
    residuals: list[float]
    converged: bool


@dataclass
class SolveReport:
    """Outcome of a full policy-iteration or value-iteration run."""

    avg_cost: float
    value: GridFunction
    policy: tuple[GridFunction, ...]
    sweeps_per_evaluation: list[int]
    improvement_steps: int
    residual_history: list[float]
    avg_cost_history: list[float]
    policy_change_history: list[float]
    converged: bool


def _span(x: np.ndarray) -> float:
    return float(x.max() - x.min())


def _check_divergence(residuals: list[float]) -> None:
    if len(residuals) > DIVERGENCE_WINDOW:
        base = residuals[-1 - DIVERGENCE_WINDOW]
        if residuals[-1] > DIVERGENCE_FACTOR * base:
            raise DivergenceError(len(residuals), residuals[-1 - DIVERGENCE_WINDOW :])


def _chunk_spans(n: int, chunk: int) -> list[tuple[int, int]]:
    return [(a, min(a + chunk, n)) for a in range(0, n, chunk)]


def _run_chunks(spans, worker, threads: int) -> None:
    if threads <= 1 or len(spans) <= 1:
        for a, b in spans:
            worker(a, b)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda s: worker(*s), spans))


def _auto_chunk(config: SolverConfig, k: int) -> int:
    if config.chunk_nodes > 0:
        return config.chunk_nodes
    return max(256, 400_000 // max(k, 1))


def _interp_values(grid: RectGrid, values: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Multilinear interpolation against a raw value table (hull-clipped)."""
    flat, weights = interpolation_stencil(grid, pts)
    corner_vals = values[flat]
    out = np.einsum("mc,mc->m", weights, corner_vals)
    np.clip(out, corner_vals.min(axis=1), corner_vals.max(axis=1), out=out)
    return out


def _report_bad_node(grid: RectGrid, bad: np.ndarray, base: int, k: int, what: str) -> None:
    """Raise for the first node whose dynamics or cost came out non-finite."""
    pos = int(np.argmax(bad))
    node = base + pos // k
    raise ValueError(
        f"{what} is not finite at grid node {node} {node_coordinates_safe(grid, node)}"
    )


def node_coordinates_safe(grid: RectGrid, node: int):
    try:
        return node_coordinates(grid, node)
    except IndexError:
        return "(?)"


def _min_sweep(
    values: np.ndarray,
    grid: RectGrid,
    problem: ControlProblem,
    config: SolverConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """One minimising sweep over all nodes.

    Returns the un-anchored swept values (N,) and the greedy controls
    (N, control_dim).
    """
    n = grid.size
    nodes_xy = grid.all_nodes
    raw = np.empty(n)
    controls = np.empty((n, problem.control_dim))
    k_probe = problem.candidate_array(nodes_xy[:1]).shape[1]
    spans = _chunk_spans(n, _auto_chunk(config, k_probe))

    def worker(a: int, b: int) -> None:
        xc = nodes_xy[a:b]
        cand = problem.candidate_array(xc)
        mc, k, _ = cand.shape
        x_rep = np.repeat(xc, k, axis=0)
        u_rep = cand.reshape(mc * k, problem.control_dim)
        q = np.zeros((mc, k))
        for wval, wprob in zip(problem.noise.nodes, problem.noise.weights):
            w = np.full(mc * k, wval)
            xn = np.asarray(problem.dynamics(x_rep, u_rep, w), dtype=np.float64)
            cost = np.asarray(problem.stage_cost(x_rep, u_rep, w), dtype=np.float64).reshape(-1)
            bad = ~np.isfinite(xn).all(axis=1)
            if bad.any():
                _report_bad_node(grid, bad, a, k, "dynamics output")
            bad = ~np.isfinite(cost)
            if bad.any():
                _report_bad_node(grid, bad, a, k, "stage cost")
            q += wprob * (cost + _interp_values(grid, values, xn)).reshape(mc, k)
        best = np.argmin(q, axis=1)
        rows = np.arange(mc)
        raw[a:b] = q[rows, best]
        controls[a:b] = cand[rows, best]

    _run_chunks(spans, worker, config.threads)
    return raw, controls


def bellman_sweep(
    value: GridFunction,
    problem: ControlProblem,
    config: SolverConfig | None = None,
) -> tuple[GridFunction, tuple[GridFunction, ...], float]:
    """One optimality sweep: minimise the one-stage lookahead at every node.

    Returns the updated differential value (anchored to zero at the
    reference node), the greedy policy (one GridFunction per control
    component), and the subtracted anchor value, which estimates the
    average cost per stage.  Ties in the minimisation resolve to the
    first candidate in order.
    """
    config = config or SolverConfig()
    grid = value.grid
    if grid.dim != problem.state_dim:
        raise ValueError(f"grid dimension {grid.dim} != problem state_dim {problem.state_dim}")
    if not config.reference_node < grid.size:
        raise ValueError(f"reference node {config.reference_node} outside grid of size {grid.size}")
    raw, controls = _min_sweep(value.values, grid, problem, config)
    avg = float(raw[config.reference_node])
    new_value = GridFunction(grid, raw - avg)
    policy = tuple(GridFunction(grid, controls[:, j].copy()) for j in range(problem.control_dim))
    return new_value, policy, avg


def _project_policy_to_candidates(
    policy: tuple[GridFunction, ...],
    problem: ControlProblem,
    grid: RectGrid,
) -> np.ndarray:
    """Per-node controls: the admissible candidate nearest the stored policy."""
    stored = np.stack([p.values for p in policy], axis=1)  # (N, control_dim)
    n = grid.size
    controls = np.empty_like(stored)
    cand_all = problem.candidate_array(grid.all_nodes)
    dist = ((cand_all - stored[:, None, :]) ** 2).sum(axis=2)
    best = np.argmin(dist, axis=1)
    controls[:] = cand_all[np.arange(n), best]
    return controls


def _fixed_policy_operator(
    controls: np.ndarray,
    grid: RectGrid,
    problem: ControlProblem,
    config: SolverConfig,
) -> tuple[np.ndarray, sp.csr_matrix]:
    """Expected stage cost and successor-interpolation operator of a fixed policy.

    With the policy held fixed, each sweep of the evaluation recursion is
    the affine map  v -> c_bar + M v,  where row i of the sparse matrix M
    spreads the noise expectation over the interpolation stencils of node
    i's successors.  Rows sum to 1.
    """
    n = grid.size
    nodes_xy = grid.all_nodes
    noise = problem.noise
    ncorner = 1 << grid.dim
    width = noise.n * ncorner
    indices = np.empty((n, width), dtype=np.int64)
    data = np.empty((n, width))
    c_bar = np.zeros(n)
    spans = _chunk_spans(n, _auto_chunk(config, noise.n))

    def worker(a: int, b: int) -> None:
        xc = nodes_xy[a:b]
        uc = controls[a:b]
        for l, (wval, wprob) in enumerate(zip(noise.nodes, noise.weights)):
            w = np.full(b - a, wval)
            xn = np.asarray(problem.dynamics(xc, uc, w), dtype=np.float64)
            cost = np.asarray(problem.stage_cost(xc, uc, w), dtype=np.float64).reshape(-1)
            bad = ~np.isfinite(xn).all(axis=1)
            if bad.any():
                _report_bad_node(grid, bad, a, 1, "dynamics output")
            bad = ~np.isfinite(cost)
            if bad.any():
                _report_bad_node(grid, bad, a, 1, "stage cost")
            flat, wts = interpolation_stencil(grid, xn)
            sl = slice(l * ncorner, (l + 1) * ncorner)
            indices[a:b, sl] = flat
            data[a:b, sl] = wprob * wts
            c_bar[a:b] += wprob * cost

    _run_chunks(spans, worker, config.threads)
    indptr = np.arange(n + 1, dtype=np.int64) * width
    matrix = sp.csr_matrix((data.reshape(-1), indices.reshape(-1), indptr), shape=(n, n))
    return c_bar, matrix


def policy_evaluation(
    policy: tuple[GridFunction, ...],
    problem: ControlProblem,
    config: SolverConfig | None = None,
) -> EvaluationResult:
    """Average cost and differential value of a fixed policy.

    Iterates the fixed-policy sweep (no minimisation; the control at
    each node is the stored policy value projected to the nearest
    admissible candidate) with relative-value anchoring until the span
    of the increment drops below the tolerance or the sweep cap is hit.
    Raises :class:`DivergenceError` if the spans grow instead.
    """
    config = config or SolverConfig()
    if len(policy) < 1:
        raise ValueError("policy needs at least one control component")
    grid = policy[0].grid
    for p in policy[1:]:
        if p.grid != grid:
            raise ValueError("policy components must share one grid")
    if grid.dim != problem.state_dim:
        raise ValueError(f"grid dimension {grid.dim} != problem state_dim {problem.state_dim}")
    if len(policy) != problem.control_dim:
        raise ValueError(f"{len(policy)} policy components != control_dim {problem.control_dim}")
    if not config.reference_node < grid.size:
        raise ValueError(f"reference node {config.reference_node} outside grid of size {grid.size}")

    controls = _project_policy_to_candidates(policy, problem, grid)
    c_bar, matrix = _fixed_policy_operator(controls, grid, problem, config)

    v = np.zeros(grid.size)
    residuals: list[float] = []
    avg = 0.0
    converged = False
    sweeps = 0
    for sweeps in range(1, config.eval_max_sweeps + 1):
        raw = c_bar + matrix @ v
        avg = float(raw[config.reference_node])
        residuals.append(_span(raw - v))
        v = raw - avg
        if residuals[-1] <= config.eval_tol * (abs(avg) + 1.0):
            converged = True
            break
        _check_divergence(residuals)
    return EvaluationResult(avg, GridFunction(grid, v), sweeps, residuals, converged)


def policy_improvement(
    value: GridFunction,
    problem: ControlProblem,
    config: SolverConfig | None = None,
) -> tuple[GridFunction, ...]:
    """Greedy policy with respect to a differential value function."""
    _, policy, _ = bellman_sweep(value, problem, config)
    return policy


def _max_policy_change(new: tuple[GridFunction, ...], old: tuple[GridFunction, ...]) -> float:
    return max(float(np.max(np.abs(n.values - o.values))) for n, o in zip(new, old))


def policy_iteration(
    problem: ControlProblem,
    initial_policy: tuple[GridFunction, ...],
    config: SolverConfig | None = None,
) -> SolveReport:
    """Alternate policy evaluation and greedy improvement.

    Stops once the largest control change across nodes falls to
    ``policy_change_tol`` or below, or after ``max_improvements``
    improvement steps.  The reported average cost belongs to the last
    policy that was evaluated; when the run converged this is also the
    returned policy.
    """
    config = config or SolverConfig()
    current = tuple(initial_policy)
    residual_history: list[float] = []
    avg_history: list[float] = []
    change_history: list[float] = []
    sweeps_per_eval: list[int] = []
    converged = False
    evaluation = None
    for _ in range(config.max_improvements):
        evaluation = policy_evaluation(current, problem, config)
        sweeps_per_eval.append(evaluation.sweeps)
        residual_history.extend(evaluation.residuals)
        avg_history.append(evaluation.avg_cost)
        improved = policy_improvement(evaluation.value, problem, config)
        change = _max_policy_change(improved, current)
        change_history.append(change)
        current = improved
        if change <= config.policy_change_tol:
            converged = True
            break
    return SolveReport(
        avg_cost=evaluation.avg_cost,
        value=evaluation.value,
        policy=current,
        sweeps_per_evaluation=sweeps_per_eval,
        improvement_steps=len(change_history),
        residual_history=residual_history,
        avg_cost_history=avg_history,
        policy_change_history=change_history,
        converged=converged,
    )


def value_iteration(
    problem: ControlProblem,
    grid: RectGrid,
    config: SolverConfig | None = None,
) -> SolveReport:
    """Relative value iteration from a zero differential value.

    Repeats the optimality sweep with reference-node anchoring until the
    increment's span converges (same tolerance semantics as policy
    evaluation), then returns the final greedy policy.
    """
    config = config or SolverConfig()
    if grid.dim != problem.state_dim:
        raise ValueError(f"grid dimension {grid.dim} != problem state_dim {problem.state_dim}")
    if not config.reference_node < grid.size:
        raise ValueError(f"reference node {config.reference_node} outside grid of size {grid.size}")

    v = np.zeros(grid.size)
    residuals: list[float] = []
    avg_history: list[float] = []
    avg = 0.0
    controls = None
    converged = False
    sweeps = 0
    for sweeps in range(1, config.eval_max_sweeps + 1):
        raw, controls = _min_sweep(v, grid, problem, config)
        avg = float(raw[config.reference_node])
        residuals.append(_span(raw - v))
        avg_history.append(avg)
        v = raw - avg
        if residuals[-1] <= config.eval_tol * (abs(avg) + 1.0):
            converged = True
            break
        _check_divergence(residuals)
    policy = tuple(
        GridFunction(grid, controls[:, j].copy()) for j in range(problem.control_dim)
    )
    return SolveReport(
        avg_cost=avg,
        value=GridFunction(grid, v),
        policy=policy,
        sweeps_per_evaluation=[sweeps],
        improvement_steps=1,
        residual_history=residuals,
        avg_cost_history=avg_history,
        policy_change_history=[],
        converged=converged,
    )


def save_report(report: SolveReport, directory, stem: str = "solution") -> dict:
    """Persist a solve: value/policy tables plus a structured text summary.

    Writes ``<stem>_value.gridfn`` (+ payload), one
    ``<stem>_policy_u<j>.gridfn`` per control component, and
    ``<stem>_report.json`` with the scalar history.  Returns the mapping
    of artifact names to paths.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    value_path = directory / f"{stem}_value.gridfn"
    save_grid_function(report.value, value_path)
    paths["value"] = str(value_path)
    for j, component in enumerate(report.policy):
        policy_path = directory / f"{stem}_policy_u{j}.gridfn"
        save_grid_function(component, policy_path)
        paths[f"policy_u{j}"] = str(policy_path)
    summary = {
        "avg_cost": report.avg_cost,
        "improvement_steps": report.improvement_steps,
        "sweeps_per_evaluation": report.sweeps_per_evaluation,
        "converged": report.converged,
        "avg_cost_history": report.avg_cost_history,
        "policy_change_history": report.policy_change_history,
        "residual_history": report.residual_history,
    }
    report_path = directory / f"{stem}_report.json"
    report_path.write_text(json.dumps(summary, indent=2) + "\n")
    paths["report"] = str(report_path)
    return paths
