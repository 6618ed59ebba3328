"""Tikhonov reconstruction of ``(q, g)`` by nonlinear conjugate gradients.

The functional is

    J(q, g) = 1/2 sum_m ||trace(u_m) - h_m||^2 + alpha/2 (||q'||^2 + ||g'||^2)

with one state ``u_m`` per exterior source.  Norms are rectangle-rule
discretizations ``h * sum``.  The gradient with respect to that inner
product comes from one adjoint solve per source; the step length along a
search direction comes from one sensitivity solve per source.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import SolverError
from .field import (
    ExteriorData,
    FieldSolution,
    InteriorSystem,
    Medium,
    exterior_trace,
    solve_adjoint,
    solve_sensitivity,
    solve_state,
)
from .lattice import FracLapOp, RegionIndex

__all__ = [
    "Observation",
    "CGConfig",
    "CGState",
    "IterationRecord",
    "Evaluation",
    "CGResult",
    "TERMINATION_REASONS",
    "difference",
    "seminorm_sq",
    "regularizer_grad",
    "eval_functional",
    "eval_gradient",
    "conjugate_coefficient",
    "descent_direction",
    "step_size",
    "reconstruct",
]

log = logging.getLogger(__name__)

TERMINATION_REASONS = ("discrepancy", "max_iter", "gradient_floor")
GRAD_FLOOR = 1e-14


@dataclass(frozen=True, eq=False)
class Observation:
    """Noisy W2 traces, one per exterior source, and the noise level."""

    h: np.ndarray
    h_tilde: np.ndarray | None
    delta: float = 0.0

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        if self.h_tilde is not None and np.shape(self.h) != np.shape(self.h_tilde):
            raise ValueError("both traces must be sampled on the same W2 nodes")

    @property
    def traces(self) -> tuple[np.ndarray, ...]:
        return (self.h,) if self.h_tilde is None else (self.h, self.h_tilde)


@dataclass
class CGConfig:
    alpha: float = 0.0
    tau: float = 4.0
    max_iter: int = 500
    q0: np.ndarray | None = None
    g0: np.ndarray | None = None

    def __post_init__(self):
        if self.alpha < 0 or self.tau <= 0 or self.max_iter < 1:
            raise ValueError("need alpha >= 0, tau > 0, max_iter >= 1")


@dataclass
class CGState:
    iterate: Medium
    gradient: tuple[np.ndarray, np.ndarray]
    direction: tuple[np.ndarray, np.ndarray]
    grad_norm_sq: float
    k: int


@dataclass(frozen=True)
class IterationRecord:
    k: int
    J_value: float
    E_value: float
    beta: float = math.nan
    gamma: float = math.nan
    err_q: float = math.nan
    err_g: float = math.nan


@dataclass(eq=False)
class Evaluation:
    """Functional value at one medium plus everything needed for its derivatives."""

    J: float
    E: float
    residuals: tuple[np.ndarray, ...]
    states: tuple[FieldSolution, ...]
    system: InteriorSystem = field(repr=False)


class CGResult(NamedTuple):
    medium: Medium
    records: list[IterationRecord]
    reason: str


def difference(v: np.ndarray, h: float) -> np.ndarray:
    """Forward differences of ``v`` extended by one zero at each end."""
    return np.diff(np.concatenate(([0.0], v, [0.0]))) / h


def seminorm_sq(v: np.ndarray, h: float) -> float:
    dv = difference(v, h)
    return float(h * np.dot(dv, dv))


def regularizer_grad(v: np.ndarray, alpha: float, h: float) -> np.ndarray:
    """``alpha * D^T D v``: gradient of ``alpha/2 * h * ||D v||^2`` in the ``h``-weighted inner product."""
    if alpha == 0.0:
        return np.zeros_like(v, dtype=float)
    dv = difference(np.asarray(v, dtype=float), h)
    return alpha * -np.diff(dv) / h


def _inner(a: Sequence[np.ndarray], b: Sequence[np.ndarray], h: float) -> float:
    return float(h * sum(np.dot(x, y) for x, y in zip(a, b)))


def eval_functional(
    op: FracLapOp,
    regions: RegionIndex,
    medium: Medium,
    sources: Sequence[ExteriorData],
    obs: Observation,
    alpha: float,
    system: InteriorSystem | None = None,
) -> Evaluation:
    traces = obs.traces
    if len(sources) != len(traces):
        raise ValueError(f"{len(sources)} sources but {len(traces)} observed traces")
    if system is None:
        system = InteriorSystem(op, regions, medium.q)
    h = op.h
    states, residuals = [], []
    for src, data in zip(sources, traces):
        u = solve_state(op, regions, medium, src, system=system)
        states.append(u)
        residuals.append(exterior_trace(op, u, regions) - data)
    E = h * sum(float(np.dot(r, r)) for r in residuals)
    J = 0.5 * E + 0.5 * alpha * (seminorm_sq(medium.q, h) + seminorm_sq(medium.g, h))
    return Evaluation(J, E, tuple(residuals), tuple(states), system)


def eval_gradient(
    op: FracLapOp,
    regions: RegionIndex,
    medium: Medium,
    sources: Sequence[ExteriorData],
    obs: Observation,
    alpha: float,
    evaluation: Evaluation | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint-state gradient ``(sum u v + alpha D^T D q, -sum v + alpha D^T D g)``.

    Each adjoint field ``v`` solves the homogeneous interior problem with the
    trace residual as exterior data on W2.
    """
    if evaluation is None:
        evaluation = eval_functional(op, regions, medium, sources, obs, alpha)
    grad_q = regularizer_grad(medium.q, alpha, op.h)
    grad_g = regularizer_grad(medium.g, alpha, op.h)
    for u, r in zip(evaluation.states, evaluation.residuals):
        v = solve_adjoint(op, regions, medium.q, r, system=evaluation.system).values[regions.interior]
        grad_q = grad_q + u.values[regions.interior] * v
        grad_g = grad_g - v
    return grad_q, grad_g


def conjugate_coefficient(grad_now, grad_prev, h: float) -> float | None:
    """Fletcher-Reeves ratio ``||grad_now||^2 / ||grad_prev||^2``.

    ``grad_prev=None`` is the first iteration and gives 0.  A zero previous
    gradient returns ``None``: the iteration had already converged.
    """
    if grad_prev is None:
        return 0.0
    prev = _inner(grad_prev, grad_prev, h)
    if prev == 0.0:
        return None
    return _inner(grad_now, grad_now, h) / prev


def descent_direction(gradient, gamma: float, prev_direction=None):
    """``-gradient + gamma * prev_direction``, restarted to ``-gradient`` if it is not a descent direction."""
    steepest = tuple(-g for g in gradient)
    if prev_direction is None or gamma == 0.0:
        return steepest
    d = tuple(s + gamma * p for s, p in zip(steepest, prev_direction))
    if sum(float(np.dot(g, di)) for g, di in zip(gradient, d)) >= 0.0:
        return steepest
    return d


def step_size(
    op: FracLapOp,
    regions: RegionIndex,
    states: Sequence[FieldSolution],
    residuals: Sequence[np.ndarray],
    direction: tuple[np.ndarray, np.ndarray],
    medium: Medium,
    alpha: float,
    system: InteriorSystem | None = None,
) -> float:
    """Stationary point of the linearized functional along ``direction``.

    With ``F w`` the trace of the sensitivity field for ``(dq, dg) = direction``,

        beta = -[sum <r, F w> + alpha (<Dq, D dq> + <Dg, D dg>)]
               / [sum ||F w||^2 + alpha (||D dq||^2 + ||D dg||^2)].
    """
    dq, dg = direction
    if not (np.any(dq) or np.any(dg)):
        raise ValueError("step_size needs a nonzero direction")
    h = op.h
    numer = denom = 0.0
    for u, r in zip(states, residuals):
        w = solve_sensitivity(op, regions, medium.q, u, dq, dg, system=system)
        fw = exterior_trace(op, w, regions)
        numer += h * float(np.dot(r, fw))
        denom += h * float(np.dot(fw, fw))
    if alpha:
        Dq, Dg, Ddq, Ddg = (difference(v, h) for v in (medium.q, medium.g, dq, dg))
        numer += alpha * h * (float(np.dot(Dq, Ddq)) + float(np.dot(Dg, Ddg)))
        denom += alpha * h * (float(np.dot(Ddq, Ddq)) + float(np.dot(Ddg, Ddg)))
    if denom <= 0.0:
        raise ValueError("direction lies in the null space of the linearized functional")
    return -numer / denom


def _rel_err(est: np.ndarray, true: np.ndarray) -> float:
    nrm = np.linalg.norm(true)
    return float(np.linalg.norm(est - true) / nrm) if nrm > 0 else float(np.linalg.norm(est))


def reconstruct(
    op: FracLapOp,
    regions: RegionIndex,
    sources: Sequence[ExteriorData],
    obs: Observation,
    cfg: CGConfig,
    truth: Medium | None = None,
    max_halvings: int = 40,
) -> CGResult:
    """Conjugate gradient minimization of the Tikhonov functional.

    Stops when the data misfit ``E <= tau * delta^2`` (``"discrepancy"``),
    after ``cfg.max_iter`` updates (``"max_iter"``), or when the gradient norm
    drops to 1e-14 or no decrease in J is achievable (``"gradient_floor"``).
    Each accepted step is halved until J does not increase, so the recorded
    J values are non-increasing.
    """
    n = regions.n_interior
    q0 = np.zeros(n) if cfg.q0 is None else np.asarray(cfg.q0, dtype=float)
    g0 = np.zeros(n) if cfg.g0 is None else np.asarray(cfg.g0, dtype=float)
    medium = Medium(q0, g0)
    alpha, h = cfg.alpha, op.h
    threshold = cfg.tau * obs.delta**2

    def errors(m: Medium):
        if truth is None:
            return math.nan, math.nan
        return _rel_err(m.q, truth.q), _rel_err(m.g, truth.g)

    def evaluate(m: Medium, k: int) -> Evaluation:
        try:
            return eval_functional(op, regions, m, sources, obs, alpha)
        except SolverError as exc:
            raise SolverError(str(exc), iteration=k) from exc

    ev = evaluate(medium, 0)
    records = [IterationRecord(0, ev.J, ev.E, math.nan, math.nan, *errors(medium))]
    state: CGState | None = None
    k = 0
    while True:
        if ev.E <= threshold:
            reason = "discrepancy"
            break
        if k >= cfg.max_iter:
            reason = "max_iter"
            break
        grad = eval_gradient(op, regions, medium, sources, obs, alpha, evaluation=ev)
        gnorm_sq = _inner(grad, grad, h)
        if math.sqrt(gnorm_sq) <= GRAD_FLOOR:
            reason = "gradient_floor"
            break
        if state is None:
            gamma, direction = 0.0, descent_direction(grad, 0.0)
        else:
            gamma = conjugate_coefficient(grad, state.gradient, h)
            if gamma is None:
                reason = "gradient_floor"
                break
            direction = descent_direction(grad, gamma, state.direction)
        state = CGState(medium, grad, direction, gnorm_sq, k)

        beta = step_size(op, regions, ev.states, ev.residuals, direction, medium, alpha, system=ev.system)
        trial_ev = None
        for _ in range(max_halvings + 1):
            trial = Medium(medium.q + beta * direction[0], medium.g + beta * direction[1])
            try:
                trial_ev = eval_functional(op, regions, trial, sources, obs, alpha)
            except SolverError:
                trial_ev = None
            if trial_ev is not None and trial_ev.J <= ev.J:
                break
            beta *= 0.5
            trial_ev = None
        if trial_ev is None:
            log.info("no decrease of J along the search direction at k=%d; stopping", k)
            reason = "gradient_floor"
            break
        medium, ev = trial, trial_ev
        k += 1
        records.append(IterationRecord(k, ev.J, ev.E, beta, gamma, *errors(medium)))
        log.debug("k=%d J=%.6e E=%.6e beta=%.4e gamma=%.4e", k, ev.J, ev.E, beta, gamma)

    log.info("stopped after %d iterations: %s (E=%.3e, threshold %.3e)", k, reason, ev.E, threshold)
    return CGResult(medium, records, reason)
