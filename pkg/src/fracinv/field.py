"""State, adjoint and sensitivity solves for ``((-Delta)^s + q) u = g``.

All three problems share the interior matrix ``A_II + diag(q)`` and differ
only in the right-hand side and the exterior data, so one factorization
(:class:`InteriorSystem`) serves every solve at a given potential.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import GridError, SolverError
from .lattice import FracLapOp, GridSpec, RegionIndex, check_coercivity

__all__ = [
    "Medium",
    "ExteriorData",
    "FieldSolution",
    "InteriorSystem",
    "bump_cutoff",
    "mollified_source",
    "solve_state",
    "exterior_trace",
    "solve_adjoint",
    "solve_sensitivity",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Medium:
    """Potential ``q`` and internal source ``g`` at the interior nodes."""

    q: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=float)
        g = np.array(self.g, dtype=float)
        if q.ndim != 1 or q.shape != g.shape:
            raise ValueError(f"q and g must be 1D arrays of equal length, got {q.shape}, {g.shape}")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(g))):
            raise ValueError("medium contains non-finite values")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "g", g)

    @classmethod
    def zeros(cls, n: int) -> Medium:
        return cls(np.zeros(n), np.zeros(n))

    @classmethod
    def from_functions(cls, q, g, x: np.ndarray) -> Medium:
        return cls(np.broadcast_to(q(x), x.shape), np.broadcast_to(g(x), x.shape))

    def __add__(self, other: Medium) -> Medium:
        return Medium(self.q + other.q, self.g + other.g)

    def __len__(self):
        return len(self.q)


@dataclass(frozen=True, eq=False)
class ExteriorData:
    """Exterior Dirichlet data on the full node set (zero on the interior).

    ``support`` lists the nodes where the data may be nonzero.
    """

    values: np.ndarray
    support: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        mask = np.ones(len(values), dtype=bool)
        mask[self.support] = False
        if np.any(values[mask] != 0.0):
            raise ValueError("exterior data is nonzero outside its declared support")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, n_nodes: int) -> ExteriorData:
        return cls(np.zeros(n_nodes), np.array([], dtype=int))


@dataclass(frozen=True, eq=False)
class FieldSolution:
    values: np.ndarray
    residual_norm: float

    def interior(self, regions: RegionIndex) -> np.ndarray:
        return self.values[regions.interior]


def bump_cutoff(x: np.ndarray, intervals, margin: float) -> np.ndarray:
    """Smooth cutoff: 1 on each interval shrunk by ``margin``, 0 outside the intervals.

    The transition uses ``exp(1 - 1/(1 - t^2))`` with ``t`` the normalized
    distance from the plateau.
    """
    x = np.asarray(x, dtype=float)
    chi = np.zeros_like(x)
    for lo, hi in intervals:
        inside = (x > lo) & (x < hi)
        depth = np.minimum(x[inside] - lo, hi - x[inside]) / margin
        t = 1.0 - np.minimum(depth, 1.0)
        with np.errstate(divide="ignore", over="ignore"):
            val = np.exp(1.0 - 1.0 / (1.0 - t * t))
        chi[inside] = np.where(t < 1.0, val, 0.0)
    return chi


_PROFILES = {
    "one": lambda x: np.ones_like(x),
    "gauss": lambda x: np.exp(-x * x),
}


def source_intervals(grid: GridSpec) -> list[tuple[float, float]]:
    a, b = grid.omega
    return [(grid.x_min, a - grid.eps_gap), (b + grid.eps_gap, grid.x_max)]


def mollified_source(
    profile,
    grid: GridSpec,
    regions: RegionIndex,
    margin: float = 0.5,
    intervals=None,
) -> ExteriorData:
    """Exterior source ``profile(x) * cutoff(x)`` supported in W1.

    ``profile`` is ``"one"``, ``"gauss"`` (``exp(-x^2)``) or a callable.
    ``intervals`` defaults to the two W1 components of ``grid``.
    """
    if intervals is None:
        intervals = source_intervals(grid)
    narrowest = min(hi - lo for lo, hi in intervals)
    if not 0.0 < margin < 0.5 * narrowest:
        raise GridError(
            f"margin {margin} must be positive and below half the narrowest W1 component ({narrowest})"
        )
    prof = _PROFILES[profile] if isinstance(profile, str) else profile
    x = grid.x
    values = prof(x) * bump_cutoff(x, intervals, margin)
    keep = np.zeros(grid.n_nodes, dtype=bool)
    keep[regions.w1] = True
    values = np.where(keep, values, 0.0)
    return ExteriorData(values, regions.w1)


class InteriorSystem:
    """Factorized ``A_II + diag(q)`` together with the interior/exterior coupling.

    Cholesky is tried first; an indefinite but nonsingular matrix falls back
    to LU.  A failed coercivity check only warns.
    """

    def __init__(self, op: FracLapOp, regions: RegionIndex, q: np.ndarray):
        q = np.asarray(q, dtype=float)
        if q.shape != (regions.n_interior,):
            raise ValueError(f"q must have {regions.n_interior} interior values, got {q.shape}")
        self.op = op
        self.regions = regions
        self.q = q
        self.matrix = op.block(regions.interior, regions.interior) + np.diag(q)
        self.coupling = op.block(regions.interior, regions.exterior)
        report = check_coercivity(op, q)
        if not report.ok:
            log.debug("coercivity check failed: q_min=%.6g, threshold %.6g", q.min(), report.q_threshold)
            warnings.warn(
                "coercivity check failed; proceeding with direct factorization",
                RuntimeWarning,
                stacklevel=2,
            )
        try:
            self._chol = linalg.cho_factor(self.matrix, lower=True)
            self._lu = None
        except linalg.LinAlgError:
            self._chol = None
            eig = linalg.eigvalsh(self.matrix)
            if np.min(np.abs(eig)) <= 1e-13 * np.max(np.abs(eig)):
                raise SolverError(
                    "interior matrix is singular: 0 is a Dirichlet eigenvalue of (-Delta)^s + q"
                )
            self._lu = linalg.lu_factor(self.matrix)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self._chol is not None:
            return linalg.cho_solve(self._chol, rhs)
        return linalg.lu_solve(self._lu, rhs)

    def solve_with_exterior(self, rhs_interior: np.ndarray, exterior_values: np.ndarray) -> FieldSolution:
        """Full field with prescribed exterior values and interior source ``rhs_interior``."""
        regions = self.regions
        rhs = rhs_interior - self.coupling @ exterior_values[regions.exterior]
        u_int = self.solve(rhs)
        resid = float(np.max(np.abs(self.matrix @ u_int - rhs), initial=0.0))
        scale = 1.0 + float(np.max(np.abs(rhs), initial=0.0))
        if not np.all(np.isfinite(u_int)) or resid > 1e-8 * scale:
            raise SolverError(f"interior solve inaccurate (residual {resid:.3e})")
        values = np.array(exterior_values, dtype=float)
        values[regions.interior] = u_int
        return FieldSolution(values, resid)


def _system(op, regions, q, system):
    if system is None:
        return InteriorSystem(op, regions, q)
    if system.op is not op or system.regions is not regions or not np.array_equal(system.q, q):
        raise ValueError("cached InteriorSystem was built for a different operator or potential")
    return system


def solve_state(
    op: FracLapOp,
    regions: RegionIndex,
    medium: Medium,
    exterior: ExteriorData,
    system: InteriorSystem | None = None,
) -> FieldSolution:
    """Solve ``((-Delta)^s + q) u = g`` in Omega with ``u = f`` outside."""
    system = _system(op, regions, medium.q, system)
    return system.solve_with_exterior(medium.g, exterior.values)


def exterior_trace(op: FracLapOp, solution, regions: RegionIndex) -> np.ndarray:
    """``(-Delta)^s`` of the full field at the W2 nodes, in node order."""
    values = solution.values if isinstance(solution, FieldSolution) else np.asarray(solution)
    return op.matrix[regions.w2] @ values


def solve_adjoint(
    op: FracLapOp,
    regions: RegionIndex,
    q: np.ndarray,
    residual: np.ndarray,
    system: InteriorSystem | None = None,
) -> FieldSolution:
    """Adjoint field: zero interior source, exterior data ``residual`` on W2 and 0 elsewhere."""
    residual = np.asarray(residual, dtype=float)
    if residual.shape != (len(regions.w2),):
        raise ValueError(f"residual must have {len(regions.w2)} W2 values, got {residual.shape}")
    system = _system(op, regions, q, system)
    ext = np.zeros(op.n_nodes)
    ext[regions.w2] = residual
    return system.solve_with_exterior(np.zeros(regions.n_interior), ext)


def solve_sensitivity(
    op: FracLapOp,
    regions: RegionIndex,
    q: np.ndarray,
    u: FieldSolution,
    dq: np.ndarray,
    dg: np.ndarray,
    system: InteriorSystem | None = None,
) -> FieldSolution:
    """Linearized state for the perturbation ``(dq, dg)`` with zero exterior data."""
    system = _system(op, regions, q, system)
    rhs = -np.asarray(dq, dtype=float) * u.values[regions.interior] + np.asarray(dg, dtype=float)
    return system.solve_with_exterior(rhs, np.zeros(op.n_nodes))
