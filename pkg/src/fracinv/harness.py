"""Experiment layer: synthetic data, example runs, gradient checks and output files."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .field import ExteriorData, Medium, exterior_trace, mollified_source, solve_state
from .inverse import CGConfig, CGResult, Observation, eval_functional, eval_gradient, reconstruct
from .lattice import FracLapOp, GridSpec, RegionIndex, apply_fraclap, assemble_operator, build_grid
from . import svg

log = logging.getLogger(__name__)

PRESETS = {
    "ex1": (np.sin, np.cos),
    "ex2": (lambda x: 1.0 - x**2, lambda x: 1.0 - x**4),
}
EXAMPLE_TAU = {"ex1": 4.0, "ex2": 40.0}
DEFAULT_DELTAS = (1e-3, 1e-2)


@dataclass
class ExperimentConfig:
    s: float = 0.4
    omega: tuple[float, float] = (-1.0, 1.0)
    x_min: float = -3.0
    x_max: float = 3.0
    n_omega: int = 128
    eps_cells: int = 1
    refine_factor: int = 4
    deltas: tuple[float, ...] = DEFAULT_DELTAS
    alpha: float | str = "delta_sq"
    tau: float = 4.0
    max_iter: int = 500
    profile_f: str = "one"
    profile_f_tilde: str = "gauss"
    margin: float = 0.5
    truth: str = "ex1"
    truth_table: dict | None = None
    seed: int = 0

    def __post_init__(self):
        self.omega = tuple(float(v) for v in self.omega)
        self.deltas = tuple(float(d) for d in np.atleast_1d(self.deltas))
        if int(self.refine_factor) != self.refine_factor or self.refine_factor < 2:
            raise ConfigError(
                f"refine_factor must be an integer >= 2 (data grid strictly finer), got {self.refine_factor}"
            )
        self.refine_factor = int(self.refine_factor)
        if any(d < 0 for d in self.deltas):
            raise ConfigError("noise levels must be nonnegative")
        if not 0.0 < self.s < 1.0:
            raise ConfigError(f"s must lie in (0, 1), got {self.s}")
        if isinstance(self.alpha, str) and self.alpha not in ("delta_sq", "auto"):
            raise ConfigError(f"alpha must be a number, 'delta_sq' or 'auto', got {self.alpha!r}")
        if self.truth_table is None and self.truth not in PRESETS:
            raise ConfigError(f"unknown truth preset {self.truth!r}; use one of {sorted(PRESETS)}")
        if self.n_omega < 2 or self.eps_cells < 1:
            raise ConfigError(f"need n_omega >= 2 and eps_cells >= 1, got {self.n_omega}, {self.eps_cells}")
        if self.tau <= 0 or self.max_iter < 1:
            raise ConfigError("tau must be positive and max_iter at least 1")

    def alpha_for(self, delta: float) -> float:
        if isinstance(self.alpha, str):
            return delta**2
        return float(self.alpha)

    def truth_functions(self):
        if self.truth_table is not None:
            xs = np.asarray(self.truth_table["x"], dtype=float)
            qs = np.asarray(self.truth_table["q"], dtype=float)
            gs = np.asarray(self.truth_table["g"], dtype=float)
            return (lambda x: np.interp(x, xs, qs)), (lambda x: np.interp(x, xs, gs))
        return PRESETS[self.truth]

    @classmethod
    def flatten(cls, data: dict) -> dict:
        names = {f.name for f in dataclasses.fields(cls)}
        flat = {}
        for key, value in data.items():
            # sections only group keys; field names are global
            if isinstance(value, dict) and key not in names:
                flat.update(value)
            else:
                flat[key] = value
        return flat

    @classmethod
    def from_mapping(cls, data: dict) -> ExperimentConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        flat = cls.flatten(data)
        unknown = sorted(set(flat) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**flat)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def load_config(
    path: str | os.PathLike | None = None, base: ExperimentConfig | None = None, **overrides
) -> ExperimentConfig:
    """Read a TOML-style config file, apply overrides, then ``FRACINV_SEED``.

    File keys are layered over ``base`` (default: all defaults).
    """
    data: dict = {} if base is None else _config_dict(base)
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data.update(ExperimentConfig.flatten(tomllib.load(fh)))
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = ExperimentConfig.from_mapping(data)
    updates = {k: v for k, v in overrides.items() if v is not None}
    env_seed = os.environ.get("FRACINV_SEED")
    if env_seed is not None:
        try:
            updates["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"FRACINV_SEED must be an integer, got {env_seed!r}") from exc
    if updates:
        try:
            cfg = dataclasses.replace(cfg, **updates)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
    return cfg


@dataclass(eq=False)
class Setup:
    """Grid, operator and exterior sources for one resolution."""

    grid: GridSpec
    regions: RegionIndex
    op: FracLapOp
    sources: tuple[ExteriorData, ExteriorData]

    @property
    def x_interior(self) -> np.ndarray:
        return self.grid.x[self.regions.interior]

    @property
    def x_w2(self) -> np.ndarray:
        return self.grid.x[self.regions.w2]

    def medium(self, q, g) -> Medium:
        return Medium.from_functions(q, g, self.x_interior)


def build_setup(cfg: ExperimentConfig, refine: int = 1) -> Setup:
    grid, regions = build_grid(
        cfg.x_min, cfg.x_max, cfg.omega, n_omega=cfg.n_omega * refine, eps_cells=cfg.eps_cells * refine
    )
    op = assemble_operator(grid, cfg.s)
    sources = (
        mollified_source(cfg.profile_f, grid, regions, margin=cfg.margin),
        mollified_source(cfg.profile_f_tilde, grid, regions, margin=cfg.margin),
    )
    return Setup(grid, regions, op, sources)


def clean_traces(setup: Setup, truth: Medium, at: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free traces of both states; ``at`` defaults to the W2 nodes."""
    at = setup.regions.w2 if at is None else at
    out = []
    for src in setup.sources:
        u = solve_state(setup.op, setup.regions, truth, src)
        out.append(apply_fraclap(setup.op, u.values, at))
    return out[0], out[1]


def restriction_indices(coarse: Setup, fine: Setup, factor: int) -> np.ndarray:
    """Fine-grid indices of the coarse W2 nodes; rejects non-nested grids."""
    idx = factor * coarse.regions.w2
    if idx.max() >= fine.grid.n_nodes or not np.allclose(
        fine.grid.x[idx], coarse.x_w2, rtol=0.0, atol=1e-9 * coarse.grid.h
    ):
        raise ConfigError("data grid is not nested in the inversion grid")
    return idx


def synthesize_observation(
    cfg: ExperimentConfig, delta: float, seed: int | None = None, coarse: Setup | None = None
) -> Observation:
    """Traces on the refined grid restricted to coarse W2, plus uniform noise in ``[-delta, delta]``."""
    coarse = build_setup(cfg) if coarse is None else coarse
    fine = build_setup(cfg, refine=cfg.refine_factor)
    q, g = cfg.truth_functions()
    idx = restriction_indices(coarse, fine, cfg.refine_factor)
    h0, h1 = clean_traces(fine, fine.medium(q, g), at=idx)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    n = len(idx)
    noise0 = 2.0 * rng.random(n) - 1.0
    noise1 = 2.0 * rng.random(n) - 1.0
    return Observation(h0 + delta * noise0, h1 + delta * noise1, float(delta))


@dataclass
class DeltaRun:
    delta: float
    alpha: float
    observation: Observation
    result: CGResult


@dataclass
class RunArtifacts:
    reconstruction_csv: list[Path] = field(default_factory=list)
    trace_csv: list[Path] = field(default_factory=list)
    plots: list[Path] = field(default_factory=list)
    summary_json: Path | None = None
    summary: list[dict] = field(default_factory=list)

    @property
    def files(self) -> list[Path]:
        extra = [self.summary_json] if self.summary_json else []
        return self.reconstruction_csv + self.trace_csv + self.plots + extra

    @property
    def all_discrepancy(self) -> bool:
        return all(s["termination"] == "discrepancy" for s in self.summary)


def run_experiment(cfg: ExperimentConfig) -> tuple[Setup, Medium, list[DeltaRun]]:
    coarse = build_setup(cfg)
    q, g = cfg.truth_functions()
    truth = coarse.medium(q, g)
    runs = []
    for delta in cfg.deltas:
        obs = synthesize_observation(cfg, delta, coarse=coarse)
        alpha = cfg.alpha_for(delta)
        cg = CGConfig(alpha=alpha, tau=cfg.tau, max_iter=cfg.max_iter)
        log.info("delta=%g alpha=%g tau=%g: reconstructing", delta, alpha, cfg.tau)
        result = reconstruct(coarse.op, coarse.regions, coarse.sources, obs, cg, truth=truth)
        runs.append(DeltaRun(delta, alpha, obs, result))
    return coarse, truth, runs


def example_config(name: str, **overrides) -> ExperimentConfig:
    if name not in EXAMPLE_TAU:
        raise ConfigError(f"unknown example {name!r}; use ex1 or ex2")
    base = dict(truth=name, tau=EXAMPLE_TAU[name], alpha="delta_sq")
    base.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**base)


def run_example(
    name: str,
    deltas=DEFAULT_DELTAS,
    seed: int = 0,
    out: str | os.PathLike | None = None,
    **overrides,
) -> RunArtifacts:
    """Reproduce one of the two shipped examples and write its artifacts to ``out``."""
    cfg = example_config(name, deltas=tuple(np.atleast_1d(deltas)), seed=seed, **overrides)
    setup, truth, runs = run_experiment(cfg)
    out = Path(out if out is not None else f"runs/{name}")
    return emit_outputs(out, setup, truth, runs, cfg)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _tag(delta: float) -> str:
    return f"delta_{delta:.0e}"


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def emit_outputs(out: Path, setup: Setup, truth: Medium, runs: list[DeltaRun], cfg: ExperimentConfig) -> RunArtifacts:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    art = RunArtifacts()
    x = setup.x_interior
    for run in runs:
        tag = _tag(run.delta)
        rec = run.result.medium
        path = out / f"reconstruction_{tag}.csv"
        _write_csv(path, ["x", "q_true", "q_rec", "g_true", "g_rec"], zip(x, truth.q, rec.q, truth.g, rec.g))
        art.reconstruction_csv.append(path)
        path = out / f"trace_{tag}.csv"
        _write_csv(
            path,
            ["iter", "J", "E", "beta", "gamma", "err_q", "err_g"],
            ((r.k, r.J_value, r.E_value, r.beta, r.gamma, r.err_q, r.err_g) for r in run.result.records),
        )
        art.trace_csv.append(path)
        last = run.result.records[-1]
        art.summary.append(
            {
                "delta": run.delta,
                "alpha": run.alpha,
                "tau": cfg.tau,
                "iterations": last.k,
                "termination": run.result.reason,
                "E_final": last.E_value,
                "threshold": cfg.tau * run.delta**2,
                "err_q": last.err_q,
                "err_g": last.err_g,
            }
        )
    for name, true_vals, label in (("q", truth.q, "potential q"), ("g", truth.g, "source g")):
        series = [("truth", x, true_vals)]
        series += [(f"delta = {r.delta:g}", x, getattr(r.result.medium, name)) for r in runs]
        path = out / f"{name}.svg"
        path.write_text(svg.line_plot(series, xlabel="x", ylabel=label, title=f"Reconstruction of {name}"))
        art.plots.append(path)
    art.summary_json = out / "summary.json"
    art.summary_json.write_text(json.dumps({"config": _config_dict(cfg), "runs": art.summary}, indent=2, sort_keys=True) + "\n")
    return art


def _config_dict(cfg: ExperimentConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["omega"] = list(d["omega"])
    d["deltas"] = list(d["deltas"])
    return d


@dataclass
class GradCheckReport:
    max_rel_err: float
    rel_errs: list[float]
    finite_diff: list[float]
    adjoint: list[float]


def gradient_check(
    cfg: ExperimentConfig,
    n_directions: int = 10,
    t: float = 1e-5,
    alpha: float | None = None,
    point: Medium | None = None,
    same_grid: bool = False,
    seed: int = 0,
) -> GradCheckReport:
    """Adjoint gradient against central differences of J along random directions.

    Noise-free data; by default from the refined grid and evaluated at half
    the true medium.  ``same_grid=True`` generates the data with the
    inversion grid itself, so the true medium has zero residual.
    """
    if not 1e-8 < t < 1e-2:
        raise ValueError(f"difference step t must lie in (1e-8, 1e-2), got {t}")
    setup = build_setup(cfg)
    q, g = cfg.truth_functions()
    truth = setup.medium(q, g)
    if same_grid:
        obs = Observation(*clean_traces(setup, truth), 0.0)
    else:
        obs = synthesize_observation(cfg, 0.0, coarse=setup)
    alpha = cfg.alpha_for(cfg.deltas[0]) if alpha is None else alpha
    point = Medium(0.5 * truth.q, 0.5 * truth.g) if point is None else point
    args = (setup.op, setup.regions)
    gq, gg = eval_gradient(*args, point, setup.sources, obs, alpha)
    rng = np.random.default_rng(seed)
    n = setup.regions.n_interior
    rel, fds, ads = [], [], []
    for _ in range(n_directions):
        dq, dg = rng.standard_normal(n), rng.standard_normal(n)
        jp = eval_functional(*args, Medium(point.q + t * dq, point.g + t * dg), setup.sources, obs, alpha).J
        jm = eval_functional(*args, Medium(point.q - t * dq, point.g - t * dg), setup.sources, obs, alpha).J
        fd = (jp - jm) / (2.0 * t)
        ad = setup.op.h * (float(gq @ dq) + float(gg @ dg))
        scale = max(abs(fd), abs(ad))
        rel.append(abs(fd - ad) / scale if scale > 0 else 0.0)
        fds.append(fd)
        ads.append(ad)
    return GradCheckReport(max(rel), rel, fds, ads)


def forward_run(cfg: ExperimentConfig, out: str | os.PathLike) -> dict:
    """Solve both forward problems for the configured truth; write fields and traces."""
    setup = build_setup(cfg)
    q, g = cfg.truth_functions()
    truth = setup.medium(q, g)
    sols = [solve_state(setup.op, setup.regions, truth, src) for src in setup.sources]
    traces = [exterior_trace(setup.op, u, setup.regions) for u in sols]
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "field.csv", ["x", "u", "u_tilde"], zip(setup.grid.x, sols[0].values, sols[1].values))
    _write_csv(out / "exterior_trace.csv", ["x", "trace", "trace_tilde"], zip(setup.x_w2, *traces))
    return {
        "n_nodes": setup.grid.n_nodes,
        "h": setup.grid.h,
        "residual_norm": max(u.residual_norm for u in sols),
        "files": [str(out / "field.csv"), str(out / "exterior_trace.csv")],
    }
