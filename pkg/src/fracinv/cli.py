"""Command line entry point: ``fracinv {forward,invert,gradcheck,example,weights}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings

from . import harness
from .errors import ConfigError, FracInvError, GridError, SolverError
from .lattice import check_coercivity, fcd_weights

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_NOT_CONVERGED = 4

REFERENCE_Q_THRESHOLD = -17.9041


def _alpha(text: str):
    if text in ("auto", "delta_sq"):
        return "delta_sq"
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--alpha takes a number or 'auto', got {text!r}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML-style experiment config")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--n", type=int, dest="n_omega", help="grid cells across Omega")
    p.add_argument("--refine", type=int, dest="refine_factor", help="data-grid refinement factor")
    p.add_argument("--alpha", type=_alpha, help="regularization parameter or 'auto' (= delta^2)")
    p.add_argument("--tau", type=float, help="discrepancy factor on delta^2")
    p.add_argument("--max-iter", type=int, dest="max_iter", help="CG iteration cap")
    p.add_argument("--seed", type=int, help="noise seed (FRACINV_SEED overrides)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fracinv", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forward", help="solve both forward problems and write fields/traces")
    _common(p)
    p = sub.add_parser("invert", help="synthesize data and reconstruct (q, g)")
    _common(p)
    p.add_argument("--delta", type=float, action="append", dest="deltas", help="noise level (repeatable)")
    p = sub.add_parser("gradcheck", help="adjoint gradient vs central differences")
    _common(p)
    p.add_argument("--directions", type=int, default=10)
    p.add_argument("--t", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-6)
    p = sub.add_parser("example", help="reproduce a shipped example")
    _common(p)
    p.add_argument("--name", required=True, choices=sorted(harness.EXAMPLE_TAU))
    p.add_argument("--delta", type=float, action="append", dest="deltas", help="noise level (repeatable)")
    p = sub.add_parser("weights", help="print fractional centered difference weights")
    p.add_argument("--s", type=float, required=True)
    p.add_argument("--k", type=int, required=True)
    return parser


def _overrides(args) -> dict:
    keys = ("n_omega", "refine_factor", "alpha", "tau", "max_iter", "seed")
    out = {k: getattr(args, k, None) for k in keys}
    deltas = getattr(args, "deltas", None)
    if deltas:
        out["deltas"] = tuple(deltas)
    return out


def _print_summary(art: harness.RunArtifacts) -> None:
    for s in art.summary:
        print(
            f"delta={s['delta']:g} alpha={s['alpha']:g} iterations={s['iterations']} "
            f"termination={s['termination']} E={s['E_final']:.4e} (threshold {s['threshold']:.4e}) "
            f"err_q={s['err_q']:.4f} err_g={s['err_g']:.4f}"
        )
    for path in art.files:
        print(f"wrote {path}")


def run(args) -> int:
    if args.command == "weights":
        w = fcd_weights(args.s, args.k)
        print("k,w_k")
        for k, v in enumerate(w):
            print(f"{k},{float(v)!r}")
        return EXIT_OK

    base = harness.example_config(args.name) if args.command == "example" else None
    cfg = harness.load_config(args.config, base=base, **_overrides(args))

    if args.command == "forward":
        info = harness.forward_run(cfg, args.out or "runs/forward")
        setup = harness.build_setup(cfg)
        q, g = cfg.truth_functions()
        report = check_coercivity(setup.op, setup.medium(q, g).q)
        info["coercivity"] = {
            "ok": report.ok,
            "q_threshold": report.q_threshold,
            "diag_threshold": report.diag_threshold,
            "reference_threshold": REFERENCE_Q_THRESHOLD,
        }
        print(json.dumps(info, indent=2))
        return EXIT_OK

    if args.command == "gradcheck":
        rep = harness.gradient_check(cfg, n_directions=args.directions, t=args.t, seed=cfg.seed)
        for fd, ad, rel in zip(rep.finite_diff, rep.adjoint, rep.rel_errs):
            print(f"fd={fd:+.12e} adjoint={ad:+.12e} rel={rel:.3e}")
        ok = rep.max_rel_err <= args.tol
        print(f"max relative error {rep.max_rel_err:.3e} ({'PASS' if ok else 'FAIL'} at tol {args.tol:g})")
        return EXIT_OK if ok else EXIT_CHECK_FAILED

    setup, truth, runs = harness.run_experiment(cfg)
    default_out = f"runs/{args.name}" if args.command == "example" else "runs/invert"
    art = harness.emit_outputs(args.out or default_out, setup, truth, runs, cfg)
    _print_summary(art)
    if any(s["termination"] == "max_iter" for s in art.summary):
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.verbose == 0:
        warnings.simplefilter("ignore", RuntimeWarning)
    try:
        return run(args)
    except (ConfigError, GridError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except FracInvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
