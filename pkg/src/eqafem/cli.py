"""Command line entry point: adaptive runs and the effectivity sweep.

``eqafem [run] [flags]`` runs one adaptive experiment and writes
``iterations.csv`` and ``summary.json`` into ``--out``.  ``eqafem sweep``
evaluates the estimator effectivity on fixed uniform meshes for a range of
polynomial degrees.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from .adapt import AdaptConfig, AdaptRecord, ConfigError, fit_rate, run_adaptive, tail_window
from .equilibrate import assemble_global_flux, element_indicators, equilibrate_patches
from .galerkin import energy_error, solve_poisson
from .mesh import refine_uniform, write_mesh
from .problems import PROBLEMS, make_problem
from .spaces import MAX_LAGRANGE_DEGREE

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("level", "n_elem", "n_dofs", "error", "eta_elem_total", "eta_vertex_total",
               "osc_total", "zeta_total", "marked", "clb_min", "clb_max", "beta1", "beta2",
               "beta3", "q_ctr", "err_ratio", "eta_ratio", "effectivity")
SWEEP_COLUMNS = ("n_elem", "p", "n_dofs", "error", "eta", "effectivity")
CONTRACTION_SLACK = 1e-6
# uniform bisection rounds of the initial mesh used by the sweep (6 -> 12, 48 triangles)
SWEEP_ROUNDS = (1, 3)


@dataclass
class RunPaths:
    out: str = "."
    dump_meshes: bool = False

    @property
    def csv(self) -> str:
        return os.path.join(self.out, "iterations.csv")

    @property
    def summary(self) -> str:
        return os.path.join(self.out, "summary.json")

    def mesh(self, level: int) -> str:
        return os.path.join(self.out, f"mesh_level_{level:03d}.txt")


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return "%.17g" % x


def _json_value(x):
    """JSON-safe float: non-finite values become strings."""
    if isinstance(x, (int, np.integer)):
        return int(x)
    x = float(x)
    return x if math.isfinite(x) else _fmt(x)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eqafem", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file with run options; flags override it")
    parser.add_argument("--problem", choices=PROBLEMS)
    parser.add_argument("--p", type=int, help="polynomial degree")
    parser.add_argument("--theta", type=float, help="Doerfler parameter in (0, 1]")
    parser.add_argument("--beta-max", type=int, help="maximal bisection rounds per marked patch")
    parser.add_argument("--clb-max", type=float, help="target bound for the lifting constants")
    parser.add_argument("--algorithm", choices=("vertex", "element"))
    parser.add_argument("--max-dofs", type=int)
    parser.add_argument("--max-iters", type=int)
    parser.add_argument("--out", help="output directory (default: current directory)")
    parser.add_argument("--dump-meshes", action="store_true", default=None,
                        help="write the mesh of every level")
    parser.add_argument("--seed", type=int, help="reserved for the property-test harness")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def parse_config(argv=None, parser: argparse.ArgumentParser | None = None):
    """Parse run flags (and an optional JSON file) into a config and output paths.

    Raises ``SystemExit`` with a usage message on invalid options.
    """
    parser = build_parser() if parser is None else parser
    args = parser.parse_args(argv)
    opts = {}
    if args.config:
        try:
            with open(args.config) as fh:
                opts = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config file {args.config}: {exc}")
        if not isinstance(opts, dict):
            parser.error(f"config file {args.config} must hold a JSON object")
        opts = {k.replace("-", "_"): v for k, v in opts.items()}
    for key, val in vars(args).items():
        if key not in ("config", "verbose") and val is not None:
            opts[key] = val
    known = {f.name for f in fields(AdaptConfig)}
    unknown = set(opts) - known - {"out", "dump_meshes", "seed"}
    if unknown:
        parser.error(f"unknown option(s) in config file: {', '.join(sorted(unknown))}")
    paths = RunPaths(opts.pop("out", "."), bool(opts.pop("dump_meshes", False)))
    opts.pop("seed", None)
    try:
        config = AdaptConfig(**opts)
    except (ConfigError, TypeError) as exc:
        parser.error(str(exc))
    return config, make_problem(config.problem, config.p), paths


def record_row(rec: AdaptRecord) -> list[str]:
    beta = (list(rec.beta_hist) + [0, 0, 0])[:3]
    vals = dict(rec.as_dict(), beta1=beta[0], beta2=beta[1], beta3=beta[2])
    return [_fmt(vals[c]) for c in CSV_COLUMNS]


def contraction_violations(records, slack: float = CONTRACTION_SLACK) -> int:
    """Steps whose realized error ratio exceeds ``q_ctr`` (where both are known)."""
    n = 0
    for r in records:
        if math.isfinite(r.err_ratio) and math.isfinite(r.q_ctr) and r.err_ratio > r.q_ctr * (1 + slack):
            n += 1
    return n


def summarize(records, config: AdaptConfig) -> dict:
    w = tail_window(records)
    rates = {}
    for key in ("error", "eta_elem_total"):
        try:
            rates[key] = fit_rate(records, key, w)
        except ValueError:
            rates[key] = float("nan")
    eff = np.array([r.effectivity for r in records], dtype=float)
    eff = eff[np.isfinite(eff)]
    clb = np.array([r.clb_max for r in records if r.marked], dtype=float)
    ratio = np.array([r.q_ctr / r.err_ratio for r in records
                      if math.isfinite(r.q_ctr) and math.isfinite(r.err_ratio) and r.err_ratio > 0])
    out = {
        "problem": config.problem, "p": config.p, "algorithm": config.algorithm,
        "theta": config.theta, "levels": len(records), "final_dofs": records[-1].n_dofs,
        "rate_error": rates["error"], "rate_estimator": rates["eta_elem_total"],
        "rate_window": w, "rate_expected": -config.p / 2,
        "clb_max": clb.max() if clb.size else float("nan"),
        "clb_min": min(r.clb_min for r in records if r.marked) if clb.size else float("nan"),
        "effectivity_min": eff.min() if eff.size else float("nan"),
        "effectivity_max": eff.max() if eff.size else float("nan"),
        "q_ctr_effectivity_min": ratio.min() if ratio.size else float("nan"),
        "q_ctr_effectivity_max": ratio.max() if ratio.size else float("nan"),
        "contraction_violations": contraction_violations(records),
    }
    return {k: _json_value(v) if isinstance(v, (float, np.floating, np.integer)) else v
            for k, v in out.items()}


def _open(path, mode="w"):
    try:
        return open(path, mode, newline="")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def run_experiment(config: AdaptConfig, problem=None, paths: RunPaths | None = None):
    """Run one adaptive experiment and write its CSV and JSON outputs.

    Returns ``(state, summary)``.
    """
    problem = make_problem(config.problem, config.p) if problem is None else problem
    paths = RunPaths() if paths is None else paths
    try:
        os.makedirs(paths.out, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {paths.out}: {exc.strerror}") from exc

    def dump(mesh, rec):
        if paths.dump_meshes:
            write_mesh(mesh, paths.mesh(rec.level))

    state = run_adaptive(config, problem, callback=dump)
    with _open(paths.csv) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for rec in state.records:
            writer.writerow(record_row(rec))
    summary = summarize(state.records, config)
    with _open(paths.summary) as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    return state, summary


def sweep_meshes(problem: str = "lshape", rounds=SWEEP_ROUNDS):
    base = make_problem(problem).initial_mesh()
    return [refine_uniform(base, k) for k in rounds]


def effectivity_sweep(problem: str = "lshape", p_max: int = 4, rounds=SWEEP_ROUNDS,
                      path: str | None = None) -> list[dict]:
    """Effectivity of the equilibrated estimator on fixed uniform meshes for ``p = 1..p_max``.

    The effectivity is reported as NaN when both error and estimator vanish.
    """
    if not 1 <= p_max <= MAX_LAGRANGE_DEGREE:
        raise ValueError(f"p_max={p_max} outside the supported range 1..{MAX_LAGRANGE_DEGREE}")
    rows = []
    for mesh in sweep_meshes(problem, rounds):
        for p in range(1, p_max + 1):
            pr = make_problem(problem, p)
            if not pr.has_exact:
                raise ValueError(f"problem {problem!r} has no exact solution for the sweep")
            u = solve_poisson(mesh, p, pr.f, pr.g)
            sigma = assemble_global_flux(equilibrate_patches(u, pr.f))
            eta = element_indicators(u, sigma, pr.f).total
            err = energy_error(pr.grad_exact, u, pr.corner)
            eff = eta / err if err > 0 else (float("nan") if eta == 0 else math.inf)
            rows.append(dict(n_elem=mesh.n_elements, p=p, n_dofs=u.space.n_free, error=err,
                             eta=eta, effectivity=eff))
    if path is not None:
        with _open(path) as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(SWEEP_COLUMNS)
            for r in rows:
                writer.writerow([_fmt(r[c]) for c in SWEEP_COLUMNS])
    return rows


def _sweep_main(argv) -> int:
    parser = argparse.ArgumentParser(prog="eqafem sweep",
                                     description="effectivity against the polynomial degree")
    parser.add_argument("--problem", default="lshape", choices=("lshape", "square"))
    parser.add_argument("--p-max", type=int, default=4)
    parser.add_argument("--out", default=".")
    args = parser.parse_args(argv)
    if not 1 <= args.p_max <= MAX_LAGRANGE_DEGREE:
        parser.error(f"--p-max must lie in 1..{MAX_LAGRANGE_DEGREE} (basis support limit)")
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "effectivity_sweep.csv")
    for r in effectivity_sweep(args.problem, args.p_max, path=path):
        print(f"{r['n_elem']:4d} triangles  p={r['p']}  effectivity {r['effectivity']:.4f}")
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] == "sweep":
        return _sweep_main(argv[1:])
    if argv and argv[0] == "run":
        argv = argv[1:]
    parser = build_parser()
    logging.basicConfig(level=logging.INFO if ("-v" in argv or "--verbose" in argv) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    config, problem, paths = parse_config(argv, parser)
    try:
        _, summary = run_experiment(config, problem, paths)
    except OSError as exc:
        parser.exit(1, f"eqafem: error: {exc}\n")
    print(json.dumps(summary, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
