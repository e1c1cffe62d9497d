"""Command-line front end: ``solve``, ``bounds`` and ``experiment``.

Every command reads a JSON config (model keys plus optional run keys) and
flags override config keys of the same name.  Exit codes: 0 when everything
checked holds, 1 on operational errors, 2 when a checked bound fails.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import coarse, io, sim
from .boundary_law import NoConvergence, WrongBranch, build_chain, verify_localization
from .model import AdmissibilityError, constants, load_model_config
from .subtree import bfs_subtree, grow_random

EXPERIMENTS = ("reconstruct", "ea", "overlap", "badprob", "covdecay")
REL_TOL = 1e-9
BOUNDS_COLUMNS = [
    "gamma_size", "t", "exact_p", "markov_bound", "coarse_bound",
    "propagation_bound", "lemma31_bound", "status",
]


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors are operational errors (1); 2 is reserved for failed bounds
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load(args) -> dict:
    if not args.config:
        raise CliError("--config is required")
    try:
        raw = json.loads(Path(args.config).read_text())
    except FileNotFoundError:
        raise CliError(f"config file not found: {args.config}")
    except json.JSONDecodeError as exc:
        raise CliError(f"cannot parse {args.config}: {exc}")
    if not isinstance(raw, dict):
        raise CliError("config must be a JSON object")
    for key in ("seed", "samples", "depth", "experiment", "workers"):
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = val
    return raw


def _chain(raw):
    try:
        model, A, _ = load_model_config(raw)
    except (AdmissibilityError, ValueError, TypeError) as exc:
        raise CliError(f"invalid model: {exc}")
    try:
        spec = build_chain(model, A, tol=float(raw.get("tol", 1e-13)), max_iter=int(raw.get("max_iter", 500)))
    except (NoConvergence, WrongBranch) as exc:
        raise CliError(f"{type(exc).__name__}: {exc}")
    return model, spec


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_solve(args) -> int:
    raw = _load(args)
    model, spec = _chain(raw)
    bundle = constants(model, len(spec.A))
    report = verify_localization(spec, model, bundle)
    report = {"model": model.to_dict(), "A": list(spec.A), **report}
    out = _out_dir(args)
    io.save_chain_spec(out / "spec.json", spec)
    io.write_json(out / "localization.json", report)
    if report["conditioned"] and not report["all_pass"]:
        return 2
    return 0


def _log_or_inf(x: float) -> float:
    return math.exp(x) if x < 709 else float("inf")


def bound_rows(spec, model, bundle, sizes, t_grid) -> tuple[list[dict], bool]:
    """Domination-chain rows over a (|gamma|, t) grid plus the clamped t*.

    Returns the rows and whether any unconditional link failed.
    """
    rows, violated = [], False
    vacuous = bundle.lambda_beta <= 0
    delta0 = bundle.delta0
    for g in sizes:
        st = bfs_subtree(model.d, g)
        if st.closure_size <= coarse.MAX_ENUMERATION:
            p = coarse.exact_bad_probability(spec, st, delta0)
        else:
            p = coarse.bad_probability(spec, st, delta0)
        _, t_star = coarse.optimal_t(g, bundle)
        log_final = coarse.bad_event_bound(g, bundle).log_final
        for t in sorted(set(float(x) for x in t_grid) | {t_star}):
            shift = -t * delta0 * g
            lm = coarse.log_exact_moment(spec, st, t) + shift
            lc = coarse.log_coarse_moment(spec, st, t) + shift
            lp = coarse.log_propagation_bound(g, bundle, t) + shift
            slack = math.log1p(REL_TOL)
            ok = (p == 0 or math.log(p) <= lm + slack) and lm <= lc + slack and lc <= lp + slack
            if not vacuous and t == t_star:
                ok = ok and lp <= log_final + slack
            status = "ok" if ok else "violated"
            if ok and vacuous:
                status = "vacuous"
            violated |= not ok
            rows.append({
                "gamma_size": g, "t": t, "exact_p": p,
                "markov_bound": _log_or_inf(lm), "coarse_bound": _log_or_inf(lc),
                "propagation_bound": _log_or_inf(lp), "lemma31_bound": _log_or_inf(log_final),
                "status": status,
            })
    return rows, violated


def cmd_bounds(args) -> int:
    raw = _load(args)
    model, spec = _chain(raw)
    bundle = constants(model, len(spec.A))
    sizes = [int(g) for g in raw.get("gamma_sizes", [1, 2, 3, 5, 10, 20])]
    t_grid = [float(t) for t in raw.get("t_grid", [0.0, 0.5, 1.0, 2.0])]
    rows, violated = bound_rows(spec, model, bundle, sizes, t_grid)
    io.write_csv(_out_dir(args) / "bounds.csv", rows, BOUNDS_COLUMNS)
    return 2 if violated else 0


def _badprob(spec, model, raw, samples, seed, workers):
    bundle = constants(model, len(spec.A))
    sizes = [int(g) for g in raw.get("gamma_sizes", [1, 2, 3, 5, 10, 20, 50])]
    gen = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(2**32,)))
    entries, ok = [], True
    for i, g in enumerate(sizes):
        st = grow_random(model.d, g, gen)
        exact = coarse.bad_probability(spec, st, bundle.delta0)
        est = sim.estimate_bad_probability(spec, st, bundle.delta0, samples, int(seed) + i, workers)
        bound = coarse.bad_event_bound(g, bundle).final
        agrees = est["ci_low"] <= exact <= est["ci_high"]
        under = bundle.lambda_beta <= 0 or est["estimate"] - est["ci_halfwidth"] <= bound
        ok &= agrees and under
        entries.append({**est, "parents": st.to_parent_array(), "exact": exact, "bound": bound,
                        "agrees_with_exact": agrees, "under_bound": under})
    report = {"experiment": "badprob", "samples": samples, "seed": int(seed), "delta0": bundle.delta0,
              "lambda_beta": bundle.lambda_beta, "bound_vacuous": bundle.lambda_beta <= 0,
              "subtrees": entries, "pass": bool(ok)}
    rows = [{"gamma_size": e["gamma_size"], "hits": e["hits"], "estimate": e["estimate"], "exact": e["exact"],
             "bound": e["bound"]} for e in entries]
    return report, rows


def run_experiment(raw: dict, workers: int = 1):
    name = raw.get("experiment")
    if name not in EXPERIMENTS:
        raise CliError(f"unknown experiment {name!r}; choose one of {', '.join(EXPERIMENTS)}")
    if raw.get("seed") is None:
        raise CliError("a seed is required for stochastic commands (--seed or \"seed\" in the config)")
    seed = int(raw["seed"])
    if seed < 0 or seed >= 2**64:
        raise CliError("seed must be an unsigned 64-bit integer")
    samples = int(raw.get("samples", 2000))
    depth = int(raw.get("depth", 8))
    if samples < 3 or depth < 1:
        raise CliError("need samples >= 3 and depth >= 1")
    model, spec = _chain(raw)
    if name == "reconstruct":
        a = int(raw.get("a", spec.A[0]))
        report, rows = sim.reconstruction_experiment(spec, model, a, depth, samples, seed, workers)
    elif name == "ea":
        report, rows = sim.ea_parameter(spec, model, depth, samples, seed, workers)
    elif name == "overlap":
        n = int(raw.get("n", 5))
        spacings = raw.get("spacings") or sim.default_overlap_spacings(n, int(raw.get("kappa", 4)))
        report, rows = sim.overlap_experiment(spec, model, spacings, n, depth, samples, seed, workers)
    elif name == "badprob":
        report, rows = _badprob(spec, model, raw, samples, seed, workers)
    else:
        delta0 = constants(model, len(spec.A)).delta0
        report, rows = sim.covariance_decay(
            spec, delta0, raw.get("distances", (2, 4, 6, 8)), int(raw.get("radius", 2)), samples, seed, workers
        )
    report = {"model": model.to_dict(), "A": list(spec.A), **report}
    return report, rows


def cmd_experiment(args) -> int:
    raw = _load(args)
    report, rows = run_experiment(raw, int(raw.get("workers", 1)))
    out = _out_dir(args)
    io.write_json(out / "report.json", report)
    io.write_csv(out / "samples.csv", rows)
    return 2 if report.get("pass") is False else 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clocktree", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("solve", "solve the boundary law and check the localisation bounds"),
        ("bounds", "tabulate the bad-event domination chain"),
        ("experiment", "run a Monte Carlo experiment"),
    ]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="JSON model/run config")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--samples", type=int)
        p.add_argument("--depth", type=int)
        p.add_argument("--experiment")
        p.add_argument("--workers", type=int, help="threads for sampling (results do not depend on it)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"solve": cmd_solve, "bounds": cmd_bounds, "experiment": cmd_experiment}
    try:
        return handlers[args.command](args)
    except CliError as exc:
        print(f"clocktree {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
