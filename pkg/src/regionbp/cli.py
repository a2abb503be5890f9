"""Command-line entry point: ``regionbp infer|ldpc|compare``."""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from typing import Dict, List, Optional

import numpy as np

from . import oracle
from .bethe import BPOptions, bp_run
from .dd import DDOptions, dd_run, resolve_threads
from .errors import InputError, RegionBPError
from .formatting import dumps
from .graph import FactorGraph, load_graph
from .ldpc import METHODS, ber_experiment, generate_ldpc, rows_to_csv
from .regions import (
    DEFAULT_REGION_BUDGET,
    auto_partition,
    build_decomposition,
    load_partition,
    regional_bp_run,
)
from .results import InferenceResult
from .solvers import SamplerOptions

EXIT_OK, EXIT_ERROR, EXIT_MAX_ITERS = 0, 1, 2


def result_schema() -> dict:
    return json.loads(resources.files("regionbp").joinpath("result.schema.json").read_text("utf-8"))


def _add_engine_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("engine options")
    g.add_argument("--max-iters", type=int, default=None,
                   help="outer iteration cap (bp/regional-bp default 1000, dd default 200)")
    g.add_argument("--tol", type=float, default=None,
                   help="message residual tolerance (bp/regional-bp default 1e-8, dd default 1e-6)")
    g.add_argument("--damping", type=float, default=0.5, help="log-space damping on old messages (default 0.5)")
    g.add_argument("--regions", default=None,
                   help="partition source: a JSON file (region id -> factor ids), 'inline' for the "
                        "graph's regions block, or 'auto' (default: inline if present, else auto)")
    g.add_argument("--region-budget", type=int, default=DEFAULT_REGION_BUDGET,
                   help="state-space budget per region for --regions auto (default 65536)")
    g.add_argument("--solver", choices=("exact", "gibbs"), default="exact", help="dd region black box")
    g.add_argument("--exact-method", choices=("newton", "fixed-point"), default="newton",
                   help="root finder of the exact solver when --inner-iters > 0")
    g.add_argument("--inner-iters", type=int, default=0,
                   help="field updates per region solve, starting from the incoming messages (default 0)")
    g.add_argument("--inner-tol", type=float, default=None,
                   help="region self-consistency tolerance (exact 1e-10, gibbs 1e-3)")
    g.add_argument("--samples", type=int, default=10000, help="kept Gibbs sweeps per region solve")
    g.add_argument("--burn-in", type=int, default=None, help="Gibbs burn-in sweeps (default 10%% of samples)")
    g.add_argument("--thinning", type=int, default=1, help="keep every k-th sweep")
    g.add_argument("--init", choices=("uniform", "prior"), default="uniform", help="dd message initialization")
    g.add_argument("--check-soundness", action="store_true",
                   help="evaluate the regional BP equations at the dd fixed point")
    g.add_argument("--seed", type=int, default=0, help="global seed (default 0)")
    g.add_argument("--threads", type=int, default=None,
                   help="worker cap for region solves (fallback: REGIONBP_THREADS, else 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regionbp", description="Region-based belief propagation and domain decomposition.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("infer", help="run one inference method on a graph file")
    p.add_argument("--graph", required=True, help="graph JSON file")
    p.add_argument("--method", choices=METHODS, default="bp")
    p.add_argument("--out", default=None, help="result file (default stdout)")
    _add_engine_flags(p)

    p = sub.add_parser("compare", help="run every method on one graph and report pairwise TV distances")
    p.add_argument("--graph", required=True)
    p.add_argument("--out", default=None)
    _add_engine_flags(p)

    p = sub.add_parser("ldpc", help="Monte-Carlo bit-error-rate experiment on a random regular LDPC code")
    p.add_argument("--n", type=int, required=True, help="code length")
    p.add_argument("--dv", type=int, default=3, help="bit degree")
    p.add_argument("--dc", type=int, default=6, help="check degree")
    p.add_argument("--p", default="0.05", help="BSC flip probability, or a comma-separated list")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--methods", default="bp,dd", help="comma-separated subset of " + ",".join(METHODS))
    p.add_argument("--block-size", type=int, default=None, help="checks per region (default: one region)")
    p.add_argument("--constraint", choices=("hard", "soft"), default="hard")
    p.add_argument("--delta", type=float, default=None, help="soft-mode odd-parity penalty (default 8 kT)")
    p.add_argument("--code-seed", type=int, default=None, help="seed for the code construction (default --seed)")
    p.add_argument("--out", default=None, help="CSV path (default stdout)")
    _add_engine_flags(p)
    return parser


def _bp_opts(args) -> BPOptions:
    return BPOptions(
        max_iterations=1000 if args.max_iters is None else args.max_iters,
        tolerance=1e-8 if args.tol is None else args.tol,
        damping=args.damping,
    )


def _dd_opts(args) -> DDOptions:
    return DDOptions(
        max_iterations=200 if args.max_iters is None else args.max_iters,
        tolerance=1e-6 if args.tol is None else args.tol,
        damping=args.damping,
        solver=args.solver,
        exact_method=args.exact_method,
        inner_iters=args.inner_iters,
        inner_tol=args.inner_tol,
        sampler=SamplerOptions(samples=args.samples, burn_in=args.burn_in, thinning=args.thinning, seed=args.seed),
        init=args.init,
        threads=resolve_threads(args.threads),
        check_soundness=args.check_soundness,
    )


def _decomposition(graph: FactorGraph, args):
    src = args.regions
    if src is None:
        src = "inline" if graph.regions else "auto"
    if src == "inline":
        if not graph.regions:
            raise InputError("--regions inline given but the graph file has no regions block")
        partition = {r: list(fs) for r, fs in graph.regions.items()}
    elif src == "auto":
        partition = auto_partition(graph, args.region_budget)
    else:
        partition = load_partition(src)
    return build_decomposition(graph, partition)


def exact_result(graph: FactorGraph) -> InferenceResult:
    logz = oracle.partition_function(graph)
    return InferenceResult(
        method="exact",
        marginals=oracle.variable_marginals(graph),
        free_energy={"helmholtz": -graph.kT * logz},
    )


def run_method(graph: FactorGraph, method: str, args) -> InferenceResult:
    if method == "exact":
        return exact_result(graph)
    if method == "bp":
        return bp_run(graph, _bp_opts(args))
    decomp = _decomposition(graph, args)
    if method == "regional-bp":
        return regional_bp_run(graph, decomp, _bp_opts(args))
    return dd_run(graph, decomp, _dd_opts(args))


def _emit(text: str, out: Optional[str]) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def cmd_infer(args) -> int:
    graph = load_graph(args.graph)
    result = run_method(graph, args.method, args)
    _emit(dumps(result.to_document()) + "\n", args.out)
    return EXIT_OK if result.converged else EXIT_MAX_ITERS


def max_tv(a: Dict[str, np.ndarray], b: Dict[str, np.ndarray]) -> float:
    return max((0.5 * float(np.abs(np.asarray(a[v]) - np.asarray(b[v])).sum()) for v in a), default=0.0)


def cmd_compare(args) -> int:
    graph = load_graph(args.graph)
    oracle.partition_function(graph)  # capacity check before any engine runs
    results = {m: run_method(graph, m, args) for m in METHODS}
    matrix = {
        m: {k: max_tv(results[m].marginals, results[k].marginals) for k in METHODS} for m in METHODS
    }
    doc = {"methods": {m: r.to_document() for m, r in results.items()}, "max_tv": matrix}
    _emit(dumps(doc) + "\n", args.out)
    return EXIT_OK


def _float_list(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InputError(f"could not parse flip probabilities {text!r}") from None


def cmd_ldpc(args) -> int:
    code = generate_ldpc(args.n, args.dv, args.dc, args.seed if args.code_seed is None else args.code_seed)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    rows = ber_experiment(
        code,
        _float_list(args.p),
        args.trials,
        methods,
        seed=args.seed,
        mode=args.constraint,
        delta=args.delta,
        block_size=args.block_size,
        bp_opts=_bp_opts(args),
        dd_opts=_dd_opts(args),
    )
    _emit(rows_to_csv(rows), args.out)
    return EXIT_OK


COMMANDS = {"infer": cmd_infer, "compare": cmd_compare, "ldpc": cmd_ldpc}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (RegionBPError, ValueError, ArithmeticError, OSError) as exc:
        print(f"regionbp: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
