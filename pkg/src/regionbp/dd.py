"""Domain decomposition: the outer loop over region black boxes.

Each round computes corrective potentials from the variable-to-region
messages, solves every region, divides the returned boundary marginals by
the incoming message to get region-to-variable messages, and re-estimates
the variable-to-region messages.  Both families are damped in log space.
"""

from __future__ import annotations

import itertools
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from .bethe import factor_message
from .errors import DegeneracyError, InputError
from .graph import FactorGraph
from .logspace import DEFAULT_CAP, LOG_FLOOR, PROB_FLOOR, damp, log_normalize
from .regions import RegionalBeliefs, RegionDecomposition, regional_free_energy, region_energy
from .results import CONVERGED, MAX_ITERS, InferenceResult
from .solvers import (
    BoundarySpec,
    GibbsSolverOptions,
    RegionProblem,
    RegionSolution,
    SamplerOptions,
    region_problem,
    solve_region_exact,
    solve_region_gibbs,
)

Pair = Tuple[str, str]


@dataclass
class DDMessageState:
    var_to_region: Dict[Pair, np.ndarray] = field(default_factory=dict)
    region_to_var: Dict[Pair, np.ndarray] = field(default_factory=dict)
    iteration: int = 0
    residual: float = float("inf")


@dataclass(frozen=True)
class DDOptions:
    max_iterations: int = 200
    tolerance: float = 1e-6
    damping: float = 0.5
    solver: str = "exact"
    exact_method: str = "newton"
    inner_iters: int = 0
    inner_tol: Optional[float] = None
    inner_damping: float = 0.5
    sampler: SamplerOptions = SamplerOptions()
    init: str = "uniform"
    threads: int = 1
    check_soundness: bool = False
    soundness_tol: float = 1e-5
    cap: int = DEFAULT_CAP

    def __post_init__(self):
        if not self.tolerance > 0:
            raise InputError("tolerance must be positive")
        if not 0.0 <= self.damping < 1.0:
            raise InputError("damping must lie in [0, 1)")
        if self.solver not in ("exact", "gibbs"):
            raise InputError(f"unknown solver {self.solver!r}")
        if self.init not in ("uniform", "prior"):
            raise InputError(f"unknown initialization {self.init!r}")
        if self.max_iterations < 0 or self.inner_iters < 0:
            raise InputError("iteration limits must be nonnegative")
        if self.threads < 1:
            raise InputError("threads must be at least 1")

    @property
    def resolved_inner_tol(self) -> float:
        if self.inner_tol is not None:
            return self.inner_tol
        return 1e-10 if self.solver == "exact" else 1e-3


def resolve_threads(threads: Optional[int] = None) -> int:
    """Explicit value, else REGIONBP_THREADS, else 1."""
    if threads is not None:
        return int(threads)
    env = os.environ.get("REGIONBP_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InputError(f"REGIONBP_THREADS must be an integer, got {env!r}") from None
    return 1


def initial_state(graph: FactorGraph, decomp: RegionDecomposition, init: str = "uniform") -> DDMessageState:
    state = DDMessageState()
    for v, r in decomp.pairs():
        k = graph.cards[v]
        uniform = np.full(k, -np.log(k))
        state.region_to_var[(r, v)] = uniform
        if init == "prior":
            state.var_to_region[(v, r)] = log_normalize(np.maximum(graph.log_prior(v), LOG_FLOOR))
        else:
            state.var_to_region[(v, r)] = uniform.copy()
    return state


def potential(graph: FactorGraph, decomp: RegionDecomposition, state: DDMessageState, var: str, rid: str) -> np.ndarray:
    """V_j^R = E_j + kT Σ_{S≠R} log F_{j→S}, with floored logs and capped prior energy."""
    if decomp.counts.get(var, 0) < 2 or rid not in decomp.regions_of.get(var, ()):
        raise InputError(f"{var!r} is not a boundary variable of region {rid!r}")
    kT = graph.kT
    E = np.minimum(np.asarray(graph.priors[var].energies, dtype=float), -kT * LOG_FLOOR)
    for s in decomp.regions_of[var]:
        if s != rid:
            E = E + kT * np.maximum(state.var_to_region[(var, s)], LOG_FLOOR)
    return E


def compute_potentials(
    graph: FactorGraph, decomp: RegionDecomposition, state: DDMessageState
) -> Dict[Pair, np.ndarray]:
    return {(v, r): potential(graph, decomp, state, v, r) for v, r in decomp.pairs()}


def _divide(log_mu: np.ndarray, log_f: np.ndarray, name: str) -> np.ndarray:
    a = np.maximum(log_mu, LOG_FLOOR)
    b = np.maximum(log_f, LOG_FLOOR)
    out = a - b
    out[(a <= LOG_FLOOR) & (b <= LOG_FLOOR)] = LOG_FLOOR
    if np.all(a <= LOG_FLOOR):
        raise DegeneracyError(f"message {name} has all-floor support")
    return np.maximum(log_normalize(out), LOG_FLOOR)


class _Engine:
    """Per-run caches: region energy tables and the worker pool size."""

    def __init__(self, graph, decomp, opts: DDOptions):
        self.graph = graph
        self.decomp = decomp
        self.opts = opts
        self.tables = {}
        for r in decomp.regions:
            if graph.state_space_size(decomp.support[r]) <= opts.cap:
                self.tables[r] = region_energy(graph, decomp, r, True, opts.cap)

    def problem(self, rid, state) -> RegionProblem:
        d, g = self.decomp, self.graph
        pots = {v: potential(g, d, state, v, rid) for v in d.boundary[rid]}
        fields = {v: state.var_to_region[(v, rid)] for v in d.boundary[rid]}
        if rid in self.tables:
            sup = d.support[rid]
            boundary = tuple(BoundarySpec(v, d.counts[v], pots[v]) for v in d.boundary[rid])
            return RegionProblem(rid, sup, g.shape(sup), boundary, g.kT, energy=self.tables[rid],
                                 init_fields=fields)
        return region_problem(g, d, rid, pots, fields, self.opts.cap)

    def solve(self, rid, state) -> RegionSolution:
        o = self.opts
        prob = self.problem(rid, state)
        internal = list(self.decomp.interior[rid])
        if o.solver == "exact":
            return solve_region_exact(prob, max_iters=o.inner_iters, tol=o.resolved_inner_tol,
                                      damping=o.inner_damping, method=o.exact_method, internal=internal)
        gopts = GibbsSolverOptions(o.inner_iters, o.resolved_inner_tol, o.inner_damping, o.sampler)
        return solve_region_gibbs(prob, gopts, outer=state.iteration, internal=internal)

    def solve_all(self, state) -> Dict[str, RegionSolution]:
        rids = list(self.decomp.regions)
        if self.opts.threads > 1 and len(rids) > 1:
            with ThreadPoolExecutor(max_workers=self.opts.threads) as pool:
                sols = list(pool.map(lambda r: self.solve(r, state), rids))
        else:
            sols = [self.solve(r, state) for r in rids]
        return dict(zip(rids, sols))


def _update(graph, decomp, state, sols, gamma) -> DDMessageState:
    residual = 0.0
    r2v = {}
    for v, r in decomp.pairs():
        log_mu = np.log(np.maximum(sols[r].boundary_marginals[v], PROB_FLOOR))
        proposed = _divide(log_mu, state.var_to_region[(v, r)], f"{r}->{v}")
        old = state.region_to_var[(r, v)]
        r2v[(r, v)] = damp(old, proposed, gamma)
        residual = max(residual, float(np.max(np.abs(r2v[(r, v)] - old))))
    v2r = {}
    for v, r in decomp.pairs():
        acc = graph.log_prior(v) + sum(
            (r2v[(s, v)] for s in decomp.regions_of[v] if s != r), np.zeros(graph.cards[v])
        )
        acc = np.maximum(acc, LOG_FLOOR)
        if np.all(acc <= LOG_FLOOR):
            raise DegeneracyError(f"message {v}->{r} has all-floor support")
        proposed = np.maximum(log_normalize(acc), LOG_FLOOR)
        old = state.var_to_region[(v, r)]
        v2r[(v, r)] = damp(old, proposed, gamma)
        residual = max(residual, float(np.max(np.abs(v2r[(v, r)] - old))))
    return DDMessageState(v2r, r2v, state.iteration + 1, residual)


def dd_iterate(
    graph: FactorGraph,
    decomp: RegionDecomposition,
    state: DDMessageState,
    opts: Optional[DDOptions] = None,
    engine: Optional[_Engine] = None,
) -> Tuple[DDMessageState, Dict[str, RegionSolution]]:
    """One outer round; returns the new state and the region solutions it used."""
    opts = opts or DDOptions()
    engine = engine or _Engine(graph, decomp, opts)
    sols = engine.solve_all(state)
    return _update(graph, decomp, state, sols, opts.damping), sols


def consistency_gap(solutions: Mapping[str, RegionSolution], decomp: RegionDecomposition) -> float:
    """Largest total-variation disagreement between regions' marginals of a shared variable."""
    gap = 0.0
    for v in decomp.boundary_variables:
        ests = [np.asarray(solutions[r].boundary_marginals[v]) for r in decomp.regions_of[v]]
        for a, b in itertools.combinations(ests, 2):
            gap = max(gap, 0.5 * float(np.abs(a - b).sum()))
    return gap


@dataclass(frozen=True)
class SoundnessReport:
    region_to_var_residual: float
    var_to_region_residual: float
    tol: float

    @property
    def residual(self) -> float:
        return max(self.region_to_var_residual, self.var_to_region_residual)

    @property
    def passed(self) -> bool:
        return self.residual <= self.tol


def soundness_check(
    graph: FactorGraph,
    decomp: RegionDecomposition,
    state: DDMessageState,
    tol: float = 1e-5,
    cap: int = DEFAULT_CAP,
) -> SoundnessReport:
    """Plug M_{j→R} := F_{j→R}, M_{R→j} := F_{R→j} into both regional BP
    update equations and report the largest log deviation of each."""

    def gap(lhs, rhs):
        a = np.maximum(log_normalize(np.maximum(lhs, LOG_FLOOR)), LOG_FLOOR)
        b = np.maximum(log_normalize(np.maximum(rhs, LOG_FLOOR)), LOG_FLOOR)
        return float(np.max(np.abs(a - b)))

    r_res = 0.0
    for r in decomp.regions:
        if not decomp.boundary[r]:
            continue
        sup = decomp.support[r]
        table = -region_energy(graph, decomp, r, True, cap) / graph.kT
        incoming = [state.var_to_region.get((v, r)) for v in sup]
        for axis, v in enumerate(sup):
            if decomp.counts[v] >= 2:
                r_res = max(r_res, gap(state.region_to_var[(r, v)], factor_message(table, incoming, axis)))
    v_res = 0.0
    for v, r in decomp.pairs():
        rhs = graph.log_prior(v) + sum(
            (state.region_to_var[(s, v)] for s in decomp.regions_of[v] if s != r), np.zeros(graph.cards[v])
        )
        v_res = max(v_res, gap(state.var_to_region[(v, r)], rhs))
    return SoundnessReport(r_res, v_res, tol)


def dd_run(
    graph: FactorGraph,
    decomp: RegionDecomposition,
    opts: Optional[DDOptions] = None,
    state: Optional[DDMessageState] = None,
) -> InferenceResult:
    opts = opts or DDOptions()
    engine = _Engine(graph, decomp, opts)
    state = state or initial_state(graph, decomp, opts.init)
    status = CONVERGED
    if not state.var_to_region:
        state.residual = 0.0
        state.iteration = max(state.iteration, 1)
    else:
        while True:
            if state.iteration >= opts.max_iterations:
                status = MAX_ITERS
                break
            state, _ = dd_iterate(graph, decomp, state, opts, engine)
            if state.residual <= opts.tolerance:
                break
    # beliefs from the solves at the final messages
    sols = engine.solve_all(state)

    marginals: Dict[str, np.ndarray] = {}
    for v in graph.var_ids:
        c = decomp.counts[v]
        if c >= 2:
            marginals[v] = np.mean([sols[r].boundary_marginals[v] for r in decomp.regions_of[v]], axis=0)
        elif c == 1:
            marginals[v] = np.asarray(sols[decomp.owner(v)].internal_marginals[v], dtype=float)
        else:
            marginals[v] = np.exp(log_normalize(graph.log_prior(v)))

    diagnostics: Dict[str, object] = {
        "solver": opts.solver,
        "black_box_residual": max((s.residual for s in sols.values()), default=0.0),
        "regions": len(decomp.regions),
    }
    if opts.solver == "gibbs":
        diagnostics["samples"] = int(sum(s.samples for s in sols.values()))
    floored = [v for v, p in marginals.items() if np.any(p <= PROB_FLOOR)]
    if floored:
        diagnostics["floor_beliefs"] = floored

    free_energy = {}
    region_b = None
    if all(s.log_belief is not None for s in sols.values()):
        region_b = {r: np.exp(s.log_belief) for r, s in sols.items()}
        free_energy["regional"] = regional_free_energy(graph, decomp, RegionalBeliefs(region_b, marginals))

    soundness = None
    if opts.check_soundness:
        soundness = soundness_check(graph, decomp, state, opts.soundness_tol, opts.cap).residual

    result = InferenceResult(
        method="dd",
        marginals=marginals,
        status=status,
        iterations=state.iteration,
        residual=state.residual,
        free_energy=free_energy,
        consistency_gap=consistency_gap(sols, decomp),
        soundness_residual=soundness,
        region_beliefs=region_b,
        diagnostics=diagnostics,
    )
    result.state = state
    result.solutions = sols
    return result
